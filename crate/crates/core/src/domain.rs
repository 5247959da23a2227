//! Shared value types and record validation.
//!
//! Everything here is plain data. Readers build records with the `from_raw`
//! constructors and [`validate_record`] enforces the invariants against a
//! session's [`AdaptConfig`] before a record reaches the engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for `|‖f‖ − 1|` on a constructed feature.
pub const NORM_TOLERANCE: f64 = 1e-6;
/// Features off-norm by more than this are rejected instead of re-normalized.
pub const RENORMALIZE_LIMIT: f64 = 1e-4;
/// Tolerance for `|Σ p − 1|` on a class distribution.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Object recognition (one proposal per image) or detection (many boxed proposals).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Recognition,
    Detection,
}

impl TaskMode {
    pub fn is_detection(self) -> bool {
        matches!(self, TaskMode::Detection)
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec" | "recognition" => Ok(TaskMode::Recognition),
            "det" | "detection" => Ok(TaskMode::Detection),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    /// Scales `values` to unit length. Fails on a zero or non-finite vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NotNormalized { norm });
        }
        Ok(FeatureVec(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts `values` only if already unit length within [`NORM_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
            return Err(Error::NotNormalized { norm });
        }
        Ok(FeatureVec(values))
    }

    /// Wraps values without checking the norm. Used by readers ahead of
    /// [`validate_record`].
    pub fn from_raw(values: Vec<f64>) -> Self {
        FeatureVec(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &FeatureVec) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Width and height of a box as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxScale {
    pub w: f64,
    pub h: f64,
}

impl BoxScale {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        for (name, v) in [("w", w), ("h", h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::BadBox {
                    reason: format!("scale {name} = {v} outside [0, 1]"),
                });
            }
        }
        Ok(BoxScale { w, h })
    }
}

/// Center-format box `[x, y, w, h]`, every coordinate normalized by the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::BadBox {
                    reason: format!("{name} = {v} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }

    /// The `[w, h]` tail of the box.
    pub fn scale(&self) -> BoxScale {
        BoxScale {
            w: self.w,
            h: self.h,
        }
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Probability mass over the K categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDist(Vec<f64>);

impl ClassDist {
    /// Checks non-negativity and `|Σ p − 1| ≤ SIMPLEX_TOLERANCE`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs, SIMPLEX_TOLERANCE)?;
        Ok(ClassDist(probs))
    }

    /// Unchecked wrapper for readers and for engine outputs that are valid by
    /// construction.
    pub fn from_raw(probs: Vec<f64>) -> Self {
        ClassDist(probs)
    }

    pub fn uniform(k: usize) -> Self {
        ClassDist(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut p = vec![0.0; k];
        p[index] = 1.0;
        ClassDist(p)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0).0
    }

    pub fn max(&self) -> f64 {
        argmax(&self.0).1
    }

    /// Shannon entropy in nats with `0 · ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Lowest-index argmax. Panics on an empty slice.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn check_simplex(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::BadDistribution {
            reason: "empty distribution".into(),
        });
    }
    if let Some((i, p)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0)
    {
        return Err(Error::BadDistribution {
            reason: format!("probs[{i}] = {p}"),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::BadDistribution {
            reason: format!("sums to {sum}"),
        });
    }
    Ok(())
}

/// One VLM output unit: embedding, optional box, initial class probabilities,
/// plus optional ground truth used only for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub feature: FeatureVec,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub init_pred: ClassDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub proposals: Vec<ProposalRecord>,
}

/// Running state of one delayed-update entry: sums of the matches not yet
/// folded into the entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PendingUpdate {
    pub count: u64,
    pub feature_sum: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_sum: Option<[f64; 2]>,
    pub prior_sum: Vec<f64>,
}

/// One cached summary of past confident proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prototype: FeatureVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<BoxScale>,
    pub prior: ClassDist,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<PendingUpdate>,
}

/// Ordered cache. Entries are only ever appended or mutated in place.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheState {
    pub entries: Vec<CacheEntry>,
    pub created_total: u64,
    pub updated_total: u64,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of entries, `M`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of proposals folded into the cache so far.
    pub fn absorbed(&self) -> u64 {
        self.created_total + self.updated_total
    }
}

/// How a matched entry is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UpdateStrategy {
    /// Running mean weighted by the visit counter.
    Count,
    /// Exponential moving average with a fixed coefficient on the old value.
    Momentum { alpha: f64 },
    /// Count rule applied only on every `every`-th match, folding in the
    /// matches accumulated since the last refresh.
    Delayed { every: u64 },
}

impl UpdateStrategy {
    pub const DEFAULT_MOMENTUM: f64 = 0.95;
    pub const DEFAULT_DELAY: u64 = 5;

    pub fn momentum() -> Self {
        UpdateStrategy::Momentum {
            alpha: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn delayed() -> Self {
        UpdateStrategy::Delayed {
            every: Self::DEFAULT_DELAY,
        }
    }
}

impl std::str::FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(UpdateStrategy::Count),
            "momentum" => Ok(UpdateStrategy::momentum()),
            "delayed" => Ok(UpdateStrategy::delayed()),
            other => Err(Error::Config(format!("unknown update strategy `{other}`"))),
        }
    }
}

/// How the initial and cache predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Weights `exp(−H(p))` on each side.
    Entropy,
    /// Arithmetic mean.
    Average,
    InitOnly,
    CacheOnly,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(FusionStrategy::Entropy),
            "average" => Ok(FusionStrategy::Average),
            "init-only" | "init_only" => Ok(FusionStrategy::InitOnly),
            "cache-only" | "cache_only" => Ok(FusionStrategy::CacheOnly),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

/// Which number is compared against `tau2` when deciding between updating the
/// best entry and creating a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchScore {
    /// `P(U|x)[m*]`, the matching probability of the best entry.
    Posterior,
    /// The raw combined similarity of the best entry (cosine, or the
    /// `w_s`-weighted scale/feature mix in detection mode).
    Similarity,
}

impl std::str::FromStr for MatchScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(MatchScore::Posterior),
            "similarity" => Ok(MatchScore::Similarity),
            other => Err(Error::Config(format!("unknown match score `{other}`"))),
        }
    }
}

/// How entry priors evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Priors follow the absorbed final predictions.
    Adaptive,
    /// Priors are one-hot at the creating proposal's argmax and never change
    /// (likelihood-only adaptation).
    FrozenOneHot,
}

/// Session configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Confidence threshold on `max_k p_final[k]` for cache updates.
    pub tau1: f64,
    /// Match threshold on the best entry's score.
    pub tau2: f64,
    /// Scale-vs-feature balance in detection matching.
    pub ws: f64,
    pub task: TaskMode,
    pub update_strategy: UpdateStrategy,
    pub fusion_strategy: FusionStrategy,
    pub k: usize,
    pub d: usize,
    /// Multiplier on the similarities before the matching softmax. 1 is the
    /// plain `softmax(S)` form.
    #[serde(default = "default_scale")]
    pub similarity_scale: f64,
    #[serde(default = "default_match_score")]
    pub match_score: MatchScore,
    #[serde(default = "default_prior_mode")]
    pub prior_mode: PriorMode,
    /// When false the cache is never touched (no-adaptation baseline).
    #[serde(default = "default_true")]
    pub cache_updates: bool,
}

fn default_scale() -> f64 {
    1.0
}
fn default_match_score() -> MatchScore {
    MatchScore::Posterior
}
fn default_prior_mode() -> PriorMode {
    PriorMode::Adaptive
}
fn default_true() -> bool {
    true
}

impl AdaptConfig {
    pub const DEFAULT_TAU1: f64 = 0.8;
    pub const DEFAULT_TAU2: f64 = 0.8;
    pub const DEFAULT_WS: f64 = 0.2;

    pub fn new(task: TaskMode, k: usize, d: usize) -> Self {
        AdaptConfig {
            tau1: Self::DEFAULT_TAU1,
            tau2: Self::DEFAULT_TAU2,
            ws: Self::DEFAULT_WS,
            task,
            update_strategy: UpdateStrategy::Count,
            fusion_strategy: FusionStrategy::Entropy,
            k,
            d,
            similarity_scale: 1.0,
            match_score: MatchScore::Posterior,
            prior_mode: PriorMode::Adaptive,
            cache_updates: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau1 > 0.0 && self.tau1 <= 1.0) {
            return bad(format!("tau1 = {} outside (0, 1]", self.tau1));
        }
        if !self.tau2.is_finite() || self.tau2 < 0.0 {
            return bad(format!(
                "tau2 = {} must be a finite non-negative number",
                self.tau2
            ));
        }
        if !(0.0..=1.0).contains(&self.ws) {
            return bad(format!("ws = {} outside [0, 1]", self.ws));
        }
        if self.k == 0 || self.d == 0 {
            return bad("K and d must be positive".into());
        }
        if !self.similarity_scale.is_finite() || self.similarity_scale <= 0.0 {
            return bad(format!(
                "similarity scale {} must be positive",
                self.similarity_scale
            ));
        }
        match self.update_strategy {
            UpdateStrategy::Momentum { alpha } if !(0.0..1.0).contains(&alpha) => {
                bad(format!("momentum alpha = {alpha} outside [0, 1)"))
            }
            UpdateStrategy::Delayed { every: 0 } => bad("delay must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

/// Everything the engine produced for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub init_pred: ClassDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_pred: Option<ClassDist>,
    pub final_pred: ClassDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_dist: Option<Vec<f64>>,
    /// Combined similarities behind `match_dist`, kept for the similarity
    /// match score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_index: Option<usize>,
    pub absorbed: bool,
}

/// Checks `rec` against the session shape and returns it, re-normalizing
/// features that are only slightly off unit length.
pub fn validate_record(mut rec: ImageRecord, cfg: &AdaptConfig) -> Result<ImageRecord> {
    if cfg.task == TaskMode::Recognition && rec.proposals.len() != 1 {
        return Err(Error::ProposalCount {
            image_id: rec.image_id,
            count: rec.proposals.len(),
        });
    }
    for (j, p) in rec.proposals.iter_mut().enumerate() {
        if p.feature.dim() != cfg.d {
            return Err(Error::DimensionMismatch {
                what: "feature",
                expected: cfg.d,
                actual: p.feature.dim(),
            });
        }
        if p.init_pred.k() != cfg.k {
            return Err(Error::DimensionMismatch {
                what: "init_pred",
                expected: cfg.k,
                actual: p.init_pred.k(),
            });
        }
        match (cfg.task, &p.bbox) {
            (TaskMode::Detection, None) => {
                return Err(Error::MissingBox {
                    image_id: rec.image_id.clone(),
                    proposal: j,
                })
            }
            (TaskMode::Recognition, Some(_)) => {
                return Err(Error::BadBox {
                    reason: format!("image `{}` carries a box in recognition mode", rec.image_id),
                })
            }
            (_, Some(b)) => b.check()?,
            _ => {}
        }
        if let Some(b) = &p.gt_box {
            b.check()?;
        }
        let norm = p.feature.norm();
        let off = (norm - 1.0).abs();
        if !norm.is_finite() || off > RENORMALIZE_LIMIT {
            return Err(Error::NotNormalized { norm });
        }
        if off > NORM_TOLERANCE {
            let values = std::mem::replace(&mut p.feature, FeatureVec::from_raw(Vec::new()));
            p.feature = FeatureVec::normalized(values.into_inner())?;
        }
        check_simplex(p.init_pred.as_slice(), SIMPLEX_TOLERANCE)?;
        if let Some(label) = p.gt_label {
            if label >= cfg.k {
                return Err(Error::BadDistribution {
                    reason: format!("gt_label {label} outside [0, {})", cfg.k),
                });
            }
        }
    }
    Ok(rec)
}
