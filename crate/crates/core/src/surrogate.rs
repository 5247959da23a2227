//! Synthetic stand-in for the vision-language model.
//!
//! A [`PrototypeBank`] plays the role of the text embeddings. The two
//! initial-prediction forms are the recognition one, `softmax_k(s·cos(f, t_k))`,
//! and the detection one, `softmax_k(s·σ(cos(f, t_k)))`, where `s` is the bank's
//! logit scale (1 gives the bare forms). [`generate_stream`] draws a
//! class-shifted stream of records from the bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    check_simplex, BoundingBox, BoxScale, ClassDist, FeatureVec, ImageRecord, ProposalRecord,
    TaskMode,
};
use crate::engine::softmax;
use crate::error::{Error, Result};

/// Largest pairwise cosine allowed between sampled text embeddings.
pub const MAX_PAIRWISE_COSINE: f64 = 0.5;
const MAX_REJECTIONS: usize = 100_000;

/// Surrogate text embeddings, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub text_embeds: Vec<FeatureVec>,
    /// Canonical per-class box scale used by the detection generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scales: Option<Vec<BoxScale>>,
    /// Multiplier on the class scores before the softmax.
    #[serde(default = "unit_scale")]
    pub logit_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl PrototypeBank {
    pub fn new(text_embeds: Vec<FeatureVec>) -> Result<Self> {
        let bank = PrototypeBank {
            text_embeds,
            class_scales: None,
            logit_scale: 1.0,
        };
        bank.check()?;
        Ok(bank)
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Self {
        self.logit_scale = scale;
        self
    }

    /// Samples `k` unit vectors in `d` dimensions with pairwise cosine at most
    /// [`MAX_PAIRWISE_COSINE`]; in detection mode also a canonical box scale
    /// per class.
    pub fn sample(k: usize, d: usize, task: TaskMode, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config("K and d must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embeds: Vec<FeatureVec> = Vec::with_capacity(k);
        let mut rejections = 0;
        while embeds.len() < k {
            let candidate = random_unit(&mut rng, d);
            if embeds
                .iter()
                .all(|e| e.dot(&candidate) <= MAX_PAIRWISE_COSINE)
            {
                embeds.push(candidate);
            } else {
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(Error::Config(format!(
                        "cannot place {k} separated prototypes in {d} dimensions"
                    )));
                }
            }
        }
        let class_scales = task.is_detection().then(|| {
            (0..k)
                .map(|_| BoxScale {
                    w: rng.random_range(0.08..0.6),
                    h: rng.random_range(0.08..0.6),
                })
                .collect()
        });
        Ok(PrototypeBank {
            text_embeds: embeds,
            class_scales,
            logit_scale: 1.0,
        })
    }

    pub fn k(&self) -> usize {
        self.text_embeds.len()
    }

    pub fn d(&self) -> usize {
        self.text_embeds.first().map_or(0, FeatureVec::dim)
    }

    pub fn check(&self) -> Result<()> {
        if self.text_embeds.is_empty() {
            return Err(Error::Config("prototype bank is empty".into()));
        }
        let d = self.d();
        for e in &self.text_embeds {
            if e.dim() != d {
                return Err(Error::DimensionMismatch {
                    what: "text embedding",
                    expected: d,
                    actual: e.dim(),
                });
            }
            FeatureVec::new(e.as_slice().to_vec())?;
        }
        if let Some(scales) = &self.class_scales {
            if scales.len() != self.k() {
                return Err(Error::KMismatch {
                    expected: self.k(),
                    actual: scales.len(),
                });
            }
        }
        if !self.logit_scale.is_finite() || self.logit_scale <= 0.0 {
            return Err(Error::Config(format!(
                "logit scale {} must be positive",
                self.logit_scale
            )));
        }
        Ok(())
    }

    fn cosines(&self, feature: &FeatureVec) -> Result<Vec<f64>> {
        if feature.dim() != self.d() {
            return Err(Error::DimensionMismatch {
                what: "feature",
                expected: self.d(),
                actual: feature.dim(),
            });
        }
        Ok(self.text_embeds.iter().map(|t| t.dot(feature)).collect())
    }
}

fn random_unit(rng: &mut impl Rng, d: usize) -> FeatureVec {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(f) = FeatureVec::normalized(v) {
            return f;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Recognition-style initial prediction: softmax over scaled cosines.
pub fn clip_init_pred(feature: &FeatureVec, bank: &PrototypeBank) -> Result<ClassDist> {
    let scores: Vec<f64> = bank
        .cosines(feature)?
        .into_iter()
        .map(|c| bank.logit_scale * c)
        .collect();
    Ok(ClassDist::from_raw(softmax(&scores)))
}

/// Detection-style initial prediction: softmax over scaled sigmoids of the cosines.
pub fn gdino_init_pred(feature: &FeatureVec, bank: &PrototypeBank) -> Result<ClassDist> {
    let scores: Vec<f64> = bank
        .cosines(feature)?
        .into_iter()
        .map(|c| bank.logit_scale * sigmoid(c))
        .collect();
    Ok(ClassDist::from_raw(softmax(&scores)))
}

/// Distribution shift applied by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Test-time class frequencies.
    pub prior_skew: Vec<f64>,
    /// Angle in radians between each class's test-time mean and its text embedding.
    pub prototype_drift: f64,
    /// Per-coordinate standard deviation of the feature noise.
    pub noise_sigma: f64,
    /// Standard deviation of the log-normal jitter on box width and height.
    #[serde(default)]
    pub scale_jitter: f64,
    /// Detection: fraction of proposals that are background clutter.
    #[serde(default)]
    pub background_rate: f64,
    pub seed: u64,
}

impl ShiftSpec {
    /// Puts `mass` uniformly on the first `heavy` classes and spreads the rest
    /// uniformly over the remaining ones.
    pub fn concentrated_skew(k: usize, heavy: usize, mass: f64) -> Vec<f64> {
        assert!(heavy >= 1 && heavy <= k);
        if heavy == k {
            return vec![1.0 / k as f64; k];
        }
        let light = (1.0 - mass) / (k - heavy) as f64;
        (0..k)
            .map(|c| {
                if c < heavy {
                    mass / heavy as f64
                } else {
                    light
                }
            })
            .collect()
    }

    pub fn check(&self, k: usize) -> Result<()> {
        if self.prior_skew.len() != k {
            return Err(Error::BadShiftSpec(format!(
                "prior_skew has {} classes, bank has {k}",
                self.prior_skew.len()
            )));
        }
        check_simplex(&self.prior_skew, 1e-9).map_err(|e| Error::BadShiftSpec(e.to_string()))?;
        for (name, v) in [
            ("prototype_drift", self.prototype_drift),
            ("noise_sigma", self.noise_sigma),
            ("scale_jitter", self.scale_jitter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadShiftSpec(format!("{name} = {v} must be ≥ 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return Err(Error::BadShiftSpec(format!(
                "background_rate = {} outside [0, 1]",
                self.background_rate
            )));
        }
        Ok(())
    }
}

/// Relative standard deviation of the proposal box around its ground truth.
const LOCALIZATION_NOISE: f64 = 0.05;

/// Rotates `t` by `angle` inside the plane spanned by `t` and a random
/// direction orthogonal to it.
fn drift(t: &FeatureVec, angle: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = t.dim();
    if angle == 0.0 || d < 2 {
        return t.as_slice().to_vec();
    }
    let u = loop {
        let r = random_unit(rng, d);
        let proj = r.dot(t);
        let ortho: Vec<f64> = r
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| a - proj * b)
            .collect();
        if let Ok(u) = FeatureVec::normalized(ortho) {
            break u;
        }
    };
    t.as_slice()
        .iter()
        .zip(u.as_slice())
        .map(|(a, b)| angle.cos() * a + angle.sin() * b)
        .collect()
}

fn noisy_feature(mean: &[f64], sigma: f64, rng: &mut impl Rng) -> FeatureVec {
    loop {
        let v: Vec<f64> = mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(f) = FeatureVec::normalized(v) {
            return f;
        }
    }
}

fn jitter(base: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (base * (sigma * z).exp()).clamp(0.02, 1.0)
}

fn object_box(scale: BoxScale, jitter_sigma: f64, rng: &mut impl Rng) -> BoundingBox {
    let w = jitter(scale.w, jitter_sigma, rng);
    let h = jitter(scale.h, jitter_sigma, rng);
    BoundingBox {
        x: rng.random_range(w / 2.0..=1.0 - w / 2.0),
        y: rng.random_range(h / 2.0..=1.0 - h / 2.0),
        w,
        h,
    }
}

fn localize(gt: &BoundingBox, rng: &mut impl Rng) -> BoundingBox {
    let w = jitter(gt.w, LOCALIZATION_NOISE, rng);
    let h = jitter(gt.h, LOCALIZATION_NOISE, rng);
    let dx: f64 = rng.sample::<f64, _>(StandardNormal) * LOCALIZATION_NOISE * gt.w;
    let dy: f64 = rng.sample::<f64, _>(StandardNormal) * LOCALIZATION_NOISE * gt.h;
    BoundingBox {
        x: (gt.x + dx).clamp(w / 2.0, 1.0 - w / 2.0),
        y: (gt.y + dy).clamp(h / 2.0, 1.0 - h / 2.0),
        w,
        h,
    }
}

/// Draws an ordered, labelled stream from the bank under `shift`.
///
/// Each object's label follows `prior_skew`; its feature is the class text
/// embedding rotated by `prototype_drift` (one fixed direction per class) plus
/// isotropic noise, re-normalized. Detection images carry
/// `proposals_per_image` proposals, a `background_rate` fraction of which are
/// unlabelled clutter with random features and boxes.
pub fn generate_stream(
    bank: &PrototypeBank,
    shift: &ShiftSpec,
    n_images: usize,
    proposals_per_image: usize,
    task: TaskMode,
) -> Result<Vec<ImageRecord>> {
    bank.check()?;
    shift.check(bank.k())?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    if task == TaskMode::Recognition && proposals_per_image != 1 {
        return Err(Error::Config(
            "recognition streams carry exactly one proposal per image".into(),
        ));
    }
    let scales = match (task, &bank.class_scales) {
        (TaskMode::Detection, Some(s)) => Some(s),
        (TaskMode::Detection, None) => {
            return Err(Error::Config("detection needs per-class box scales".into()))
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let means: Vec<Vec<f64>> = bank
        .text_embeds
        .iter()
        .map(|t| drift(t, shift.prototype_drift, &mut rng))
        .collect();
    let labels =
        WeightedIndex::new(&shift.prior_skew).map_err(|e| Error::BadShiftSpec(e.to_string()))?;
    let init_pred = |f: &FeatureVec| match task {
        TaskMode::Recognition => clip_init_pred(f, bank),
        TaskMode::Detection => gdino_init_pred(f, bank),
    };

    let width = n_images.to_string().len();
    let mut stream = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut proposals = Vec::with_capacity(proposals_per_image);
        for _ in 0..proposals_per_image {
            let background = task.is_detection() && rng.random_bool(shift.background_rate);
            if background {
                let feature = random_unit(&mut rng, bank.d());
                let w = rng.random_range(0.05..0.5);
                let h = rng.random_range(0.05..0.5);
                let bbox = BoundingBox {
                    x: rng.random_range(w / 2.0..=1.0 - w / 2.0),
                    y: rng.random_range(h / 2.0..=1.0 - h / 2.0),
                    w,
                    h,
                };
                proposals.push(ProposalRecord {
                    init_pred: init_pred(&feature)?,
                    feature,
                    bbox: Some(bbox),
                    gt_label: None,
                    gt_box: None,
                });
                continue;
            }
            let label = labels.sample(&mut rng);
            let feature = noisy_feature(&means[label], shift.noise_sigma, &mut rng);
            let (bbox, gt_box) = match scales {
                Some(s) => {
                    let gt = object_box(s[label], shift.scale_jitter, &mut rng);
                    (Some(localize(&gt, &mut rng)), Some(gt))
                }
                None => (None, None),
            };
            proposals.push(ProposalRecord {
                init_pred: init_pred(&feature)?,
                feature,
                bbox,
                gt_label: Some(label),
                gt_box,
            });
        }
        stream.push(ImageRecord {
            image_id: format!("img{:0width$}", i, width = width),
            proposals,
        });
    }
    Ok(stream)
}

/// Everything needed to regenerate a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub task: TaskMode,
    pub k: usize,
    pub d: usize,
    pub n_images: usize,
    #[serde(default = "one")]
    pub proposals_per_image: usize,
    /// Seed for sampling the bank when `bank` is absent.
    #[serde(default)]
    pub bank_seed: u64,
    #[serde(default = "unit_scale")]
    pub logit_scale: f64,
    /// Explicit bank; overrides `bank_seed` and `logit_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<PrototypeBank>,
    pub shift: ShiftSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

fn one() -> usize {
    1
}

impl SimulationConfig {
    pub fn bank(&self) -> Result<PrototypeBank> {
        let bank = match &self.bank {
            Some(b) => b.clone(),
            None => PrototypeBank::sample(self.k, self.d, self.task, self.bank_seed)?
                .with_logit_scale(self.logit_scale),
        };
        bank.check()?;
        if bank.k() != self.k || bank.d() != self.d {
            return Err(Error::Config(format!(
                "bank is {}×{}, config declares K = {}, d = {}",
                bank.k(),
                bank.d(),
                self.k,
                self.d
            )));
        }
        Ok(bank)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.k).map(|c| format!("class{c}")).collect())
    }

    pub fn generate(&self) -> Result<Vec<ImageRecord>> {
        generate_stream(
            &self.bank()?,
            &self.shift,
            self.n_images,
            self.proposals_per_image,
            self.task,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_bank() -> PrototypeBank {
        PrototypeBank::new(vec![
            FeatureVec::new(vec![1.0, 0.0]).unwrap(),
            FeatureVec::new(vec![0.0, 1.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn clip_form_hand_values() {
        let f = FeatureVec::new(vec![1.0, 0.0]).unwrap();
        let p = clip_init_pred(&f, &axis_bank()).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.as_slice()[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[0], 0.73106, epsilon = 5e-6);
        assert_abs_diff_eq!(p.as_slice()[1], 0.26894, epsilon = 5e-6);

        let mid = FeatureVec::normalized(vec![1.0, 1.0]).unwrap();
        let p = clip_init_pred(&mid, &axis_bank()).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.5, epsilon = 1e-15);

        let single = PrototypeBank::new(vec![FeatureVec::new(vec![1.0, 0.0]).unwrap()]).unwrap();
        assert_eq!(clip_init_pred(&f, &single).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn gdino_form_hand_values() {
        let f = FeatureVec::new(vec![1.0, 0.0]).unwrap();
        let p = gdino_init_pred(&f, &axis_bank()).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.55751, epsilon = 5e-6);
        assert_abs_diff_eq!(p.as_slice()[1], 0.44249, epsilon = 5e-6);
        let mid = FeatureVec::normalized(vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            gdino_init_pred(&mid, &axis_bank()).unwrap().as_slice()[1],
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch() {
        let f = FeatureVec::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            clip_init_pred(&f, &axis_bank()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(gdino_init_pred(&f, &axis_bank()).is_err());
    }

    #[test]
    fn sampled_bank_is_separated() {
        let bank = PrototypeBank::sample(20, 32, TaskMode::Detection, 7).unwrap();
        assert_eq!((bank.k(), bank.d()), (20, 32));
        for (i, a) in bank.text_embeds.iter().enumerate() {
            assert_abs_diff_eq!(a.norm(), 1.0, epsilon = 1e-12);
            for b in &bank.text_embeds[i + 1..] {
                assert!(a.dot(b) <= MAX_PAIRWISE_COSINE);
            }
        }
        assert_eq!(bank.class_scales.as_ref().unwrap().len(), 20);
    }

    fn shift(k: usize, seed: u64) -> ShiftSpec {
        ShiftSpec {
            prior_skew: vec![1.0 / k as f64; k],
            prototype_drift: 0.0,
            noise_sigma: 0.0,
            scale_jitter: 0.0,
            background_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_shift_stream_is_perfectly_classified() {
        let bank = PrototypeBank::sample(6, 8, TaskMode::Recognition, 1).unwrap();
        let stream = generate_stream(&bank, &shift(6, 3), 200, 1, TaskMode::Recognition).unwrap();
        for rec in &stream {
            let p = &rec.proposals[0];
            let label = p.gt_label.unwrap();
            for (a, b) in p
                .feature
                .as_slice()
                .iter()
                .zip(bank.text_embeds[label].as_slice())
            {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            assert_eq!(p.init_pred.argmax(), label);
        }
    }

    #[test]
    fn one_hot_skew_forces_labels() {
        let bank = PrototypeBank::sample(4, 8, TaskMode::Recognition, 1).unwrap();
        let mut s = shift(4, 5);
        s.prior_skew = vec![1.0, 0.0, 0.0, 0.0];
        s.noise_sigma = 0.3;
        let stream = generate_stream(&bank, &s, 100, 1, TaskMode::Recognition).unwrap();
        assert!(stream.iter().all(|r| r.proposals[0].gt_label == Some(0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let bank = PrototypeBank::sample(5, 8, TaskMode::Detection, 2).unwrap();
        let mut s = shift(5, 11);
        s.noise_sigma = 0.2;
        s.prototype_drift = 0.4;
        s.scale_jitter = 0.2;
        s.background_rate = 0.3;
        let a = generate_stream(&bank, &s, 30, 4, TaskMode::Detection).unwrap();
        let b = generate_stream(&bank, &s, 30, 4, TaskMode::Detection).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for rec in &a {
            for p in &rec.proposals {
                p.bbox.unwrap().check().unwrap();
                if let Some(gt) = p.gt_box {
                    gt.check().unwrap();
                }
            }
        }
    }

    #[test]
    fn bad_shift_specs_are_rejected() {
        let bank = PrototypeBank::sample(3, 4, TaskMode::Recognition, 0).unwrap();
        let mut s = shift(3, 0);
        s.prior_skew = vec![0.5, 0.4, 0.4];
        assert!(matches!(
            generate_stream(&bank, &s, 5, 1, TaskMode::Recognition),
            Err(Error::BadShiftSpec(_))
        ));
        let mut s = shift(3, 0);
        s.prior_skew = vec![0.5, 0.5];
        assert!(matches!(
            generate_stream(&bank, &s, 5, 1, TaskMode::Recognition),
            Err(Error::BadShiftSpec(_))
        ));
    }

    #[test]
    fn concentrated_skew_sums_to_one() {
        let p = ShiftSpec::concentrated_skew(20, 4, 0.8);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p[19], 0.0125, epsilon = 1e-15);
    }
}
