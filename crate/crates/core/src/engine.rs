//! Cache-based posterior in matrix form.
//!
//! For a proposal `x` and cache entries `μ_1..μ_M`:
//!
//! * `S_F = F_cacheᵀ f` (cosine similarity, prototypes are unit length),
//! * `S_B = 1 − ‖[w, h] − B_cache‖₂ / √2` in detection mode,
//! * `P(U|x) = softmax(s · S)` with `S = S_F` (recognition) or
//!   `S = w_s S_B + (1 − w_s) S_F` (detection) and `s` the similarity scale,
//! * `p_cache = V_cache P(U|x)`.
//!
//! [`CacheMatrices`] packs the cache once so the prediction loop of an image
//! can reuse it for every proposal.

use nalgebra::{DMatrix, DVector};

use crate::domain::{
    AdaptConfig, BoundingBox, CacheState, ClassDist, FeatureVec, FusionStrategy, ProposalRecord,
    TaskMode,
};
use crate::error::{Error, Result};

/// Column-packed view of a cache: one column per entry.
#[derive(Debug, Clone)]
pub struct CacheMatrices {
    /// `d × M` prototypes.
    pub features: DMatrix<f64>,
    /// `2 × M` mean `[w, h]`, present when every entry carries a scale.
    pub scales: Option<DMatrix<f64>>,
    /// `K × M` priors.
    pub priors: DMatrix<f64>,
}

impl CacheMatrices {
    pub fn from_cache(cache: &CacheState) -> Result<Self> {
        let first = cache.entries.first().ok_or(Error::EmptyCache)?;
        let (d, k, m) = (first.prototype.dim(), first.prior.k(), cache.len());
        let mut features = DMatrix::zeros(d, m);
        let mut priors = DMatrix::zeros(k, m);
        let with_scale = cache.entries.iter().all(|e| e.scale.is_some());
        let mut scales = with_scale.then(|| DMatrix::zeros(2, m));
        for (col, e) in cache.entries.iter().enumerate() {
            if e.prototype.dim() != d {
                return Err(Error::DimensionMismatch {
                    what: "cache prototype",
                    expected: d,
                    actual: e.prototype.dim(),
                });
            }
            if e.prior.k() != k {
                return Err(Error::KMismatch {
                    expected: k,
                    actual: e.prior.k(),
                });
            }
            features
                .column_mut(col)
                .copy_from_slice(e.prototype.as_slice());
            priors.column_mut(col).copy_from_slice(e.prior.as_slice());
            if let (Some(s), Some(sc)) = (scales.as_mut(), e.scale) {
                s[(0, col)] = sc.w;
                s[(1, col)] = sc.h;
            }
        }
        Ok(CacheMatrices {
            features,
            scales,
            priors,
        })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_similarity(&self, feature: &FeatureVec) -> Result<DVector<f64>> {
        if feature.dim() != self.features.nrows() {
            return Err(Error::DimensionMismatch {
                what: "feature",
                expected: self.features.nrows(),
                actual: feature.dim(),
            });
        }
        let f = DVector::from_column_slice(feature.as_slice());
        Ok(self.features.tr_mul(&f))
    }

    pub fn scale_similarity(&self, bbox: &BoundingBox) -> Result<DVector<f64>> {
        let scales = self
            .scales
            .as_ref()
            .ok_or(Error::MissingScale { index: 0 })?;
        let query = DVector::from_column_slice(&[bbox.w, bbox.h]);
        let sims = scales
            .column_iter()
            .map(|col| 1.0 - (col - &query).norm() / std::f64::consts::SQRT_2);
        Ok(DVector::from_iterator(scales.ncols(), sims))
    }

    /// The similarity vector fed into the matching softmax, before scaling.
    pub fn combined_similarity(
        &self,
        proposal: &ProposalRecord,
        cfg: &AdaptConfig,
    ) -> Result<DVector<f64>> {
        let sf = self.feature_similarity(&proposal.feature)?;
        match cfg.task {
            TaskMode::Recognition => Ok(sf),
            TaskMode::Detection => {
                let bbox = proposal.bbox.as_ref().ok_or_else(|| Error::MissingBox {
                    image_id: String::new(),
                    proposal: 0,
                })?;
                let sb = self.scale_similarity(bbox)?;
                Ok(sb * cfg.ws + sf * (1.0 - cfg.ws))
            }
        }
    }

    pub fn match_distribution(
        &self,
        proposal: &ProposalRecord,
        cfg: &AdaptConfig,
    ) -> Result<DVector<f64>> {
        let s = self.combined_similarity(proposal, cfg)?;
        Ok(softmax_vec(&(s * cfg.similarity_scale)))
    }

    pub fn posterior(&self, match_dist: &DVector<f64>) -> Result<ClassDist> {
        if match_dist.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "match distribution",
                expected: self.len(),
                actual: match_dist.len(),
            });
        }
        let p = &self.priors * match_dist;
        Ok(ClassDist::from_raw(p.as_slice().to_vec()))
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    softmax_vec(&DVector::from_column_slice(scores))
        .as_slice()
        .to_vec()
}

fn softmax_vec(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.max();
    let exp = scores.map(|s| (s - max).exp());
    let z = exp.sum();
    exp / z
}

/// `S_F[m] = cos(feature, prototype_m)`.
pub fn feature_similarity(feature: &FeatureVec, cache: &CacheState) -> Result<Vec<f64>> {
    let view = CacheMatrices::from_cache(cache)?;
    Ok(view.feature_similarity(feature)?.as_slice().to_vec())
}

/// `S_B[m] = 1 − ‖[w, h] − scale_m‖₂ / √2`.
pub fn scale_similarity(bbox: &BoundingBox, cache: &CacheState) -> Result<Vec<f64>> {
    if let Some(index) = cache.entries.iter().position(|e| e.scale.is_none()) {
        return Err(Error::MissingScale { index });
    }
    let view = CacheMatrices::from_cache(cache)?;
    Ok(view.scale_similarity(bbox)?.as_slice().to_vec())
}

/// `P(U|x)`, the matching distribution over cache entries.
pub fn match_distribution(
    proposal: &ProposalRecord,
    cache: &CacheState,
    cfg: &AdaptConfig,
) -> Result<Vec<f64>> {
    let view = CacheMatrices::from_cache(cache)?;
    Ok(view.match_distribution(proposal, cfg)?.as_slice().to_vec())
}

/// `p_cache = Σ_m P(U|x)[m] · v_m`.
pub fn cache_posterior(match_dist: &[f64], cache: &CacheState) -> Result<ClassDist> {
    let view = CacheMatrices::from_cache(cache)?;
    view.posterior(&DVector::from_column_slice(match_dist))
}

/// Combines the initial and cache predictions.
pub fn fuse(init: &ClassDist, cache: &ClassDist, strategy: FusionStrategy) -> Result<ClassDist> {
    if init.k() != cache.k() {
        return Err(Error::KMismatch {
            expected: init.k(),
            actual: cache.k(),
        });
    }
    let combined = match strategy {
        FusionStrategy::InitOnly => return Ok(init.clone()),
        FusionStrategy::CacheOnly => return Ok(cache.clone()),
        FusionStrategy::Average => init
            .as_slice()
            .iter()
            .zip(cache.as_slice())
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
        FusionStrategy::Entropy => {
            let wi = (-init.entropy()).exp();
            let wc = (-cache.entropy()).exp();
            let z = wi + wc;
            init.as_slice()
                .iter()
                .zip(cache.as_slice())
                .map(|(a, b)| (wi * a + wc * b) / z)
                .collect()
        }
    };
    Ok(ClassDist::from_raw(combined))
}
