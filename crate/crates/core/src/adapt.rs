//! Cache adaptation: confidence gate, best-entry matching, entry creation and
//! the three refresh rules.

use crate::domain::{
    argmax, AdaptConfig, BoxScale, CacheEntry, CacheState, ClassDist, FeatureVec, MatchScore,
    PendingUpdate, PredictionTriple, PriorMode, ProposalRecord, UpdateStrategy,
};
use crate::error::{Error, Result};

/// What [`adapt`] did with a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptOutcome {
    /// Below the confidence threshold, or adaptation disabled.
    Skipped,
    Created(usize),
    Updated(usize),
}

impl AdaptOutcome {
    pub fn absorbed(self) -> bool {
        !matches!(self, AdaptOutcome::Skipped)
    }
}

/// `max_k p_final[k] ≥ tau1`.
pub fn confidence_filter(final_pred: &ClassDist, tau1: f64) -> bool {
    final_pred.max() >= tau1
}

/// Argmax of the matching distribution, lowest index on ties.
pub fn best_match(match_dist: &[f64]) -> Result<(usize, f64)> {
    if match_dist.is_empty() {
        return Err(Error::EmptyCache);
    }
    Ok(argmax(match_dist))
}

fn initial_prior(final_pred: &ClassDist, mode: PriorMode) -> ClassDist {
    match mode {
        PriorMode::Adaptive => final_pred.clone(),
        PriorMode::FrozenOneHot => ClassDist::one_hot(final_pred.k(), final_pred.argmax()),
    }
}

/// Appends an entry built from the proposal. Returns its index.
pub fn create_entry(
    cache: &mut CacheState,
    proposal: &ProposalRecord,
    final_pred: &ClassDist,
    prior_mode: PriorMode,
) -> usize {
    cache.entries.push(CacheEntry {
        prototype: proposal.feature.clone(),
        scale: proposal.bbox.map(|b| b.scale()),
        prior: initial_prior(final_pred, prior_mode),
        count: 1,
        pending: None,
    });
    cache.created_total += 1;
    cache.entries.len() - 1
}

fn blend(old: &[f64], new: &[f64], w_old: f64, w_new: f64) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(o, n)| w_old * o + w_new * n)
        .collect()
}

fn unit(values: Vec<f64>, fallback: &FeatureVec) -> FeatureVec {
    // A running mean of unit vectors is zero only when the inputs cancel exactly.
    FeatureVec::normalized(values).unwrap_or_else(|_| fallback.clone())
}

fn renormalize_simplex(mut p: Vec<f64>) -> Vec<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        p.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Refreshes entry `m` with a matched proposal and bumps its counter by one.
pub fn update_entry(
    cache: &mut CacheState,
    m: usize,
    proposal: &ProposalRecord,
    final_pred: &ClassDist,
    strategy: UpdateStrategy,
    prior_mode: PriorMode,
) -> Result<()> {
    let len = cache.entries.len();
    let entry = cache
        .entries
        .get_mut(m)
        .ok_or(Error::IndexOutOfRange { index: m, len })?;
    let new_scale = proposal.bbox.map(|b| b.scale());
    let adapt_prior = prior_mode == PriorMode::Adaptive;

    match strategy {
        UpdateStrategy::Count => {
            let c = entry.count as f64;
            let (w_old, w_new) = (c / (c + 1.0), 1.0 / (c + 1.0));
            apply_weighted(
                entry,
                proposal.feature.as_slice(),
                new_scale,
                final_pred.as_slice(),
                w_old,
                w_new,
                adapt_prior,
            );
            entry.count += 1;
        }
        UpdateStrategy::Momentum { alpha } => {
            apply_weighted(
                entry,
                proposal.feature.as_slice(),
                new_scale,
                final_pred.as_slice(),
                alpha,
                1.0 - alpha,
                adapt_prior,
            );
            if adapt_prior {
                let v = std::mem::replace(&mut entry.prior, ClassDist::from_raw(Vec::new()));
                entry.prior = ClassDist::from_raw(renormalize_simplex(v.into_inner()));
            }
            entry.count += 1;
        }
        UpdateStrategy::Delayed { every } => {
            entry.count += 1;
            let pending = entry.pending.get_or_insert_with(|| PendingUpdate {
                count: 0,
                feature_sum: vec![0.0; proposal.feature.dim()],
                scale_sum: new_scale.map(|_| [0.0, 0.0]),
                prior_sum: vec![0.0; final_pred.k()],
            });
            pending.count += 1;
            add_into(&mut pending.feature_sum, proposal.feature.as_slice());
            add_into(&mut pending.prior_sum, final_pred.as_slice());
            if let (Some(sum), Some(s)) = (pending.scale_sum.as_mut(), new_scale) {
                sum[0] += s.w;
                sum[1] += s.h;
            }
            // Refresh on the every-th, 2·every-th, ... match of this entry.
            let matches = entry.count - 1;
            if matches % every == 0 {
                let pending = entry.pending.take().expect("pending set above");
                let c = entry.count as f64;
                let n = pending.count as f64;
                let w_old = (c - n) / c;
                let w_new = 1.0 / c;
                let f = blend(
                    entry.prototype.as_slice(),
                    &pending.feature_sum,
                    w_old,
                    w_new,
                );
                entry.prototype = unit(f, &entry.prototype);
                if let (Some(old), Some(sum)) = (entry.scale, pending.scale_sum) {
                    entry.scale = Some(BoxScale {
                        w: w_old * old.w + w_new * sum[0],
                        h: w_old * old.h + w_new * sum[1],
                    });
                }
                if adapt_prior {
                    let v = blend(entry.prior.as_slice(), &pending.prior_sum, w_old, w_new);
                    entry.prior = ClassDist::from_raw(v);
                }
            }
        }
    }
    cache.updated_total += 1;
    Ok(())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn apply_weighted(
    entry: &mut CacheEntry,
    feature: &[f64],
    scale: Option<BoxScale>,
    prior: &[f64],
    w_old: f64,
    w_new: f64,
    adapt_prior: bool,
) {
    let f = blend(entry.prototype.as_slice(), feature, w_old, w_new);
    entry.prototype = unit(f, &entry.prototype);
    if let (Some(old), Some(new)) = (entry.scale, scale) {
        entry.scale = Some(BoxScale {
            w: w_old * old.w + w_new * new.w,
            h: w_old * old.h + w_new * new.h,
        });
    }
    if adapt_prior {
        entry.prior = ClassDist::from_raw(blend(entry.prior.as_slice(), prior, w_old, w_new));
    }
}

/// Folds one predicted proposal into the cache.
///
/// The match decision uses the matching distribution computed at prediction
/// time (`triple.match_dist`); a proposal predicted against an empty cache
/// always creates an entry.
pub fn adapt(
    cache: &mut CacheState,
    proposal: &ProposalRecord,
    triple: &PredictionTriple,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    if !cfg.cache_updates || !confidence_filter(&triple.final_pred, cfg.tau1) {
        return Ok(AdaptOutcome::Skipped);
    }
    let matched = match (&triple.match_dist, cache.is_empty()) {
        (Some(dist), false) => {
            let (m, prob) = best_match(dist)?;
            let score = match cfg.match_score {
                MatchScore::Posterior => prob,
                MatchScore::Similarity => triple
                    .similarities
                    .as_ref()
                    .and_then(|s| s.get(m).copied())
                    .ok_or_else(|| {
                        Error::Config("similarity match score needs similarities".into())
                    })?,
            };
            (score >= cfg.tau2).then_some(m)
        }
        _ => None,
    };
    match matched {
        Some(m) => {
            update_entry(
                cache,
                m,
                proposal,
                &triple.final_pred,
                cfg.update_strategy,
                cfg.prior_mode,
            )?;
            Ok(AdaptOutcome::Updated(m))
        }
        None => Ok(AdaptOutcome::Created(create_entry(
            cache,
            proposal,
            &triple.final_pred,
            cfg.prior_mode,
        ))),
    }
}
