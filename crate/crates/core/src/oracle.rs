//! Reference evaluation of the cache posterior by the total-probability sum,
//! written with scalar loops and no shared code with [`crate::engine`].
//!
//! `P(Y|x) = Σ_m P(x|μ_m) P(μ_m) / Σ_j P(x|μ_j) P(μ_j) · P(Y|μ_m)` with a
//! uniform `P(μ_m) = 1/M` and `P(x|μ_m) ∝ exp(s · S_m)`.

use crate::domain::{AdaptConfig, CacheState, ClassDist, ProposalRecord, TaskMode};
use crate::error::{Error, Result};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn likelihood(
    proposal: &ProposalRecord,
    cache: &CacheState,
    m: usize,
    cfg: &AdaptConfig,
) -> Result<f64> {
    let entry = &cache.entries[m];
    let feature_sim = cosine(proposal.feature.as_slice(), entry.prototype.as_slice());
    let sim = match cfg.task {
        TaskMode::Recognition => feature_sim,
        TaskMode::Detection => {
            let bbox = proposal.bbox.ok_or(Error::MissingBox {
                image_id: String::new(),
                proposal: 0,
            })?;
            let scale = entry.scale.ok_or(Error::MissingScale { index: m })?;
            let dw = bbox.w - scale.w;
            let dh = bbox.h - scale.h;
            let box_sim = 1.0 - (dw * dw + dh * dh).sqrt() / 2f64.sqrt();
            cfg.ws * box_sim + (1.0 - cfg.ws) * feature_sim
        }
    };
    Ok((cfg.similarity_scale * sim).exp())
}

/// Cache posterior by direct summation.
pub fn oracle_posterior(
    proposal: &ProposalRecord,
    cache: &CacheState,
    cfg: &AdaptConfig,
) -> Result<ClassDist> {
    let m_total = cache.entries.len();
    if m_total == 0 {
        return Err(Error::EmptyCache);
    }
    let prior_mu = 1.0 / m_total as f64;
    let mut likelihoods = Vec::with_capacity(m_total);
    for m in 0..m_total {
        likelihoods.push(likelihood(proposal, cache, m, cfg)?);
    }
    let mut evidence = 0.0;
    for l in &likelihoods {
        evidence += l * prior_mu;
    }
    let k = cache.entries[0].prior.k();
    let mut out = vec![0.0; k];
    for (l, entry) in likelihoods.iter().zip(&cache.entries) {
        let responsibility = l * prior_mu / evidence;
        let prior = entry.prior.as_slice();
        for y in 0..k {
            out[y] += responsibility * prior[y];
        }
    }
    Ok(ClassDist::from_raw(out))
}
