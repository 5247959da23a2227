//! Online test-time adaptation of vision-language predictions with a
//! Bayesian prototype cache.
//!
//! Each proposal is scored against a cache of class prototypes, box scales and
//! soft class priors. The resulting cache posterior is fused with the model's
//! own prediction by entropy weighting, and confident proposals are folded back
//! into the cache.

pub mod adapt;
pub mod domain;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod surrogate;

pub use adapt::{adapt, AdaptOutcome};
pub use domain::{
    AdaptConfig, BoundingBox, BoxScale, CacheEntry, CacheState, ClassDist, FeatureVec,
    FusionStrategy, ImageRecord, MatchScore, PredictionTriple, PriorMode, ProposalRecord, TaskMode,
    UpdateStrategy,
};
pub use error::{Error, Result};
pub use pipeline::{run_session, run_variant_suite, Session, SessionResult, Variant};
