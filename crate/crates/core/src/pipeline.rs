//! Online loop over an ordered stream of images.
//!
//! Per image: predict every proposal against the cache as it stood before the
//! image, then fold the confident proposals into the cache in proposal order.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::adapt;
use crate::domain::{
    validate_record, AdaptConfig, BoundingBox, CacheState, ClassDist, FusionStrategy, ImageRecord,
    PredictionTriple, PriorMode, UpdateStrategy,
};
use crate::engine::{fuse, CacheMatrices};
use crate::error::{Error, Result};

/// Fraction of the stream scored with the initial prediction in the
/// cache-only protocol.
pub const CACHE_ONLY_WARMUP: f64 = 0.15;

/// Which distribution evaluation scores once the warm-up is over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Final,
    /// The cache posterior, falling back to the initial prediction while the
    /// cache is empty.
    Cache,
    /// Arithmetic mean of the initial and cache predictions.
    Average,
}

/// One proposal's output together with the record fields evaluation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
    #[serde(flatten)]
    pub triple: PredictionTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub proposals: Vec<ScoredProposal>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub images: usize,
    pub proposals: usize,
    pub absorbed: usize,
    pub wall_ms: f64,
}

/// Output of one pass over a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub config: AdaptConfig,
    pub images: Vec<ImageResult>,
    pub cache: CacheState,
    /// `M` after each image.
    pub cache_trace: Vec<usize>,
    /// Images before this index are scored by their initial prediction.
    #[serde(default)]
    pub warmup_images: usize,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub stats: RunStats,
}

impl SessionResult {
    /// The distribution evaluation should score for proposal `j` of image `i`.
    pub fn scored_pred(&self, image: usize, proposal: usize) -> Cow<'_, ClassDist> {
        let t = &self.images[image].proposals[proposal].triple;
        if image < self.warmup_images {
            return Cow::Borrowed(&t.init_pred);
        }
        match (self.readout, &t.cache_pred) {
            (Readout::Final, _) => Cow::Borrowed(&t.final_pred),
            (_, None) => Cow::Borrowed(&t.init_pred),
            (Readout::Cache, Some(c)) => Cow::Borrowed(c),
            (Readout::Average, Some(c)) => Cow::Owned(
                fuse(&t.init_pred, c, FusionStrategy::Average).expect("triple classes agree"),
            ),
        }
    }

    /// Same outputs, ignoring wall-clock statistics.
    pub fn same_outputs(&self, other: &SessionResult) -> bool {
        self.config == other.config
            && self.images == other.images
            && self.cache == other.cache
            && self.cache_trace == other.cache_trace
            && self.warmup_images == other.warmup_images
            && self.readout == other.readout
    }
}

/// Runs prediction and adaptation for one validated image.
pub fn process_image(
    rec: &ImageRecord,
    cache: &mut CacheState,
    cfg: &AdaptConfig,
) -> Result<Vec<PredictionTriple>> {
    let view = if cache.is_empty() {
        None
    } else {
        Some(CacheMatrices::from_cache(cache)?)
    };

    let mut triples = rec
        .proposals
        .iter()
        .map(|p| match &view {
            None => Ok(PredictionTriple {
                init_pred: p.init_pred.clone(),
                cache_pred: None,
                final_pred: p.init_pred.clone(),
                match_dist: None,
                similarities: None,
                matched_index: None,
                absorbed: false,
            }),
            Some(v) => {
                let sims = v.combined_similarity(p, cfg)?;
                let dist = v.match_distribution(p, cfg)?;
                let cache_pred = v.posterior(&dist)?;
                let final_pred = fuse(&p.init_pred, &cache_pred, cfg.fusion_strategy)?;
                Ok(PredictionTriple {
                    init_pred: p.init_pred.clone(),
                    cache_pred: Some(cache_pred),
                    final_pred,
                    matched_index: Some(dist.argmax().0),
                    match_dist: Some(dist.as_slice().to_vec()),
                    similarities: Some(sims.as_slice().to_vec()),
                    absorbed: false,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;

    for (p, t) in rec.proposals.iter().zip(triples.iter_mut()) {
        t.absorbed = adapt(cache, p, t, cfg)?.absorbed();
    }
    Ok(triples)
}

/// Incremental session: feed images in order, then [`Session::finish`].
#[derive(Debug)]
pub struct Session {
    cfg: AdaptConfig,
    cache: CacheState,
    images: Vec<ImageResult>,
    trace: Vec<usize>,
    stats: RunStats,
    started: Instant,
    warmup_images: usize,
    readout: Readout,
}

impl Session {
    pub fn new(cfg: AdaptConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Session {
            cfg,
            cache: CacheState::new(),
            images: Vec::new(),
            trace: Vec::new(),
            stats: RunStats::default(),
            started: Instant::now(),
            warmup_images: 0,
            readout: Readout::Final,
        })
    }

    /// Resumes from a saved cache.
    pub fn with_cache(mut self, cache: CacheState) -> Self {
        self.cache = cache;
        self
    }

    /// Images before `n` are scored by their initial prediction.
    pub fn set_warmup_images(&mut self, n: usize) {
        self.warmup_images = n;
    }

    pub fn set_readout(&mut self, readout: Readout) {
        self.readout = readout;
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn process(&mut self, rec: ImageRecord) -> Result<&ImageResult> {
        let rec = validate_record(rec, &self.cfg)?;
        let triples = process_image(&rec, &mut self.cache, &self.cfg)?;
        self.stats.images += 1;
        self.stats.proposals += triples.len();
        self.stats.absorbed += triples.iter().filter(|t| t.absorbed).count();
        self.trace.push(self.cache.len());
        let proposals = rec
            .proposals
            .into_iter()
            .zip(triples)
            .map(|(p, triple)| ScoredProposal {
                bbox: p.bbox,
                gt_label: p.gt_label,
                gt_box: p.gt_box,
                triple,
            })
            .collect();
        self.images.push(ImageResult {
            image_id: rec.image_id,
            proposals,
        });
        Ok(self.images.last().expect("just pushed"))
    }

    pub fn finish(mut self) -> SessionResult {
        self.stats.wall_ms = self.started.elapsed().as_secs_f64() * 1e3;
        SessionResult {
            config: self.cfg,
            images: self.images,
            cache: self.cache,
            cache_trace: self.trace,
            warmup_images: self.warmup_images,
            readout: self.readout,
            stats: self.stats,
        }
    }
}

/// Folds [`process_image`] over `stream` starting from an empty cache.
pub fn run_session<I>(stream: I, cfg: &AdaptConfig) -> Result<SessionResult>
where
    I: IntoIterator<Item = ImageRecord>,
{
    let mut session = Session::new(cfg.clone())?;
    for rec in stream {
        session.process(rec)?;
    }
    Ok(session.finish())
}

/// Named ablation variants run over the same stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Initial predictions only, cache never touched.
    Baseline,
    /// Likelihood adaptation only: priors frozen one-hot at creation.
    La,
    /// Likelihood and prior adaptation with entropy fusion.
    Full,
    /// Full adaptation, scored by the mean of the initial and cache predictions.
    Average,
    /// Cache adapts but predictions are the initial ones.
    InitOnly,
    /// Full adaptation, scored by the initial prediction during warm-up and by
    /// the cache posterior afterwards.
    CacheOnly,
    Momentum,
    Delayed,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::La,
        Variant::Full,
        Variant::Average,
        Variant::InitOnly,
        Variant::CacheOnly,
        Variant::Momentum,
        Variant::Delayed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::La => "la",
            Variant::Full => "full",
            Variant::Average => "average",
            Variant::InitOnly => "init-only",
            Variant::CacheOnly => "cache-only",
            Variant::Momentum => "momentum",
            Variant::Delayed => "delayed",
        }
    }

    /// Session config for this variant derived from the full-method config.
    pub fn config(self, base: &AdaptConfig) -> AdaptConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Baseline => {
                cfg.fusion_strategy = FusionStrategy::InitOnly;
                cfg.cache_updates = false;
            }
            Variant::La => cfg.prior_mode = PriorMode::FrozenOneHot,
            Variant::Full => {}
            Variant::Average => {}
            Variant::InitOnly => cfg.fusion_strategy = FusionStrategy::InitOnly,
            Variant::CacheOnly => {}
            Variant::Momentum => cfg.update_strategy = UpdateStrategy::momentum(),
            Variant::Delayed => cfg.update_strategy = UpdateStrategy::delayed(),
        }
        cfg
    }

    pub fn warmup_images(self, n_images: usize) -> usize {
        match self {
            Variant::CacheOnly => (CACHE_ONLY_WARMUP * n_images as f64).ceil() as usize,
            _ => 0,
        }
    }

    pub fn readout(self) -> Readout {
        match self {
            Variant::CacheOnly => Readout::Cache,
            Variant::Average => Readout::Average,
            _ => Readout::Final,
        }
    }

    pub fn run(self, stream: &[ImageRecord], base: &AdaptConfig) -> Result<SessionResult> {
        let mut session = Session::new(self.config(base))?;
        session.set_warmup_images(self.warmup_images(stream.len()));
        session.set_readout(self.readout());
        for rec in stream {
            session.process(rec.clone())?;
        }
        Ok(session.finish())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "cache" && *v == Variant::CacheOnly))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Runs each variant over the same materialized stream. Variants are
/// independent sessions and run on separate threads.
pub fn run_variant_suite(
    stream: &[ImageRecord],
    base: &AdaptConfig,
    variants: &[Variant],
) -> Result<BTreeMap<Variant, SessionResult>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| (v, scope.spawn(move || v.run(stream, base))))
            .collect();
        handles
            .into_iter()
            .map(|(v, h)| Ok((v, h.join().expect("variant thread panicked")?)))
            .collect()
    })
}
