//! Property suite shared by the `properties` and `acceptance` test targets.

#![allow(dead_code)]

use std::cell::Cell;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use tta_core::adapt::{adapt, create_entry, update_entry};
use tta_core::domain::{validate_record, NORM_TOLERANCE};
use tta_core::engine::{
    cache_posterior, feature_similarity, fuse, match_distribution, scale_similarity, softmax,
};
use tta_core::io::{
    read_snapshot, read_stream_all, write_snapshot, write_stream, Encoding, Precision, StreamHeader,
};
use tta_core::oracle::oracle_posterior;
use tta_core::pipeline::{process_image, run_session};
use tta_core::surrogate::{clip_init_pred, gdino_init_pred, PrototypeBank};
use tta_core::{
    AdaptConfig, BoundingBox, BoxScale, CacheEntry, CacheState, ClassDist, Error, FeatureVec,
    FusionStrategy, ImageRecord, MatchScore, PredictionTriple, PriorMode, ProposalRecord, TaskMode,
    UpdateStrategy,
};

pub const CASES: u32 = 1000;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const CLIP_TOLERANCE: f64 = 1e-12;
pub const F32_TOLERANCE: f64 = 1e-6;

pub type Property = fn(u32) -> Result<(), String>;

/// Every property, by name.
pub const ALL: &[(&str, Property)] = &[
    ("oracle equivalence", |n| oracle_equivalence(n).map(drop)),
    ("reduction to zero-shot head", |n| {
        reduction_to_clip(n).map(drop)
    }),
    ("feature normalization", feature_normalization),
    ("softmax shift invariance", softmax_shift_invariance),
    (
        "match distribution shift invariance",
        match_shift_invariance,
    ),
    ("entropy fusion convexity", entropy_fusion_convexity),
    ("fusion idempotence", fusion_idempotence),
    ("scale similarity range", scale_similarity_range),
    ("single-entry mutation", single_entry_mutation),
    ("count prior is a running mean", count_prior_mean),
    ("tau2 extremes", tau2_extremes),
    ("detection head closer to uniform", detection_head_flatter),
    ("prefix causality", prefix_causality),
    ("empty cache passes init through", empty_cache_passthrough),
    ("stream round trip", stream_round_trip),
    ("binary stream round trip", binary_stream_round_trip),
    ("snapshot round trip", snapshot_round_trip),
];

fn check<S>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn unit_vec(d: usize) -> impl Strategy<Value = FeatureVec> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-degenerate", |v| {
            v.iter().map(|x| x * x).sum::<f64>() > 1e-3
        })
        .prop_map(|v| FeatureVec::normalized(v).unwrap())
}

pub fn dist(k: usize) -> impl Strategy<Value = ClassDist> {
    prop::collection::vec(0.0f64..1.0, k)
        .prop_filter("positive mass", |v| v.iter().sum::<f64>() > 1e-3)
        .prop_map(|v| {
            let s: f64 = v.iter().sum();
            ClassDist::from_raw(v.into_iter().map(|x| x / s).collect())
        })
}

fn box_scale() -> impl Strategy<Value = BoxScale> {
    (0.01f64..=1.0, 0.01f64..=1.0).prop_map(|(w, h)| BoxScale { w, h })
}

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.01f64..=1.0, 0.01f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(w, h, u, v)| {
        BoundingBox {
            x: w / 2.0 + u * (1.0 - w),
            y: h / 2.0 + v * (1.0 - h),
            w,
            h,
        }
    })
}

fn entry(d: usize, k: usize, detection: bool) -> impl Strategy<Value = CacheEntry> {
    (unit_vec(d), dist(k), box_scale(), 1u64..50).prop_map(move |(prototype, prior, s, count)| {
        CacheEntry {
            prototype,
            scale: detection.then_some(s),
            prior,
            count,
            pending: None,
        }
    })
}

fn cache(d: usize, k: usize, max_m: usize, detection: bool) -> impl Strategy<Value = CacheState> {
    prop::collection::vec(entry(d, k, detection), 1..=max_m).prop_map(|entries| CacheState {
        created_total: entries.len() as u64,
        updated_total: 0,
        entries,
    })
}

fn proposal(d: usize, k: usize, detection: bool) -> impl Strategy<Value = ProposalRecord> {
    (unit_vec(d), dist(k), bbox()).prop_map(move |(feature, init_pred, b)| ProposalRecord {
        feature,
        bbox: detection.then_some(b),
        init_pred,
        gt_label: None,
        gt_box: None,
    })
}

fn task(detection: bool) -> TaskMode {
    if detection {
        TaskMode::Detection
    } else {
        TaskMode::Recognition
    }
}

#[derive(Debug, Clone)]
struct EngineCase {
    cfg: AdaptConfig,
    cache: CacheState,
    proposal: ProposalRecord,
}

/// M ≤ 64, K ≤ 32, d ≤ 16, either task.
fn engine_case() -> impl Strategy<Value = EngineCase> {
    (1usize..=16, 1usize..=32, any::<bool>()).prop_flat_map(|(d, k, det)| {
        (
            cache(d, k, 64, det),
            proposal(d, k, det),
            0.0f64..=1.0,
            0.1f64..=30.0,
        )
            .prop_map(move |(cache, proposal, ws, s)| {
                let mut cfg = AdaptConfig::new(task(det), k, d);
                cfg.ws = ws;
                cfg.similarity_scale = s;
                EngineCase {
                    cfg,
                    cache,
                    proposal,
                }
            })
    })
}

fn text_bank() -> impl Strategy<Value = (PrototypeBank, FeatureVec)> {
    (1usize..=16, 1usize..=32)
        .prop_flat_map(|(d, k)| {
            (
                prop::collection::vec(unit_vec(d), k),
                unit_vec(d),
                0.1f64..=100.0,
            )
        })
        .prop_map(|(text_embeds, f, logit_scale)| {
            (
                PrototypeBank {
                    text_embeds,
                    class_scales: None,
                    logit_scale,
                },
                f,
            )
        })
}

/// Matrix-path posterior against the scalar oracle; returns the largest
/// absolute deviation seen.
pub fn oracle_equivalence(cases: u32) -> Result<f64, String> {
    let worst = Cell::new(0.0f64);
    check(cases, engine_case(), |c| {
        let dist = match_distribution(&c.proposal, &c.cache, &c.cfg).unwrap();
        let fast = cache_posterior(&dist, &c.cache).unwrap();
        let slow = oracle_posterior(&c.proposal, &c.cache, &c.cfg).unwrap();
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            worst.set(worst.get().max((a - b).abs()));
            prop_assert!((a - b).abs() <= ORACLE_TOLERANCE, "{a} vs {b}");
        }
        prop_assert!((fast.sum() - 1.0).abs() <= ORACLE_TOLERANCE);
        Ok(())
    })?;
    Ok(worst.get())
}

/// A cache seeded with the text embeddings and one-hot priors reproduces the
/// zero-shot head; returns the largest absolute deviation seen.
pub fn reduction_to_clip(cases: u32) -> Result<f64, String> {
    let worst = Cell::new(0.0f64);
    check(cases, text_bank(), |(bank, f)| {
        let k = bank.text_embeds.len();
        let cache = CacheState {
            entries: bank
                .text_embeds
                .iter()
                .enumerate()
                .map(|(c, t)| CacheEntry {
                    prototype: t.clone(),
                    scale: None,
                    prior: ClassDist::one_hot(k, c),
                    count: 1,
                    pending: None,
                })
                .collect(),
            created_total: k as u64,
            updated_total: 0,
        };
        let p = ProposalRecord {
            feature: f.clone(),
            bbox: None,
            init_pred: ClassDist::uniform(k),
            gt_label: None,
            gt_box: None,
        };
        let mut cfg = AdaptConfig::new(TaskMode::Recognition, k, f.dim());
        cfg.similarity_scale = bank.logit_scale;
        let dist = match_distribution(&p, &cache, &cfg).unwrap();
        let via_cache = cache_posterior(&dist, &cache).unwrap();
        let head = clip_init_pred(&f, &bank).unwrap();
        for (a, b) in via_cache.as_slice().iter().zip(head.as_slice()) {
            worst.set(worst.get().max((a - b).abs()));
            prop_assert!((a - b).abs() <= CLIP_TOLERANCE, "{a} vs {b}");
        }
        Ok(())
    })?;
    Ok(worst.get())
}

pub fn feature_normalization(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=16, 1usize..=4).prop_flat_map(|(d, k)| {
        (
            unit_vec(d),
            dist(k),
            prop_oneof![-1e-4f64..=1e-4, 2e-4f64..0.5, -0.5f64..-2e-4],
        )
    });
    check(cases, strategy, |(f, p, eps)| {
        let cfg = AdaptConfig::new(TaskMode::Recognition, p.k(), f.dim());
        let scaled = f.as_slice().iter().map(|v| v * (1.0 + eps)).collect();
        let rec = ImageRecord {
            image_id: "x".into(),
            proposals: vec![ProposalRecord {
                feature: FeatureVec::from_raw(scaled),
                bbox: None,
                init_pred: p,
                gt_label: None,
                gt_box: None,
            }],
        };
        match validate_record(rec, &cfg) {
            Ok(r) => {
                prop_assert!(eps.abs() <= 1e-4, "accepted eps {eps}");
                let g = &r.proposals[0].feature;
                let tol = if eps.abs() > NORM_TOLERANCE {
                    1e-12
                } else {
                    NORM_TOLERANCE
                };
                prop_assert!((g.norm() - 1.0).abs() <= tol);
                for (a, b) in g.as_slice().iter().zip(f.as_slice()) {
                    prop_assert!((a - b).abs() <= tol);
                }
            }
            Err(e) => {
                prop_assert!(eps.abs() > 1e-4, "rejected eps {eps}: {e}");
                let norm_error = matches!(e, Error::Schema { .. } | Error::NotNormalized { .. });
                prop_assert!(norm_error, "{e}");
            }
        }
        Ok(())
    })
}

pub fn softmax_shift_invariance(cases: u32) -> Result<(), String> {
    let strategy = (prop::collection::vec(-50.0f64..50.0, 1..40), -1e3f64..1e3);
    check(cases, strategy, |(v, c)| {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = softmax(&v);
        let b = softmax(&shifted);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        Ok(())
    })
}

/// The matching distribution is the softmax of the scaled combined
/// similarities, unchanged by a shared shift of those similarities.
pub fn match_shift_invariance(cases: u32) -> Result<(), String> {
    check(cases, (engine_case(), -10.0f64..10.0), |(c, shift)| {
        let sf = feature_similarity(&c.proposal.feature, &c.cache).unwrap();
        let combined: Vec<f64> = match &c.proposal.bbox {
            Some(b) => scale_similarity(b, &c.cache)
                .unwrap()
                .iter()
                .zip(&sf)
                .map(|(sb, f)| c.cfg.ws * sb + (1.0 - c.cfg.ws) * f)
                .collect(),
            None => sf,
        };
        let shifted: Vec<f64> = combined
            .iter()
            .map(|v| c.cfg.similarity_scale * (v + shift))
            .collect();
        let a = match_distribution(&c.proposal, &c.cache, &c.cfg).unwrap();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        Ok(())
    })
}

pub fn entropy_fusion_convexity(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=40).prop_flat_map(|k| (dist(k), dist(k)));
    check(cases, strategy, |(p, q)| {
        let f = fuse(&p, &q, FusionStrategy::Entropy).unwrap();
        prop_assert!((f.sum() - 1.0).abs() <= 1e-12);
        let (wp, wq) = ((-p.entropy()).exp(), (-q.entropy()).exp());
        for ((a, b), v) in p.as_slice().iter().zip(q.as_slice()).zip(f.as_slice()) {
            prop_assert!(*v >= a.min(*b) - 1e-15 && *v <= a.max(*b) + 1e-15);
            prop_assert!((v - (wp * a + wq * b) / (wp + wq)).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn fusion_idempotence(cases: u32) -> Result<(), String> {
    check(cases, (1usize..=40).prop_flat_map(dist), |p| {
        for strategy in [FusionStrategy::Entropy, FusionStrategy::Average] {
            let f = fuse(&p, &p, strategy).unwrap();
            prop_assert_eq!(f.argmax(), p.argmax());
            for (a, b) in f.as_slice().iter().zip(p.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
        Ok(())
    })
}

pub fn scale_similarity_range(cases: u32) -> Result<(), String> {
    check(cases, (bbox(), cache(2, 2, 16, true)), |(b, c)| {
        for s in scale_similarity(&b, &c).unwrap() {
            prop_assert!((0.0..=1.0).contains(&s), "{s}");
        }
        Ok(())
    })
}

fn update_strategy() -> impl Strategy<Value = UpdateStrategy> {
    prop_oneof![
        Just(UpdateStrategy::Count),
        Just(UpdateStrategy::momentum()),
        Just(UpdateStrategy::delayed()),
    ]
}

pub fn single_entry_mutation(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=8, 1usize..=8, any::<bool>()).prop_flat_map(|(d, k, det)| {
        (
            cache(d, k, 16, det),
            proposal(d, k, det),
            any::<prop::sample::Index>(),
            dist(k),
            update_strategy(),
            prop_oneof![Just(PriorMode::Adaptive), Just(PriorMode::FrozenOneHot)],
        )
    });
    check(cases, strategy, |(c, p, m, f, strategy, mode)| {
        let m = m.index(c.len());
        let mut after = c.clone();
        update_entry(&mut after, m, &p, &f, strategy, mode).unwrap();
        prop_assert_eq!(after.len(), c.len());
        prop_assert_eq!(after.entries[m].count, c.entries[m].count + 1);
        for (i, (a, b)) in after.entries.iter().zip(&c.entries).enumerate() {
            if i != m {
                prop_assert_eq!(a, b);
            }
        }
        let e = &after.entries[m];
        prop_assert!((e.prototype.norm() - 1.0).abs() <= 1e-12);
        prop_assert!((e.prior.sum() - 1.0).abs() <= 1e-9);
        if mode == PriorMode::FrozenOneHot {
            prop_assert_eq!(&e.prior, &c.entries[m].prior);
        }
        Ok(())
    })
}

pub fn count_prior_mean(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=8).prop_flat_map(|k| {
        (
            dist(k),
            prop::collection::vec(dist(k), 1..30),
            proposal(4, k, false),
        )
    });
    check(cases, strategy, |(first, rest, p)| {
        let mut c = CacheState::new();
        create_entry(&mut c, &p, &first, PriorMode::Adaptive);
        let mut shadow: Vec<f64> = first.as_slice().to_vec();
        for q in &rest {
            update_entry(&mut c, 0, &p, q, UpdateStrategy::Count, PriorMode::Adaptive).unwrap();
            shadow
                .iter_mut()
                .zip(q.as_slice())
                .for_each(|(s, v)| *s += v);
        }
        let n = (rest.len() + 1) as f64;
        prop_assert_eq!(c.entries[0].count, rest.len() as u64 + 1);
        for (a, s) in c.entries[0].prior.as_slice().iter().zip(&shadow) {
            prop_assert!((a - s / n).abs() <= 1e-12);
        }
        Ok(())
    })
}

/// Recognition only: the similarities are feature cosines.
fn triple_for(p: &ProposalRecord, cache: &CacheState, cfg: &AdaptConfig) -> PredictionTriple {
    let dist = match_distribution(p, cache, cfg).unwrap();
    let cache_pred = cache_posterior(&dist, cache).unwrap();
    let final_pred = fuse(&p.init_pred, &cache_pred, cfg.fusion_strategy).unwrap();
    let matched = (0..dist.len()).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
    PredictionTriple {
        init_pred: p.init_pred.clone(),
        cache_pred: Some(cache_pred),
        final_pred,
        match_dist: Some(dist),
        similarities: Some(feature_similarity(&p.feature, cache).unwrap()),
        matched_index: Some(matched),
        absorbed: false,
    }
}

pub fn tau2_extremes(cases: u32) -> Result<(), String> {
    check(cases, engine_case(), |c| {
        let mut cfg = c.cfg.clone();
        cfg.task = TaskMode::Recognition;
        cfg.tau1 = 0.0;
        let cache = CacheState {
            entries: c
                .cache
                .entries
                .into_iter()
                .map(|mut e| {
                    e.scale = None;
                    e
                })
                .collect(),
            ..c.cache
        };
        let p = ProposalRecord {
            bbox: None,
            ..c.proposal
        };
        for score in [MatchScore::Posterior, MatchScore::Similarity] {
            cfg.match_score = score;
            let t = triple_for(&p, &cache, &cfg);

            cfg.tau2 = if score == MatchScore::Posterior {
                0.0
            } else {
                -1.0
            };
            let mut updated = cache.clone();
            adapt(&mut updated, &p, &t, &cfg).unwrap();
            prop_assert_eq!(updated.len(), cache.len());
            prop_assert_eq!(updated.updated_total, cache.updated_total + 1);

            cfg.tau2 = 1.0 + 1e-9;
            let mut grown = cache.clone();
            adapt(&mut grown, &p, &t, &cfg).unwrap();
            prop_assert_eq!(grown.len(), cache.len() + 1);
            prop_assert_eq!(&grown.entries[..cache.len()], &cache.entries[..]);
        }
        Ok(())
    })
}

pub fn detection_head_flatter(cases: u32) -> Result<(), String> {
    check(cases, text_bank(), |(bank, f)| {
        let clip = clip_init_pred(&f, &bank).unwrap();
        let gdino = gdino_init_pred(&f, &bank).unwrap();
        prop_assert!(gdino.entropy() >= clip.entropy() - 1e-12);
        Ok(())
    })
}

fn small_stream() -> impl Strategy<Value = (TaskMode, usize, usize, Vec<ImageRecord>)> {
    (1usize..=6, 1usize..=6, any::<bool>()).prop_flat_map(|(d, k, det)| {
        let per_image = if det { 1usize..4 } else { 1usize..2 };
        let img = prop::collection::vec(
            (proposal(d, k, det), 0..k, bbox()).prop_map(move |(mut p, l, g)| {
                p.gt_label = Some(l);
                p.gt_box = det.then_some(g);
                p
            }),
            per_image,
        );
        (
            Just(task(det)),
            Just(k),
            Just(d),
            prop::collection::vec(img, 0..12).prop_map(|imgs| {
                imgs.into_iter()
                    .enumerate()
                    .map(|(i, proposals)| ImageRecord {
                        image_id: format!("im{i}"),
                        proposals,
                    })
                    .collect()
            }),
        )
    })
}

fn run_cfg(task: TaskMode, k: usize, d: usize) -> AdaptConfig {
    let mut cfg = AdaptConfig::new(task, k, d);
    cfg.tau1 = 0.3;
    cfg.tau2 = 0.5;
    cfg.match_score = MatchScore::Similarity;
    cfg.similarity_scale = 5.0;
    cfg
}

pub fn prefix_causality(cases: u32) -> Result<(), String> {
    check(
        cases,
        (small_stream(), any::<prop::sample::Index>()),
        |((t, k, d, stream), cut)| {
            let cfg = run_cfg(t, k, d);
            let full = run_session(stream.clone(), &cfg).unwrap();
            let n = cut.index(stream.len() + 1);
            let prefix = run_session(stream[..n].to_vec(), &cfg).unwrap();
            prop_assert_eq!(&prefix.images[..], &full.images[..n]);
            prop_assert_eq!(&prefix.cache_trace[..], &full.cache_trace[..n]);
            prop_assert!(full.cache_trace.windows(2).all(|w| w[0] <= w[1]));
            Ok(())
        },
    )
}

pub fn empty_cache_passthrough(cases: u32) -> Result<(), String> {
    check(cases, small_stream(), |(t, k, d, stream)| {
        let cfg = run_cfg(t, k, d);
        if let Some(first) = stream.first() {
            let mut cache = CacheState::new();
            for tr in process_image(first, &mut cache, &cfg).unwrap() {
                prop_assert_eq!(&tr.final_pred, &tr.init_pred);
                prop_assert!(tr.cache_pred.is_none());
            }
        }
        Ok(())
    })
}

fn header(t: TaskMode, k: usize, d: usize) -> StreamHeader {
    StreamHeader::new(t, k, d, (0..k).map(|c| format!("c{c}")).collect())
}

fn assert_close_streams(back: &[ImageRecord], stream: &[ImageRecord]) -> Result<(), TestCaseError> {
    prop_assert_eq!(back.len(), stream.len());
    for (a, b) in back.iter().zip(stream) {
        prop_assert_eq!(&a.image_id, &b.image_id);
        prop_assert_eq!(a.proposals.len(), b.proposals.len());
        for (p, q) in a.proposals.iter().zip(&b.proposals) {
            for (x, y) in p.feature.as_slice().iter().zip(q.feature.as_slice()) {
                prop_assert!((x - y).abs() <= F32_TOLERANCE, "{x} vs {y}");
            }
            for (x, y) in p.init_pred.as_slice().iter().zip(q.init_pred.as_slice()) {
                prop_assert!((x - y).abs() <= F32_TOLERANCE, "{x} vs {y}");
            }
            prop_assert_eq!(p.gt_label, q.gt_label);
            prop_assert_eq!(p.bbox.is_some(), q.bbox.is_some());
            prop_assert_eq!(p.gt_box.is_some(), q.gt_box.is_some());
        }
    }
    Ok(())
}

pub fn stream_round_trip(cases: u32) -> Result<(), String> {
    check(
        cases,
        (small_stream(), any::<bool>()),
        |((t, k, d, stream), low)| {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            let mut h = header(t, k, d);
            if low {
                h.precision = Precision::F32;
            }
            write_stream(&path, &h, &stream).unwrap();
            let (back_header, back) = read_stream_all(&path).unwrap();
            prop_assert_eq!(back_header.k, k);
            prop_assert_eq!(back_header.d, d);
            if low {
                assert_close_streams(&back, &stream)?;
            } else {
                prop_assert_eq!(back, stream);
            }
            Ok(())
        },
    )
}

pub fn binary_stream_round_trip(cases: u32) -> Result<(), String> {
    check(cases, small_stream(), |(t, k, d, stream)| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let mut h = header(t, k, d);
        h.encoding = Encoding::Binary;
        write_stream(&path, &h, &stream).unwrap();
        let (back_header, back) = read_stream_all(&path).unwrap();
        prop_assert_eq!(back_header.precision, Precision::F32);
        assert_close_streams(&back, &stream)
    })
}

pub fn snapshot_round_trip(cases: u32) -> Result<(), String> {
    let strategy =
        (1usize..=8, 1usize..=8, any::<bool>()).prop_flat_map(|(d, k, det)| cache(d, k, 20, det));
    check(cases, strategy, |c| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        write_snapshot(&path, &c).unwrap();
        let back = read_snapshot(&path).unwrap();
        prop_assert_eq!(back.len(), c.len());
        prop_assert_eq!(back.created_total, c.created_total);
        for (a, b) in back.entries.iter().zip(&c.entries) {
            prop_assert_eq!(a.count, b.count);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a.prior.as_slice()), bits(b.prior.as_slice()));
            prop_assert_eq!(bits(a.prototype.as_slice()), bits(b.prototype.as_slice()));
            prop_assert_eq!(a.scale, b.scale);
        }
        Ok(())
    })
}
