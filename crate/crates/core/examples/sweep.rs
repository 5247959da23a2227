//! Runs every variant on synthetic streams and prints the headline metrics.
//! Defaults match the acceptance streams; override any of them as `key=value`.
//!
//! `cargo run --release --example sweep -- task=det drift=0.6 tau2=0.5`

use std::collections::BTreeMap;

use tta_core::metrics::{fraction_range, headline, segment_report};
use tta_core::surrogate::{ShiftSpec, SimulationConfig};
use tta_core::{run_variant_suite, AdaptConfig, MatchScore, TaskMode, Variant};

fn main() {
    let args: BTreeMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map(|v| v.parse().unwrap()).unwrap_or(d);
    let task: TaskMode = args
        .get("task")
        .map(|s| s.parse().unwrap())
        .unwrap_or(TaskMode::Recognition);
    let k = get("k", 20.0) as usize;
    let d = get("d", 32.0) as usize;
    let n = get("n", 4000.0) as usize;
    let seeds = get("seeds", 5.0) as u64;
    let ppi = get("ppi", if task.is_detection() { 3.0 } else { 1.0 }) as usize;

    let mut sums: BTreeMap<Variant, f64> = BTreeMap::new();
    let mut halves = (0.0, 0.0);
    for seed in 0..seeds {
        let sim = SimulationConfig {
            task,
            k,
            d,
            n_images: n,
            proposals_per_image: ppi,
            bank_seed: 1000 + seed,
            logit_scale: get("logit", if task.is_detection() { 40.0 } else { 10.0 }),
            bank: None,
            shift: ShiftSpec {
                prior_skew: ShiftSpec::concentrated_skew(k, 4, 0.8),
                prototype_drift: get("drift", 0.85),
                noise_sigma: get("noise", 0.24),
                scale_jitter: get("jitter", 0.1),
                background_rate: get("bg", if task.is_detection() { 0.2 } else { 0.0 }),
                seed: 2000 + seed,
            },
            class_names: None,
        };
        let stream = sim.generate().unwrap();
        let mut cfg = AdaptConfig::new(task, k, d);
        cfg.similarity_scale = get("sscale", 25.0);
        cfg.tau1 = get("tau1", 0.6);
        cfg.tau2 = get("tau2", 0.35);
        cfg.match_score = match args.get("match").map(String::as_str) {
            Some("posterior") => MatchScore::Posterior,
            _ => MatchScore::Similarity,
        };
        let t0 = std::time::Instant::now();
        let res = run_variant_suite(&stream, &cfg, &Variant::ALL).unwrap();
        let mut line = format!("seed {seed} ({:.1}s):", t0.elapsed().as_secs_f64());
        for (v, r) in &res {
            let h = headline(r).unwrap();
            *sums.entry(*v).or_default() += h;
            line += &format!(" {v}={:.2}", 100.0 * h);
        }
        let full = &res[&Variant::Full];
        let seg = segment_report(full, &[(0.0, 0.5), (0.5, 1.0)]).unwrap();
        let m = |r: &tta_core::metrics::SegmentRow| r.accuracy.or(r.map50).unwrap();
        halves.0 += m(&seg[0]);
        halves.1 += m(&seg[1]);
        let tr = &full.cache_trace;
        let first = fraction_range(tr.len(), 0.0, 0.2).unwrap();
        let last = fraction_range(tr.len(), 0.8, 1.0).unwrap();
        let g_first = tr[first.end - 1] as f64;
        let g_last = (tr[last.end - 1] - tr[last.start - 1]) as f64;
        line += &format!(
            " | M={} growth first={} last={} ratio={:.3} | halves {:.2}/{:.2}",
            tr.last().unwrap(),
            g_first,
            g_last,
            g_last / g_first,
            100.0 * m(&seg[0]),
            100.0 * m(&seg[1])
        );
        println!("{line}");
    }
    let s = seeds as f64;
    let mean: Vec<String> = sums
        .iter()
        .map(|(v, x)| format!("{v}={:.2}", 100.0 * x / s))
        .collect();
    println!(
        "MEAN {} | halves {:.2}/{:.2}",
        mean.join(" "),
        100.0 * halves.0 / s,
        100.0 * halves.1 / s
    );
}
