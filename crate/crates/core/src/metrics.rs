//! Post-hoc evaluation: top-1 accuracy, IoU, AP@50 and segment breakdowns.
//!
//! Detection scoring keeps boxes fixed and rescores each proposal with
//! `max_k p[k]`, labelled by the argmax. Ground-truth objects of an image are
//! the distinct `(gt_label, gt_box)` pairs carried by its proposals.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, ClassDist, TaskMode};
use crate::error::{Error, Result};
use crate::pipeline::SessionResult;

/// IoU needed for a true positive.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Fraction of proposals whose argmax equals the label.
pub fn top1_accuracy<'a, I>(preds: I) -> f64
where
    I: IntoIterator<Item = (&'a ClassDist, usize)>,
{
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, label) in preds {
        n += 1;
        hit += usize::from(p.argmax() == label);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Intersection over union of two center-format boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class: usize,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageDetections {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Area under the precision/recall curve with all-point interpolation.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len() + 2);
    let mut precision = Vec::with_capacity(tp.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Per-class AP@50 and their mean over classes present in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub map50: f64,
    /// `(class, AP)` for every class with at least one ground-truth object.
    pub per_class: Vec<(usize, f64)>,
}

/// Mean AP at IoU 0.5 with greedy matching in descending score order.
pub fn ap50(images: &[ImageDetections], k: usize) -> Result<ApReport> {
    let mut per_class = Vec::new();
    for class in 0..k {
        let n_gt: usize = images
            .iter()
            .map(|im| im.ground_truth.iter().filter(|g| g.class == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| {
                im.detections
                    .iter()
                    .filter(move |d| d.class == class)
                    .map(move |d| (i, d))
            })
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut taken: Vec<Vec<bool>> = images
            .iter()
            .map(|im| vec![false; im.ground_truth.len()])
            .collect();
        let tp: Vec<bool> = dets
            .iter()
            .map(|(i, d)| {
                let best = images[*i]
                    .ground_truth
                    .iter()
                    .enumerate()
                    .filter(|(g, gt)| gt.class == class && !taken[*i][*g])
                    .map(|(g, gt)| (g, iou(&d.bbox, &gt.bbox)))
                    .filter(|(_, o)| *o >= IOU_THRESHOLD)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((g, _)) => {
                        taken[*i][g] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push((class, average_precision(&tp, n_gt)));
    }
    if per_class.is_empty() {
        return Err(Error::MissingGroundTruth {
            image_id: String::new(),
            proposal: 0,
        });
    }
    let map50 = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(ApReport { map50, per_class })
}

/// Turns images `range` of a session into detections scored by `max_k p[k]`.
/// Proposals below `report_threshold` are dropped.
pub fn session_detections(
    result: &SessionResult,
    range: std::ops::Range<usize>,
    report_threshold: f64,
) -> Vec<ImageDetections> {
    range
        .map(|i| {
            let img = &result.images[i];
            let mut out = ImageDetections::default();
            for (j, p) in img.proposals.iter().enumerate() {
                if let (Some(label), Some(gt)) = (p.gt_label, p.gt_box) {
                    let g = GroundTruth {
                        bbox: gt,
                        class: label,
                    };
                    if !out.ground_truth.contains(&g) {
                        out.ground_truth.push(g);
                    }
                }
                let Some(bbox) = p.bbox else { continue };
                let pred = result.scored_pred(i, j);
                if pred.max() >= report_threshold {
                    out.detections.push(Detection {
                        bbox,
                        class: pred.argmax(),
                        score: pred.max(),
                    });
                }
            }
            out
        })
        .collect()
}

/// Top-1 accuracy of images `range` of a recognition session.
pub fn session_accuracy(result: &SessionResult, range: std::ops::Range<usize>) -> Result<f64> {
    let mut pairs: Vec<(_, usize)> = Vec::new();
    for i in range {
        for (j, p) in result.images[i].proposals.iter().enumerate() {
            let label = p.gt_label.ok_or_else(|| Error::MissingGroundTruth {
                image_id: result.images[i].image_id.clone(),
                proposal: j,
            })?;
            pairs.push((result.scored_pred(i, j), label));
        }
    }
    Ok(top1_accuracy(pairs.iter().map(|(p, l)| (p.as_ref(), *l))))
}

/// Image index range covered by the stream fraction `[start, end)`.
pub fn fraction_range(n_images: usize, start: f64, end: f64) -> Result<std::ops::Range<usize>> {
    let bad = |reason: &str| Error::BadRange {
        start,
        end,
        reason: reason.into(),
    };
    if !(start.is_finite() && end.is_finite()) {
        return Err(bad("bounds must be finite"));
    }
    if start < 0.0 || end > 1.0 {
        return Err(bad("bounds must lie in [0, 1]"));
    }
    if start >= end {
        return Err(bad("start must be below end"));
    }
    let lo = (start * n_images as f64).round() as usize;
    let hi = (end * n_images as f64).round() as usize;
    Ok(lo..hi)
}

/// Parses `"0:0.5,0.5:1"` into fraction pairs, rejecting empty or
/// out-of-range segments.
pub fn parse_segments(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|seg| {
            let (a, b) = seg.split_once(':').ok_or_else(|| Error::BadRange {
                start: f64::NAN,
                end: f64::NAN,
                reason: format!("segment `{seg}` is not start:end"),
            })?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::BadRange {
                    start: f64::NAN,
                    end: f64::NAN,
                    reason: format!("segment `{seg}` has a non-numeric bound"),
                })
            };
            let (start, end) = (parse(a)?, parse(b)?);
            fraction_range(0, start, end)?;
            Ok((start, end))
        })
        .collect()
}

/// Metrics of one stream segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub start: f64,
    pub end: f64,
    pub images: usize,
    pub proposals: usize,
    /// Recognition only.
    pub accuracy: Option<f64>,
    /// Detection only.
    pub map50: Option<f64>,
    pub mean_entropy_init: f64,
    pub mean_entropy_final: f64,
    pub absorbed: usize,
}

/// Metrics for each requested `[start, end)` fraction of the image sequence.
pub fn segment_report(result: &SessionResult, segments: &[(f64, f64)]) -> Result<Vec<SegmentRow>> {
    let n = result.images.len();
    segments
        .iter()
        .map(|&(start, end)| {
            let range = fraction_range(n, start, end)?;
            let (mut proposals, mut absorbed) = (0usize, 0usize);
            let (mut h_init, mut h_final) = (0.0, 0.0);
            for i in range.clone() {
                for (j, p) in result.images[i].proposals.iter().enumerate() {
                    proposals += 1;
                    absorbed += usize::from(p.triple.absorbed);
                    h_init += p.triple.init_pred.entropy();
                    h_final += result.scored_pred(i, j).entropy();
                }
            }
            let denom = proposals.max(1) as f64;
            let (accuracy, map50) = match result.config.task {
                TaskMode::Recognition => (Some(session_accuracy(result, range.clone())?), None),
                TaskMode::Detection => {
                    let dets = session_detections(result, range.clone(), 0.0);
                    let map = match ap50(&dets, result.config.k) {
                        Ok(r) => r.map50,
                        Err(Error::MissingGroundTruth { .. }) if dets.is_empty() => 0.0,
                        Err(e) => return Err(e),
                    };
                    (None, Some(map))
                }
            };
            Ok(SegmentRow {
                start,
                end,
                images: range.len(),
                proposals,
                accuracy,
                map50,
                mean_entropy_init: h_init / denom,
                mean_entropy_final: h_final / denom,
                absorbed,
            })
        })
        .collect()
}

/// Headline metric of a whole session: accuracy (recognition) or mAP50 (detection).
pub fn headline(result: &SessionResult) -> Result<f64> {
    let n = result.images.len();
    match result.config.task {
        TaskMode::Recognition => session_accuracy(result, 0..n),
        TaskMode::Detection => {
            Ok(ap50(&session_detections(result, 0..n, 0.0), result.config.k)?.map50)
        }
    }
}

/// Writes segment rows as CSV with a header line.
pub fn write_segments_csv<W: Write>(rows: &[SegmentRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "start",
        "end",
        "images",
        "proposals",
        "accuracy",
        "map50",
        "mean_entropy_init",
        "mean_entropy_final",
        "absorbed",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.start.to_string(),
            r.end.to_string(),
            r.images.to_string(),
            r.proposals.to_string(),
            opt(r.accuracy),
            opt(r.map50),
            format!("{:.6}", r.mean_entropy_init),
            format!("{:.6}", r.mean_entropy_final),
            r.absorbed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Series for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    /// `(images processed, metric over the window ending there)`.
    pub metric_over_time: Vec<(usize, f64)>,
    pub metric: String,
    pub cache_trace: Vec<usize>,
}

/// Windowed accuracy or mAP50 plus the cache-size trace.
pub fn plot_data(result: &SessionResult, windows: usize) -> Result<PlotData> {
    let n = result.images.len();
    let windows = windows.clamp(1, n.max(1));
    let mut series = Vec::with_capacity(windows);
    for w in 0..windows {
        let lo = w * n / windows;
        let hi = (w + 1) * n / windows;
        if hi <= lo {
            continue;
        }
        let value = match result.config.task {
            TaskMode::Recognition => session_accuracy(result, lo..hi)?,
            TaskMode::Detection => ap50(&session_detections(result, lo..hi, 0.0), result.config.k)
                .map(|r| r.map50)
                .unwrap_or(0.0),
        };
        series.push((hi, value));
    }
    Ok(PlotData {
        metric_over_time: series,
        metric: match result.config.task {
            TaskMode::Recognition => "accuracy".into(),
            TaskMode::Detection => "map50".into(),
        },
        cache_trace: result.cache_trace.clone(),
    })
}
