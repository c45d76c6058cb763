//! Average precision on the synthetic task.
//!
//! Per class and IoU threshold, detections of all scenes are sorted by
//! score and matched greedily to the unmatched ground truth of highest IoU.
//! AP is the area under the precision envelope (all-point interpolation),
//! averaged over classes that have ground truth. Size buckets split ground
//! truth by the area tertiles of the evaluated set; objects outside a bucket
//! and detections matched to them are ignored, as are unmatched detections
//! whose own area lies outside the bucket.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxCxcywh};
use crate::data::Object;
use crate::error::{Error, Result};
use crate::tape::sigmoid;

/// One scored detection of one class in one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections kept per scene after ranking all (query, class) pairs;
    /// 0 keeps every pair.
    pub top_k: usize,
    /// Pairs scoring below this are dropped.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: 0,
            score_threshold: 0.0,
        }
    }
}

/// Ranks the `(query, class)` pairs of one scene by sigmoid score.
/// `boxes` is `[queries, 4]`, `logits` `[queries, classes]`.
pub fn select_detections(boxes: &[f64], logits: &[f64], classes: usize, cfg: &EvalConfig) -> Vec<Detection> {
    let mut dets: Vec<Detection> = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| Detection {
            class: k % classes,
            score: sigmoid(z),
            bbox: BoxCxcywh::from_slice(&boxes[(k / classes) * 4..(k / classes) * 4 + 4]),
        })
        .filter(|d| d.score >= cfg.score_threshold)
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    if cfg.top_k > 0 {
        dets.truncate(cfg.top_k);
    }
    dets
}

const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Area range `[lo, hi)` of a size bucket.
type Range = (f64, f64);

const ALL: Range = (f64::NEG_INFINITY, f64::INFINITY);

/// Evaluates detections against ground truth, scene by scene.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[&[Object]]) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::dim("evaluate scenes", &[dets.len()], &[gts.len()]));
    }
    let classes = class_count(dets, gts);
    let (t1, t2) = area_tertiles(gts);
    let mean_ap = |thr: f64, range: Range| mean_over_classes(dets, gts, classes, thr, range);
    let ap_at: Vec<f64> = THRESHOLDS.iter().map(|&t| mean_ap(t, ALL)).collect();
    let bucket = |range: Range| THRESHOLDS.iter().map(|&t| mean_ap(t, range)).sum::<f64>() / THRESHOLDS.len() as f64;
    Ok(EvalResult {
        ap: ap_at.iter().sum::<f64>() / ap_at.len() as f64,
        ap50: ap_at[0],
        ap75: ap_at[5],
        ap_small: bucket((f64::NEG_INFINITY, t1)),
        ap_medium: bucket((t1, t2)),
        ap_large: bucket((t2, f64::INFINITY)),
    })
}

/// Class-averaged AP at one IoU threshold, over all sizes.
pub fn ap_at_threshold(dets: &[Vec<Detection>], gts: &[&[Object]], thr: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::dim("evaluate scenes", &[dets.len()], &[gts.len()]));
    }
    Ok(mean_over_classes(dets, gts, class_count(dets, gts), thr, ALL))
}

fn class_count(dets: &[Vec<Detection>], gts: &[&[Object]]) -> usize {
    gts.iter()
        .flat_map(|g| g.iter().map(|o| o.class + 1))
        .chain(dets.iter().flat_map(|d| d.iter().map(|x| x.class + 1)))
        .max()
        .unwrap_or(0)
}

/// Area cut points at the first and second tertile of all ground truth.
pub fn area_tertiles(gts: &[&[Object]]) -> (f64, f64) {
    let mut areas: Vec<f64> = gts.iter().flat_map(|g| g.iter().map(|o| o.bbox.area())).collect();
    if areas.is_empty() {
        return (0.0, 0.0);
    }
    areas.sort_by(f64::total_cmp);
    let q = |f: f64| areas[((areas.len() as f64 * f) as usize).min(areas.len() - 1)];
    (q(1.0 / 3.0), q(2.0 / 3.0))
}

fn in_range(area: f64, r: Range) -> bool {
    area >= r.0 && area < r.1
}

fn mean_over_classes(dets: &[Vec<Detection>], gts: &[&[Object]], classes: usize, thr: f64, range: Range) -> f64 {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| class_ap(dets, gts, c, thr, range))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// AP of one class, or `None` when the class has no counted ground truth.
fn class_ap(dets: &[Vec<Detection>], gts: &[&[Object]], class: usize, thr: f64, range: Range) -> Option<f64> {
    let gt: Vec<Vec<(BoxCxcywh, bool)>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .filter(|o| o.class == class)
                .map(|o| (o.bbox, !in_range(o.bbox.area(), range)))
                .collect()
        })
        .collect();
    let counted = gt.iter().flatten().filter(|(_, ignored)| !ignored).count();
    if counted == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| {
            d.iter()
                .enumerate()
                .filter(|(_, x)| x.class == class)
                .map(move |(i, x)| (s, i, x))
        })
        .collect();
    // Stable order: score, then scene, then position.
    ranked.sort_by(|a, b| match b.2.score.total_cmp(&a.2.score) {
        Ordering::Equal => (a.0, a.1).cmp(&(b.0, b.1)),
        o => o,
    });

    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for &(s, _, d) in &ranked {
        let best = |want_ignored: bool| {
            gt[s]
                .iter()
                .enumerate()
                .filter(|(k, (_, ig))| *ig == want_ignored && !taken[s][*k])
                .map(|(k, (b, _))| (k, iou(*b, d.bbox)))
                .filter(|&(_, v)| v >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        };
        if let Some((k, _)) = best(false) {
            taken[s][k] = true;
            hits.push(true);
        } else if let Some((k, _)) = best(true) {
            taken[s][k] = true;
        } else if in_range(d.bbox.area(), range) {
            hits.push(false);
        }
    }
    Some(average_precision(&hits, counted))
}

/// All-point interpolated AP of a ranked hit list against `positives`.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right.
    let mut ap = 0.0;
    let mut envelope: f64 = 0.0;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        if recall < prev_recall {
            ap += (prev_recall - recall) * envelope;
            prev_recall = recall;
        }
        envelope = envelope.max(precision);
    }
    ap + prev_recall * envelope
}

/// One decoded query of one scene, for line-delimited export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub scene: u64,
    pub layer: usize,
    pub query: usize,
    pub bbox: BoxCxcywh,
    pub probs: Vec<f64>,
}

pub fn write_query_records(records: &[QueryRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format("query record", e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
