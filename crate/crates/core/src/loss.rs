//! Set-prediction objective: Hungarian matching of predictions to ground
//! truth, then sigmoid focal classification, L1 and GIoU box losses.
//!
//! Every term is normalized by the number of matched pairs in the batch
//! (at least 1). Classification is summed over all queries and classes;
//! unmatched queries are supervised as negatives for every class.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BoxCxcywh};
use crate::data::Object;
use crate::decoder::Detections;
use crate::error::{Error, Result};
use crate::matching::{hungarian, Assignment};
use crate::tape::{focal_term, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls_coef: f64,
    pub l1_coef: f64,
    pub giou_coef: f64,
    /// Positive-class weight of the focal loss; `None` disables weighting.
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
    /// Supervise every decoder layer, not only the last.
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_coef: 2.0,
            l1_coef: 5.0,
            giou_coef: 2.0,
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
            aux_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let coefs = [self.cls_coef, self.l1_coef, self.giou_coef, self.focal_gamma];
        if coefs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::config(
                "loss coefficients and focal gamma must be finite and non-negative",
            ));
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("focal alpha must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

/// Weighted loss terms of one decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cfg: &LossConfig, cls: f64, l1: f64, giou: f64) -> Self {
        Self {
            cls,
            l1,
            giou,
            total: cfg.cls_coef * cls + cfg.l1_coef * l1 + cfg.giou_coef * giou,
        }
    }
}

/// Focal loss of one logit against a 0/1 target:
/// `-alpha_t (1 - p_t)^gamma ln p_t`.
pub fn focal_loss(logit: f64, target: f64, alpha: Option<f64>, gamma: f64) -> f64 {
    focal_term(logit, target, alpha, gamma).0
}

/// Classification term of the matching cost: focal cost of calling the
/// query positive for `class` minus the cost of calling it negative.
pub fn class_cost(logit: f64, cfg: &LossConfig) -> f64 {
    focal_loss(logit, 1.0, cfg.focal_alpha, cfg.focal_gamma) - focal_loss(logit, 0.0, cfg.focal_alpha, cfg.focal_gamma)
}

/// Row-major `[queries, targets.len()]` matching cost for one scene.
/// `boxes` is `[queries, 4]`, `logits` `[queries, classes]`.
pub fn matching_cost(boxes: &[f64], logits: &[f64], classes: usize, targets: &[Object], cfg: &LossConfig) -> Vec<f64> {
    let queries = boxes.len() / 4;
    let mut cost = Vec::with_capacity(queries * targets.len());
    for q in 0..queries {
        let pred = BoxCxcywh::from_slice(&boxes[q * 4..q * 4 + 4]);
        for t in targets {
            let cls = class_cost(logits[q * classes + t.class], cfg);
            cost.push(cfg.cls_coef * cls + cfg.l1_coef * pred.l1(t.bbox) + cfg.giou_coef * (1.0 - giou(pred, t.bbox)));
        }
    }
    cost
}

/// Loss of a batch, with its per-layer breakdown and matchings.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Scalar objective summed over supervised layers.
    pub loss: Var,
    /// Breakdown per supervised layer, last layer last.
    pub per_layer: Vec<LossBreakdown>,
    /// Matchings per supervised layer, one per scene.
    pub assignments: Vec<Vec<Assignment>>,
}

impl LossOutput {
    pub fn last(&self) -> LossBreakdown {
        *self.per_layer.last().expect("at least one supervised layer")
    }
}

/// Matches and scores one layer's detections against the scenes' objects.
pub fn layer_loss(
    g: &mut Graph,
    det: &Detections,
    targets: &[&[Object]],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
    let bshape = g.shape(det.boxes).to_vec();
    let classes = g.shape(det.logits)[1];
    let batch = targets.len();
    if batch == 0 || !bshape[0].is_multiple_of(batch) {
        return Err(Error::dim("loss batch", &bshape, &[batch]));
    }
    let queries = bshape[0] / batch;

    let mut assignments = Vec::with_capacity(batch);
    let mut cls_targets = vec![0.0; bshape[0] * classes];
    let mut rows = Vec::new();
    let mut box_targets = Vec::new();
    for (b, objs) in targets.iter().enumerate() {
        let span = b * queries..(b + 1) * queries;
        let boxes = &g.value(det.boxes)[span.start * 4..span.end * 4];
        let logits = &g.value(det.logits)[span.start * classes..span.end * classes];
        let cost = matching_cost(boxes, logits, classes, objs, cfg);
        let a = hungarian(&cost, queries, objs.len())?;
        for &(q, t) in &a.pairs {
            let row = b * queries + q;
            cls_targets[row * classes + objs[t].class] = 1.0;
            rows.push(row);
            box_targets.extend_from_slice(&objs[t].bbox.to_array());
        }
        assignments.push(a);
    }
    let norm = rows.len().max(1) as f64;

    let focal = g.focal_loss(det.logits, &cls_targets, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = g.scale(focal, 1.0 / norm);
    let mut total = g.scale(cls, cfg.cls_coef);
    let (mut l1_val, mut giou_val) = (0.0, 0.0);
    if !rows.is_empty() {
        let matched = g.gather_rows(det.boxes, &rows)?;
        let tgt = g.constant(&[rows.len(), 4], box_targets.clone())?;
        let diff = g.sub(matched, tgt)?;
        let abs = g.abs(diff);
        let l1 = g.sum(abs);
        let l1 = g.scale(l1, 1.0 / norm);
        let gl = g.giou_loss(matched, &box_targets)?;
        let gl = g.scale(gl, 1.0 / norm);
        l1_val = g.value(l1)[0];
        giou_val = g.value(gl)[0];
        let l1w = g.scale(l1, cfg.l1_coef);
        let glw = g.scale(gl, cfg.giou_coef);
        total = g.add(total, l1w)?;
        total = g.add(total, glw)?;
    }
    let breakdown = LossBreakdown::new(cfg, g.value(cls)[0], l1_val, giou_val);
    Ok((total, breakdown, assignments))
}

/// Objective over the decoder's per-layer detections: every layer with
/// auxiliary losses, otherwise only the last.
pub fn total_loss(g: &mut Graph, layers: &[Detections], targets: &[&[Object]], cfg: &LossConfig) -> Result<LossOutput> {
    let supervised = if cfg.aux_loss {
        layers
    } else {
        &layers[layers.len().saturating_sub(1)..]
    };
    if supervised.is_empty() {
        return Err(Error::usage("total_loss needs at least one decoder layer"));
    }
    let mut loss: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(supervised.len());
    let mut assignments = Vec::with_capacity(supervised.len());
    for det in supervised {
        let (l, b, a) = layer_loss(g, det, targets, cfg)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        per_layer.push(b);
        assignments.push(a);
    }
    let loss = loss.expect("non-empty");
    if !g.value(loss)[0].is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", g.value(loss)[0])));
    }
    Ok(LossOutput {
        loss,
        per_layer,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let z = (0.01f64 / 0.99).ln();
        let expected = 0.25 * 0.99f64.powi(2) * -(0.01f64.ln());
        assert!((focal_loss(z, 1.0, Some(0.25), 2.0) - expected).abs() < 1e-12);
        assert!((focal_loss(z, 1.0, Some(0.25), 2.0) - 1.1285).abs() < 2e-4);
        assert!(focal_loss(40.0, 1.0, Some(0.25), 2.0) < 1e-15);
        for z in [-3.0f64, -0.2, 0.0, 1.7] {
            let p = 1.0 / (1.0 + (-z).exp());
            assert!((focal_loss(z, 1.0, None, 0.0) + p.ln()).abs() < 1e-12);
            assert!((focal_loss(z, 0.0, None, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let b = LossBreakdown::new(&LossConfig::default(), 0.5, 0.1, 0.25);
        assert!((b.total - (1.0 + 0.5 + 0.5)).abs() < 1e-15);
    }
}
