//! Experiment orchestration behind the command-line verbs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{generate_scene, Object, Scene};
use crate::encoder::EncoderPlan;
use crate::error::{Error, Result};
use crate::eval::{area_tertiles, EvalResult};
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::loss::{matching_cost, total_loss};
use crate::matching::hungarian;
use crate::model::{Modulation, Network};
use crate::tape::Graph;
use crate::tensor::ParamStore;
use crate::train::{epochs_to_ap50, eval_curve, train, TrainOutcome};

/// Ablation shorthands for the scale modes of multi-head modulation.
pub const MODE_SHORTHANDS: [&str; 3] = ["fixed", "single", "indep"];

/// Named encoder plans accepted by [`ablation_variant`].
pub const PLAN_NAMES: [&str; 4] = ["3intra", "5intra", "3multi", "default"];

fn valid_tokens() -> String {
    MODE_SHORTHANDS
        .iter()
        .chain(Modulation::NAMES.iter())
        .chain(PLAN_NAMES.iter())
        .copied()
        .collect::<Vec<_>>()
        .join(", ")
}

/// `base` with one ablation token applied: a scale-mode shorthand, a
/// modulation name or an encoder plan name. The label is set to the token.
pub fn ablation_variant(base: &RunConfig, token: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let token = token.trim();
    if MODE_SHORTHANDS.contains(&token) {
        cfg.model.modulation = format!("multi-head-{token}").parse()?;
    } else if Modulation::NAMES.contains(&token) {
        cfg.model.modulation = token.parse()?;
    } else if PLAN_NAMES.contains(&token) {
        cfg.model.encoder_plan = token.parse::<EncoderPlan>()?;
    } else {
        return Err(Error::usage(format!(
            "unknown ablation mode {token:?}; valid: {}",
            valid_tokens()
        )));
    }
    cfg.label = Some(token.to_string());
    cfg.validate()?;
    Ok(cfg)
}

pub fn ablation_variants(base: &RunConfig, tokens: &[String]) -> Result<Vec<RunConfig>> {
    if tokens.is_empty() {
        return Err(Error::usage(format!("empty mode list; valid: {}", valid_tokens())));
    }
    tokens.iter().map(|t| ablation_variant(base, t)).collect()
}

/// Outcome of one training run, as used in reports.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub label: String,
    pub hash: String,
    pub seed: u64,
    pub params: usize,
    pub final_eval: EvalResult,
    /// `(epoch, ap50)` per evaluation.
    pub curve: Vec<(usize, f64)>,
    pub run_dir: Option<PathBuf>,
}

impl RunSummary {
    pub fn from_outcome(o: &TrainOutcome) -> Self {
        let cfg = &o.trainer.cfg;
        Self {
            label: cfg.label(),
            hash: cfg.hash(),
            seed: cfg.seed,
            params: o.trainer.store.num_scalars(),
            final_eval: o.final_eval().unwrap_or_default(),
            curve: eval_curve(&o.records).into_iter().map(|(e, r)| (e, r.ap50)).collect(),
            run_dir: o.run_dir.clone(),
        }
    }

    /// 1-based epoch count at which AP50 first reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.curve.iter().find(|(_, a)| *a >= threshold).map(|(e, _)| e + 1)
    }
}

/// Trains `cfg`, writing under `out_root/<label>-s<seed>` when given.
pub fn run(cfg: &RunConfig, out_root: Option<&Path>) -> Result<TrainOutcome> {
    let dir = out_root.map(|r| r.join(format!("{}-s{}", cfg.label(), cfg.seed)));
    train(cfg, dir.as_deref(), None)
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub runs: Vec<RunSummary>,
    /// AP50 level used for epochs-to-threshold.
    pub threshold: f64,
}

impl CompareReport {
    /// Defaults the threshold to the final AP50 of the last run (the
    /// reference).
    pub fn new(runs: Vec<RunSummary>, threshold: Option<f64>) -> Self {
        let threshold = threshold.unwrap_or_else(|| runs.last().map_or(0.0, |r| r.final_eval.ap50));
        Self { runs, threshold }
    }

    pub fn render(&self) -> String {
        let mut s = format!("epochs to AP50 >= {:.4}\n", self.threshold);
        let _ = writeln!(
            s,
            "{:<20} {:<18} {:>6} {:>10} {:>8} {:>8}",
            "label", "config", "seed", "epochs", "AP50", "AP"
        );
        for r in &self.runs {
            let e = r.epochs_to(self.threshold).map_or("-".to_string(), |e| e.to_string());
            let _ = writeln!(
                s,
                "{:<20} {:<18} {:>6} {:>10} {:>8.4} {:>8.4}",
                r.label, r.hash, r.seed, e, r.final_eval.ap50, r.final_eval.ap
            );
        }
        s.push_str("\nAP50 per evaluated epoch\n");
        for r in &self.runs {
            let curve: Vec<String> = r.curve.iter().map(|(_, a)| format!("{a:.3}")).collect();
            let _ = writeln!(s, "{:<20} {}", r.label, curve.join(" "));
        }
        s
    }
}

/// Trains both configs and reports convergence, the second serving as the
/// reference whose final AP50 sets the threshold unless one is given.
pub fn compare(a: &RunConfig, b: &RunConfig, threshold: Option<f64>, out_root: Option<&Path>) -> Result<CompareReport> {
    let mut runs = Vec::with_capacity(2);
    for (i, cfg) in [a, b].into_iter().enumerate() {
        let root = out_root.map(|r| r.join(format!("run{i}")));
        runs.push(RunSummary::from_outcome(&run(cfg, root.as_deref())?));
    }
    Ok(CompareReport::new(runs, threshold))
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    /// Sorted by final AP50, best first; ties keep input order.
    pub rows: Vec<RunSummary>,
}

impl AblationTable {
    pub fn new(mut rows: Vec<RunSummary>) -> Self {
        rows.sort_by(|a, b| b.final_eval.ap50.total_cmp(&a.final_eval.ap50));
        Self { rows }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<4} {:<20} {:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "rank", "mode", "config", "params", "AP50", "AP75", "AP", "AP_S", "AP_L"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let e = &r.final_eval;
            let _ = writeln!(
                s,
                "{:<4} {:<20} {:<18} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                i + 1,
                r.label,
                r.hash,
                r.params,
                e.ap50,
                e.ap75,
                e.ap,
                e.ap_small,
                e.ap_large
            );
        }
        s
    }
}

/// Runs every variant with the base seed and ranks them by final AP50.
pub fn ablate(base: &RunConfig, tokens: &[String], out_root: Option<&Path>) -> Result<AblationTable> {
    let variants = ablation_variants(base, tokens)?;
    let mut rows = Vec::with_capacity(variants.len());
    for cfg in &variants {
        rows.push(RunSummary::from_outcome(&run(cfg, out_root)?));
    }
    Ok(AblationTable::new(rows))
}

/// Tiny model for the end-to-end gradient check: three scales on a 16-pixel
/// canvas, two decoder layers of four queries.
pub fn tiny_gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.ffn_dim = 16;
    cfg.model.decoder_layers = 2;
    cfg.model.queries = 4;
    cfg.model.strides = vec![2, 4, 8];
    cfg.scene.canvas = 16;
    cfg.scene.min_size = 3;
    cfg.scene.max_size = 8;
    cfg.scene.min_objects = 2;
    cfg
}

/// Upper bounds keeping a full finite-difference pass to a few minutes.
pub const GRADCHECK_MAX_PARAMS: usize = 30_000;
pub const GRADCHECK_MAX_TOKENS: usize = 128;

/// Finite-difference check of the full objective (stem, encoder, decoder,
/// matching loss) on one scene of `cfg`'s training split.
pub fn gradcheck_model(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let tokens: usize = cfg.model.strides.iter().map(|r| (cfg.scene.canvas / r).pow(2)).sum();
    if tokens > GRADCHECK_MAX_TOKENS || cfg.model.queries > 8 || cfg.model.decoder_layers > 3 {
        return Err(Error::usage(format!(
            "gradcheck needs a tiny model: at most {GRADCHECK_MAX_TOKENS} tokens, 8 queries and 3 decoder layers (got {tokens}, {}, {})",
            cfg.model.queries, cfg.model.decoder_layers
        )));
    }
    let mut store = ParamStore::new();
    let net = Network::new(
        &mut store,
        &cfg.model,
        cfg.scene.canvas,
        cfg.scene.num_classes,
        cfg.seed,
    )?;
    if store.num_scalars() > GRADCHECK_MAX_PARAMS {
        return Err(Error::usage(format!(
            "gradcheck needs a tiny model: {} parameters exceed {GRADCHECK_MAX_PARAMS}",
            store.num_scalars()
        )));
    }
    let scene = generate_scene(cfg.data.data_seed, &cfg.scene)?;
    let targets = [scene.objects.as_slice()];
    finite_diff_check(
        &mut store,
        |g, s| {
            let out = net.forward(g, s, &[scene.pixels.as_slice()])?;
            Ok(total_loss(g, &out.decoded.detections, &targets, &cfg.loss)?.loss)
        },
        opts,
        |_| true,
    )
}

/// Mean scale-selection weights of final-layer queries matched to objects
/// of one size bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionBySize {
    /// Per bucket (small, medium, large), mean weight per scale, finest first.
    pub mean_alpha: [Vec<f64>; 3],
    pub counts: [usize; 3],
}

/// Matches final-layer predictions to ground truth and averages the
/// matched queries' scale-selection weights by object area tertile.
pub fn selection_by_size(
    network: &Network,
    store: &ParamStore,
    scenes: &[Scene],
    cfg: &RunConfig,
) -> Result<SelectionBySize> {
    let gts: Vec<&[Object]> = scenes.iter().map(|s| s.objects.as_slice()).collect();
    let (t1, t2) = area_tertiles(&gts);
    let scales = cfg.model.strides.len();
    let (q, k) = (cfg.model.queries, cfg.scene.num_classes);
    let mut sums = [vec![0.0; scales], vec![0.0; scales], vec![0.0; scales]];
    let mut counts = [0usize; 3];
    for chunk in scenes.chunks(cfg.train.batch_size) {
        let mut g = Graph::new();
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let dec = network.forward(&mut g, store, &images)?.decoded;
        let (det, layer) = (dec.last(), dec.layers.last().expect("decoder layer"));
        let (boxes, logits, alpha) = (g.value(det.boxes), g.value(det.logits), g.value(layer.selection));
        for (b, scene) in chunk.iter().enumerate() {
            let cost = matching_cost(
                &boxes[b * q * 4..(b + 1) * q * 4],
                &logits[b * q * k..(b + 1) * q * k],
                k,
                &scene.objects,
                &cfg.loss,
            );
            for &(qi, t) in &hungarian(&cost, q, scene.objects.len())?.pairs {
                let area = scene.objects[t].bbox.area();
                let bucket = if area < t1 {
                    0
                } else if area < t2 {
                    1
                } else {
                    2
                };
                let row = (b * q + qi) * scales;
                for (acc, a) in sums[bucket].iter_mut().zip(&alpha[row..row + scales]) {
                    *acc += a;
                }
                counts[bucket] += 1;
            }
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    Ok(SelectionBySize {
        mean_alpha: sums,
        counts,
    })
}

/// Convenience re-export for callers that only hold metrics records.
pub fn epochs_to_threshold(records: &[crate::train::MetricsRecord], threshold: f64) -> Option<usize> {
    epochs_to_ap50(records, threshold)
}
