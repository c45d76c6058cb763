//! Deterministic training loop with metrics streams, checkpoints and resume.
//!
//! A run directory holds:
//!
//! - `config.toml`: the validated run configuration
//! - `meta.json`: crate version, config hash and seed
//! - `metrics.jsonl`: one [`MetricsRecord`] per optimizer step
//! - `timing.jsonl`: wall time per step, kept apart so that metrics are
//!   bit-reproducible
//! - `last.ckpt`, `best.ckpt` (highest AP50), `final.ckpt`

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_scenes, split_seeds, Object, Scene, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, select_detections, Detection, EvalResult};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::Network;
use crate::tape::Graph;
use crate::tensor::ParamStore;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Training and evaluation scenes of a run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let seeds = |split, n| split_seeds(cfg.data.data_seed, split, n);
        Ok(Self {
            train: generate_scenes(&seeds(Split::Train, cfg.data.train_scenes), &cfg.scene)?,
            eval: generate_scenes(&seeds(Split::Eval, cfg.data.eval_scenes), &cfg.scene)?,
        })
    }
}

/// One optimizer step. `eval` is set on the last step of evaluated epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 0-based epoch.
    pub epoch: usize,
    /// 1-based global step.
    pub step: u64,
    pub label: String,
    pub lr: f64,
    /// Final decoder layer.
    pub loss: LossBreakdown,
    /// Objective actually minimized, including auxiliary layers.
    pub objective: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TimingRecord {
    step: u64,
    seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub label: String,
}

/// Model, parameters and optimizer of a run in progress.
pub struct Trainer {
    pub cfg: RunConfig,
    pub network: Network,
    pub store: ParamStore,
    pub opt: crate::optim::AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_ap50: f64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let network = Network::new(
            &mut store,
            &cfg.model,
            cfg.scene.canvas,
            cfg.scene.num_classes,
            cfg.seed,
        )?;
        let opt = crate::optim::AdamW::new(cfg.optim.clone(), &store);
        Ok(Self {
            cfg: cfg.clone(),
            network,
            store,
            opt,
            epoch: 0,
            step: 0,
            best_ap50: f64::NEG_INFINITY,
        })
    }

    /// Restores a run from a checkpoint written with the same config.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let saved = ckpt.run_config()?;
        let diff = saved.diff(cfg);
        if !diff.is_empty() {
            return Err(Error::usage(format!(
                "config differs from the checkpoint's:\n  {}",
                diff.join("\n  ")
            )));
        }
        let mut t = Self::new(cfg)?;
        ckpt.restore_params(&mut t.store)?;
        if ckpt.optimizer.is_some() {
            ckpt.restore_optimizer(&mut t.opt)?;
        }
        t.epoch = ckpt.epoch as usize;
        t.step = ckpt.step;
        t.best_ap50 = ckpt.best_ap50;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.cfg,
            self.epoch as u64,
            self.step,
            self.best_ap50,
            &self.store,
            Some(&self.opt),
        )
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    /// Bandwidth for a 0-based epoch.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let s = &self.cfg.train.beta_schedule;
        s.get(epoch).or(s.last()).copied().unwrap_or(self.cfg.model.beta)
    }

    /// Training order of one epoch, a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One gradient step on a batch of scenes.
    pub fn train_step(&mut self, batch: &[&Scene]) -> Result<(LossBreakdown, f64, f64)> {
        let mut g = Graph::new();
        let images: Vec<&[f64]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
        let targets: Vec<&[Object]> = batch.iter().map(|s| s.objects.as_slice()).collect();
        let out = self.network.forward(&mut g, &self.store, &images)?;
        let loss = total_loss(&mut g, &out.decoded.detections, &targets, &self.cfg.loss)?;
        let objective = g.value(loss.loss)[0];
        g.backward(loss.loss)?;
        g.accumulate_param_grads(&mut self.store);
        let norm = self.opt.step(&mut self.store)?;
        self.step += 1;
        Ok((loss.last(), objective, norm))
    }

    /// Runs the next epoch, calling `sink` after every step.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        mut sink: impl FnMut(&MetricsRecord, f64) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let epoch = self.epoch;
        let t = &self.cfg.train;
        if epoch >= t.drop_epoch() {
            self.opt.drop_lr();
        }
        let (epochs, eval_every, batch_size) = (t.epochs, t.eval_every, t.batch_size);
        self.network.set_beta(self.beta_at(epoch))?;
        let order = self.epoch_order(epoch, data.train.len());
        let batches: Vec<&[usize]> = order.chunks(batch_size).collect();
        let evaluate_now = (epoch + 1).is_multiple_of(eval_every) || epoch + 1 == epochs;
        let label = self.cfg.label();
        let mut records = Vec::with_capacity(batches.len());
        for (i, idx) in batches.iter().enumerate() {
            let start = Instant::now();
            let batch: Vec<&Scene> = idx.iter().map(|&k| &data.train[k]).collect();
            let lr = self.opt.current_lr();
            let (loss, objective, grad_norm) = self.train_step(&batch)?;
            let eval = if evaluate_now && i + 1 == batches.len() {
                let r = evaluate_model(&self.network, &self.store, &data.eval, &self.cfg)?;
                Some(r)
            } else {
                None
            };
            let rec = MetricsRecord {
                epoch,
                step: self.step,
                label: label.clone(),
                lr,
                loss,
                objective,
                grad_norm,
                eval,
            };
            sink(&rec, start.elapsed().as_secs_f64())?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }
}

/// Detections of the final decoder layer for each scene.
pub fn predict(
    network: &Network,
    store: &ParamStore,
    scenes: &[Scene],
    cfg: &RunConfig,
) -> Result<Vec<Vec<Detection>>> {
    let classes = cfg.scene.num_classes;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.train.batch_size) {
        let mut g = Graph::new();
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let dec = network.forward(&mut g, store, &images)?.decoded;
        let last = dec.last();
        let (boxes, logits) = (g.value(last.boxes), g.value(last.logits));
        let q = cfg.model.queries;
        for b in 0..chunk.len() {
            out.push(select_detections(
                &boxes[b * q * 4..(b + 1) * q * 4],
                &logits[b * q * classes..(b + 1) * q * classes],
                classes,
                &cfg.eval,
            ));
        }
    }
    Ok(out)
}

pub fn evaluate_model(network: &Network, store: &ParamStore, scenes: &[Scene], cfg: &RunConfig) -> Result<EvalResult> {
    let dets = predict(network, store, scenes, cfg)?;
    let gts: Vec<&[Object]> = scenes.iter().map(|s| s.objects.as_slice()).collect();
    evaluate(&dets, &gts)
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Every record of the run, including those before a resume.
    pub records: Vec<MetricsRecord>,
    pub trainer: Trainer,
    pub data: Dataset,
    pub run_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<EvalResult> {
        self.records.iter().rev().find_map(|r| r.eval)
    }
}

/// Trains `cfg` to completion. With `out`, writes a run directory; with
/// `resume`, continues from a checkpoint whose config must equal `cfg`.
pub fn train(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let data = Dataset::generate(cfg)?;
    let mut run = match out {
        Some(dir) => Some(RunDir::open(dir, cfg, trainer.step, resume.is_some())?),
        None => None,
    };
    let mut records = match &run {
        Some(r) => r.previous.clone(),
        None => Vec::new(),
    };
    while !trainer.finished() {
        let epoch_records = trainer.run_epoch(&data, |rec, secs| match &mut run {
            Some(r) => r.append(rec, secs),
            None => Ok(()),
        })?;
        let ap50 = epoch_records.last().and_then(|r| r.eval).map(|e| e.ap50);
        let improved = ap50.is_some_and(|a| a > trainer.best_ap50);
        if let Some(a) = ap50.filter(|_| improved) {
            trainer.best_ap50 = a;
        }
        records.extend(epoch_records);
        if let Some(r) = &mut run {
            r.flush()?;
            let ckpt = trainer.checkpoint();
            ckpt.save(&r.dir.join("last.ckpt"))?;
            if improved {
                ckpt.save(&r.dir.join("best.ckpt"))?;
            }
        }
    }
    if let Some(r) = &mut run {
        trainer.checkpoint().save(&r.dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        records,
        trainer,
        data,
        run_dir: run.map(|r| r.dir),
    })
}

struct RunDir {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    previous: Vec<MetricsRecord>,
}

impl RunDir {
    fn open(dir: &Path, cfg: &RunConfig, step: u64, resuming: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
        let meta = RunMeta {
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            label: cfg.label(),
        };
        let meta = serde_json::to_string_pretty(&meta).map_err(|e| Error::format("run meta", e.to_string()))?;
        std::fs::write(dir.join("meta.json"), meta + "\n")?;
        let metrics_path = dir.join("metrics.jsonl");
        let previous = if resuming && metrics_path.exists() {
            read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect()
        } else {
            Vec::new()
        };
        // Rewrite the stream so that steps past the checkpoint are dropped.
        let mut metrics = BufWriter::new(File::create(&metrics_path)?);
        for r in &previous {
            write_json_line(&mut metrics, r)?;
        }
        let timing = OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(dir.join("timing.jsonl"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            timing: BufWriter::new(timing),
            previous,
        })
    }

    fn append(&mut self, rec: &MetricsRecord, seconds: f64) -> Result<()> {
        write_json_line(&mut self.metrics, rec)?;
        write_json_line(
            &mut self.timing,
            &TimingRecord {
                step: rec.step,
                seconds,
            },
        )
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

fn write_json_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::format("metrics", e.to_string()))?;
    writeln!(w, "{line}")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format("metrics", e.to_string()))?);
    }
    Ok(out)
}

/// First epoch (1-based count) whose evaluation reaches `threshold` AP50.
pub fn epochs_to_ap50(records: &[MetricsRecord], threshold: f64) -> Option<usize> {
    records
        .iter()
        .filter_map(|r| r.eval.map(|e| (r.epoch, e.ap50)))
        .find(|&(_, a)| a >= threshold)
        .map(|(e, _)| e + 1)
}

/// `(epoch, eval)` for every evaluated epoch.
pub fn eval_curve(records: &[MetricsRecord]) -> Vec<(usize, EvalResult)> {
    records.iter().filter_map(|r| r.eval.map(|e| (r.epoch, e))).collect()
}
