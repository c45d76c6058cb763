//! `smca`: train, evaluate and ablate spatially modulated co-attention
//! detectors on the synthetic shape task.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smca::checkpoint::Checkpoint;
use smca::config::RunConfig;
use smca::data::{export_scenes, generate_scene, generate_scenes, split_seeds, Split};
use smca::dump::{dump_attention, write_grids};
use smca::eval::{write_query_records, QueryRecord};
use smca::gradcheck::GradCheckOptions;
use smca::harness::{ablate, compare, gradcheck_model, tiny_gradcheck_config, CompareReport, RunSummary};
use smca::model::Network;
use smca::tape::Graph;
use smca::train::{evaluate_model, train, Dataset, Trainer};
use smca::{Error, ParamStore, Result};

#[derive(Parser)]
#[command(
    name = "smca",
    version,
    about = "Spatially modulated co-attention detector on a synthetic shape task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to the configured out_dir or runs/<label>-s<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        checkpoint: PathBuf,
        /// Must match the checkpoint's config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-query detections of every decoder layer to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train two configs and compare convergence. With one config, the
    /// second is the same config without spatial modulation.
    Compare {
        /// One or two configs; the last is the reference.
        #[arg(long, num_args = 1..=2)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// AP50 level for epochs-to-threshold; defaults to the reference's final AP50.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train variants of one config and rank them by final AP50.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes: fixed, single, indep, modulation names,
        /// or encoder plans 3intra, 5intra, 3multi, default.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write co-attention and log-map grids of one scene.
    DumpAttn {
        checkpoint: PathBuf,
        /// Seed of the scene to render.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Must match the checkpoint's config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a dataset split as line-delimited (seed, objects) records.
    ExportData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 2,
                _ => 1,
            })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, out, resume } => {
            let cfg = common.load()?;
            let dir = out
                .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.label(), cfg.seed)));
            let outcome = train(&cfg, Some(&dir), resume.as_deref())?;
            let s = RunSummary::from_outcome(&outcome);
            println!("run {} ({}) -> {}", s.label, s.hash, dir.display());
            println!("{}", CompareReport::new(vec![s], None).render());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            out,
        } => {
            let (cfg, net, store) = restore(&checkpoint, config.as_deref())?;
            let data = Dataset::generate(&cfg)?;
            let r = evaluate_model(&net, &store, &data.eval, &cfg)?;
            println!(
                "AP {:.4}  AP50 {:.4}  AP75 {:.4}  AP_S {:.4}  AP_M {:.4}  AP_L {:.4}",
                r.ap, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large
            );
            if let Some(path) = out {
                let records = query_records(&net, &store, &data, &cfg)?;
                write_query_records(&records, BufWriter::new(File::create(path)?))?;
            }
            Ok(())
        }
        Command::Compare {
            config,
            seed,
            threshold,
            out,
        } => {
            let load = |p: &Path| -> Result<RunConfig> {
                let mut c = RunConfig::load(p)?;
                if let Some(s) = seed {
                    c.seed = s;
                }
                Ok(c)
            };
            let a = match config.first() {
                Some(p) => load(p)?,
                None => Common { config: None, seed }.load()?,
            };
            let b = match config.get(1) {
                Some(p) => load(p)?,
                None => {
                    let mut b = a.clone();
                    b.model.modulation = smca::model::Modulation::None;
                    b.model.box_mode = None;
                    b.label = Some("none".into());
                    b
                }
            };
            let diff: Vec<String> = a
                .diff(&b)
                .into_iter()
                .filter(|l| {
                    !l.starts_with("model.modulation") && !l.starts_with("label") && !l.starts_with("model.box_mode")
                })
                .collect();
            if !diff.is_empty() {
                eprintln!("note: configs differ beyond modulation:\n  {}", diff.join("\n  "));
            }
            let report = compare(&a, &b, threshold, out.as_deref())?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Ablate { common, modes, out } => {
            let cfg = common.load()?;
            let table = ablate(&cfg, &modes, out.as_deref())?;
            print!("{}", table.render());
            Ok(())
        }
        Command::Gradcheck { common, tol } => {
            let mut cfg = match &common.config {
                Some(_) => common.load()?,
                None => tiny_gradcheck_config(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let opts = GradCheckOptions {
                tol,
                ..Default::default()
            };
            let report = gradcheck_model(&cfg, &opts)?;
            println!("{}", report.summary());
            if report.passed() {
                println!("gradcheck passed (max rel err {:.3e})", report.max_rel_err());
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "{} gradient entries exceed tolerance {tol}",
                    report.failure_count()
                )))
            }
        }
        Command::DumpAttn {
            checkpoint,
            scene_seed,
            config,
            out,
        } => {
            let (cfg, net, store) = restore(&checkpoint, config.as_deref())?;
            let scene = generate_scene(scene_seed, &cfg.scene)?;
            let blocks = dump_attention(&net, &store, &scene.pixels)?;
            match out {
                Some(p) => write_grids(&blocks, BufWriter::new(File::create(p)?)),
                None => write_grids(&blocks, std::io::stdout().lock()),
            }
        }
        Command::ExportData { common, split, out } => {
            let cfg = common.load()?;
            let (split, n) = match split {
                SplitArg::Train => (Split::Train, cfg.data.train_scenes),
                SplitArg::Eval => (Split::Eval, cfg.data.eval_scenes),
            };
            let scenes = generate_scenes(&split_seeds(cfg.data.data_seed, split, n), &cfg.scene)?;
            match out {
                Some(p) => export_scenes(&scenes, BufWriter::new(File::create(p)?)),
                None => export_scenes(&scenes, std::io::stdout().lock()),
            }
        }
    }
}

/// Rebuilds the network of a checkpoint, refusing a differing config.
fn restore(path: &Path, config: Option<&Path>) -> Result<(RunConfig, Network, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.run_config()?,
    };
    let t = Trainer::from_checkpoint(&cfg, &ckpt)?;
    Ok((t.cfg, t.network, t.store))
}

fn query_records(net: &Network, store: &ParamStore, data: &Dataset, cfg: &RunConfig) -> Result<Vec<QueryRecord>> {
    let (q, k) = (cfg.model.queries, cfg.scene.num_classes);
    let mut out = Vec::new();
    for chunk in data.eval.chunks(cfg.train.batch_size) {
        let mut g = Graph::new();
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let dec = net.forward(&mut g, store, &images)?.decoded;
        for (layer, det) in dec.detections.iter().enumerate() {
            let (boxes, logits) = (g.value(det.boxes), g.value(det.logits));
            for (b, scene) in chunk.iter().enumerate() {
                for qi in 0..q {
                    let row = b * q + qi;
                    out.push(QueryRecord {
                        scene: scene.seed,
                        layer,
                        query: qi,
                        bbox: smca::boxes::BoxCxcywh::from_slice(&boxes[row * 4..row * 4 + 4]),
                        probs: logits[row * k..(row + 1) * k]
                            .iter()
                            .map(|&z| smca::tape::sigmoid(z))
                            .collect(),
                    });
                }
            }
        }
    }
    Ok(out)
}
