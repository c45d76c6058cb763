//! Run configuration: one TOML document with a flat section per concern.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! dim = 16
//! modulation = "multi-head-indep"
//! encoder_plan = "intra,intra,multi,intra,intra"
//!
//! [train]
//! epochs = 40
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::features::sinusoidal_2d;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Base seed of both splits; independent of the run seed.
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            eval_scenes: 200,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch (0-based) from which the reduced learning rate applies;
    /// defaults to 80% of `epochs`.
    pub lr_drop_epoch: Option<usize>,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Per-epoch bandwidth table; the last entry persists. Empty keeps
    /// `model.beta` throughout.
    pub beta_schedule: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr_drop_epoch: None,
            eval_every: 1,
            beta_schedule: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn drop_epoch(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(self.epochs * 4 / 5)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Name used in reports; defaults to the modulation mode.
    pub label: Option<String>,
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.model.modulation.to_string())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Checks every constraint that would otherwise fail mid-run.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.heads == 0 || !m.dim.is_multiple_of(m.heads) {
            return Err(Error::config(format!(
                "model dim {} is not divisible by {} heads",
                m.dim, m.heads
            )));
        }
        sinusoidal_2d(1, 1, m.dim)?;
        if m.ffn_dim == 0 || m.decoder_layers == 0 || m.queries == 0 {
            return Err(Error::config("ffn_dim, decoder_layers and queries must be positive"));
        }
        if m.strides.is_empty() || m.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "strides must be non-empty and increasing, got {:?}",
                m.strides
            )));
        }
        for &r in &m.strides {
            if r == 0 || !self.scene.canvas.is_multiple_of(r) {
                return Err(Error::config(format!(
                    "canvas {} is not divisible by stride {r}",
                    self.scene.canvas
                )));
            }
        }
        if !(m.beta > 0.0) || self.train.beta_schedule.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::config("beta values must be positive"));
        }
        if m.box_mode == Some(crate::decoder::BoxMode::Smca) && m.modulation == crate::model::Modulation::None {
            return Err(Error::config("smca box mode requires spatial modulation"));
        }
        self.scene.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_every == 0 {
            return Err(Error::config("epochs, batch_size and eval_every must be positive"));
        }
        if t.drop_epoch() > t.epochs {
            return Err(Error::config(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                t.drop_epoch(),
                t.epochs
            )));
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::config("train_scenes and eval_scenes must be positive"));
        }
        Ok(())
    }

    /// `section.key = value` lines that differ between two configs.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (flatten(self), flatten(other));
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "(unset)".into());
                format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k)))
            })
            .collect()
    }
}

fn flatten(cfg: &RunConfig) -> BTreeMap<String, String> {
    let value = toml::Value::try_from(cfg).expect("run config converts");
    let mut out = BTreeMap::new();
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            match v {
                toml::Value::Table(inner) => {
                    for (ik, iv) in inner {
                        out.insert(format!("{k}.{ik}"), iv.to_string());
                    }
                }
                other => {
                    out.insert(k, other.to_string());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[model]\nmodulation = \"none\"\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.model.dim, ModelConfig::default().dim);
        assert_eq!(cfg.label(), "none");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[model]\nheads = 3\n",
            "[model]\nstrides = [4, 5]\n",
            "[model]\nmodulation = \"sideways\"\n",
            "[train]\nepochs = 0\n",
            "[train]\nepochs = 5\nlr_drop_epoch = 9\n",
            "[scene]\nmin_size = 40\nmax_size = 50\n",
            "[model]\nbeta = 0.0\n",
            "bogus = 1\n",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn diff_names_changed_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.model.beta = 2.0;
        b.seed = 5;
        let d = a.diff(&b);
        assert_eq!(d.len(), 2, "{d:?}");
        assert!(d.iter().any(|l| l.starts_with("model.beta")));
        assert!(a.diff(&a).is_empty());
        assert_ne!(a.hash(), b.hash());
    }
}
