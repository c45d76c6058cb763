//! Full detector: patch stem, multi-scale encoder, modulated decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::decoder::{BoxMode, Decoder, DecoderConfig, DecoderOutput};
use crate::encoder::{Encoder, EncoderConfig, EncoderPlan, Sharing};
use crate::error::{Error, Result};
use crate::features::{FeatureMapSet, Stem};
use crate::prior::{HeadMode, PriorConfig, ScaleMode};
use crate::tape::Graph;
use crate::tensor::ParamStore;

/// Spatial modulation of the decoder co-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    None,
    Smca { head: HeadMode, scale: ScaleMode },
}

impl Modulation {
    pub const NAMES: [&'static str; 7] = [
        "none",
        "head-shared-fixed",
        "head-shared-single",
        "head-shared-indep",
        "multi-head-fixed",
        "multi-head-single",
        "multi-head-indep",
    ];
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulation::None => f.write_str("none"),
            Modulation::Smca { head, scale } => {
                let h = match head {
                    HeadMode::Shared => "head-shared",
                    HeadMode::PerHead => "multi-head",
                };
                write!(f, "{h}-{scale}")
            }
        }
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            Error::usage(format!(
                "unknown modulation {s:?}; valid: {}",
                Modulation::NAMES.join(", ")
            ))
        };
        if s == "none" {
            return Ok(Modulation::None);
        }
        let (head, rest) = if let Some(r) = s.strip_prefix("head-shared-") {
            (HeadMode::Shared, r)
        } else if let Some(r) = s.strip_prefix("multi-head-") {
            (HeadMode::PerHead, r)
        } else {
            return Err(unknown());
        };
        let scale = rest.parse().map_err(|_| unknown())?;
        Ok(Modulation::Smca { head, scale })
    }
}

impl Serialize for Modulation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Modulation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn ser_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn de_parse<'de, T: FromStr<Err = Error>, D: Deserializer<'de>>(d: D) -> std::result::Result<T, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// Patch strides of the stem, finest first; one feature scale each.
    pub strides: Vec<usize>,
    #[serde(serialize_with = "ser_display", deserialize_with = "de_parse")]
    pub encoder_plan: EncoderPlan,
    pub sharing: Sharing,
    pub modulation: Modulation,
    /// Bandwidth of the Gaussian-like weight maps.
    pub beta: f64,
    /// Initial scale-layer bias, in finest-grid cells.
    pub scale_init: f64,
    /// Defaults to `smca` with modulation and `detr` without.
    pub box_mode: Option<BoxMode>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            ffn_dim: 32,
            decoder_layers: 3,
            queries: 16,
            strides: vec![4, 8, 16],
            encoder_plan: EncoderPlan::default(),
            sharing: Sharing::Full,
            modulation: Modulation::Smca {
                head: HeadMode::PerHead,
                scale: ScaleMode::Independent,
            },
            beta: 1.0,
            scale_init: 2.0,
            box_mode: None,
        }
    }
}

impl ModelConfig {
    pub fn effective_box_mode(&self) -> BoxMode {
        self.box_mode.unwrap_or(match self.modulation {
            Modulation::None => BoxMode::Detr,
            Modulation::Smca { .. } => BoxMode::Smca,
        })
    }

    fn prior(&self) -> Option<PriorConfig> {
        match self.modulation {
            Modulation::None => None,
            Modulation::Smca { head, scale } => Some(PriorConfig {
                heads: self.heads,
                head_mode: head,
                scale_mode: scale,
                beta: self.beta,
                scale_init: self.scale_init,
            }),
        }
    }
}

/// The modules of a detector; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Stem,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Encoded features and per-layer decoder output of one batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub memory: FeatureMapSet,
    pub decoded: DecoderOutput,
}

impl Network {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        canvas: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(cfg.beta > 0.0) {
            return Err(Error::config(format!("beta must be positive, got {}", cfg.beta)));
        }
        if !(cfg.scale_init.abs() >= crate::prior::SCALE_FLOOR) {
            return Err(Error::config(
                "scale_init must be at least the scale floor in magnitude",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem::new(store, &mut rng, canvas, &cfg.strides, cfg.dim)?;
        let encoder = Encoder::new(
            store,
            &mut rng,
            "encoder",
            EncoderConfig {
                dim: cfg.dim,
                heads: cfg.heads,
                ffn_dim: cfg.ffn_dim,
                scales: cfg.strides.len(),
                plan: cfg.encoder_plan.clone(),
                sharing: cfg.sharing,
            },
        )?;
        let decoder = Decoder::new(
            store,
            &mut rng,
            "decoder",
            DecoderConfig {
                dim: cfg.dim,
                heads: cfg.heads,
                ffn_dim: cfg.ffn_dim,
                layers: cfg.decoder_layers,
                queries: cfg.queries,
                num_classes,
                scales: cfg.strides.len(),
                prior: cfg.prior(),
                box_mode: cfg.effective_box_mode(),
            },
        )?;
        Ok(Self { stem, encoder, decoder })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&[f64]]) -> Result<ModelOutput> {
        let feats = self.stem.featurize(g, store, images)?;
        let memory = self.encoder.encode(g, store, &feats)?;
        let decoded = self.decoder.decode(g, store, &memory)?;
        Ok(ModelOutput { memory, decoded })
    }

    /// Sets the weight-map bandwidth of every decoder layer.
    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta > 0.0) {
            return Err(Error::config(format!("beta must be positive, got {beta}")));
        }
        for layer in &mut self.decoder.layers {
            if let Some(p) = &mut layer.prior {
                p.cfg.beta = beta;
            }
        }
        Ok(())
    }
}
