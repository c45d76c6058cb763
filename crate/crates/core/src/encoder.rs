//! Multi-scale transformer encoder built from intra-scale blocks, which
//! attend within each scale, and multi-scale blocks, which attend jointly
//! over the tokens of all scales.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self_attention, AttentionConfig, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::features::FeatureMapSet;
use crate::nn::{FeedForward, LayerNorm};
use crate::tape::{Graph, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Intra,
    Multi,
}

/// Ordered list of encoder blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderPlan {
    blocks: Vec<BlockKind>,
}

impl EncoderPlan {
    pub fn new(blocks: Vec<BlockKind>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("encoder plan needs at least one block"));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[BlockKind] {
        &self.blocks
    }
}

impl Default for EncoderPlan {
    fn default() -> Self {
        "intra,intra,multi,intra,intra".parse().expect("default plan parses")
    }
}

impl FromStr for EncoderPlan {
    type Err = Error;

    /// Accepts a comma-separated block list or one of the named plans
    /// `3intra`, `5intra`, `3multi`.
    fn from_str(s: &str) -> Result<Self> {
        let named = |kind, n| Self::new(vec![kind; n]);
        match s.trim().to_ascii_lowercase().as_str() {
            "3intra" => return named(BlockKind::Intra, 3),
            "5intra" => return named(BlockKind::Intra, 5),
            "3multi" => return named(BlockKind::Multi, 3),
            _ => {}
        }
        let blocks = s
            .split(',')
            .map(|t| match t.trim() {
                "intra" => Ok(BlockKind::Intra),
                "multi" => Ok(BlockKind::Multi),
                other => Err(Error::config(format!(
                    "unknown encoder block {other:?} (expected intra or multi)"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(blocks)
    }
}

impl fmt::Display for EncoderPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .blocks
            .iter()
            .map(|b| match b {
                BlockKind::Intra => "intra",
                BlockKind::Multi => "multi",
            })
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Which sub-layers of an intra-scale block are shared across scales.
/// Each layer norm follows the sub-layer it normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Full,
    Ffn,
    Sa,
    None,
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Sharing::Full),
            "ffn" => Ok(Sharing::Ffn),
            "sa" => Ok(Sharing::Sa),
            "none" => Ok(Sharing::None),
            other => Err(Error::config(format!(
                "unknown sharing mode {other:?} (expected full, ffn, sa, none)"
            ))),
        }
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Full => "full",
            Sharing::Ffn => "ffn",
            Sharing::Sa => "sa",
            Sharing::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub scales: usize,
    pub plan: EncoderPlan,
    pub sharing: Sharing,
}

/// Self-attention sub-layer with its post-norm.
#[derive(Clone, Debug)]
pub struct SelfAttnSublayer {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl SelfAttnSublayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim)?,
        })
    }

    /// `norm(x + SA(x))`, position added to queries and keys.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Option<Var>) -> Result<Var> {
        let a = self_attention(g, store, &self.attn, x, pos)?;
        let r = g.add(x, a.out)?;
        self.norm.forward(g, store, r)
    }
}

/// Feed-forward sub-layer with its post-norm.
#[derive(Clone, Debug)]
pub struct FfnSublayer {
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl FfnSublayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, hidden)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.ffn.forward(g, store, x)?;
        let r = g.add(x, f)?;
        self.norm.forward(g, store, r)
    }
}

/// A post-norm transformer encoder block applied to one token sequence.
#[derive(Clone, Copy, Debug)]
pub struct BlockRef<'a> {
    pub sa: &'a SelfAttnSublayer,
    pub ffn: &'a FfnSublayer,
}

impl BlockRef<'_> {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Option<Var>) -> Result<Var> {
        let h = self.sa.forward(g, store, x, pos)?;
        self.ffn.forward(g, store, h)
    }
}

/// Intra-scale block: one parameter set per sub-layer, or one per scale when
/// that sub-layer is not shared.
#[derive(Clone, Debug)]
pub struct IntraBlock {
    pub sa: Vec<SelfAttnSublayer>,
    pub ffn: Vec<FfnSublayer>,
}

impl IntraBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.heads, cfg.dim)?;
        let n_sa = if matches!(cfg.sharing, Sharing::Full | Sharing::Sa) {
            1
        } else {
            cfg.scales
        };
        let n_ffn = if matches!(cfg.sharing, Sharing::Full | Sharing::Ffn) {
            1
        } else {
            cfg.scales
        };
        let sa = (0..n_sa)
            .map(|j| SelfAttnSublayer::new(store, rng, &format!("{name}.sa{j}"), attn_cfg))
            .collect::<Result<_>>()?;
        let ffn = (0..n_ffn)
            .map(|j| FfnSublayer::new(store, rng, &format!("{name}.ffn{j}"), cfg.dim, cfg.ffn_dim))
            .collect::<Result<_>>()?;
        Ok(Self { sa, ffn })
    }

    /// The block used for scale `j`.
    pub fn for_scale(&self, j: usize) -> BlockRef<'_> {
        BlockRef {
            sa: &self.sa[j.min(self.sa.len() - 1)],
            ffn: &self.ffn[j.min(self.ffn.len() - 1)],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fset: &FeatureMapSet) -> Result<FeatureMapSet> {
        let per_scale = self.sa.len().max(self.ffn.len());
        if per_scale > 1 && per_scale != fset.scales.len() {
            return Err(Error::dim(
                "intra-scale block scales",
                &[fset.scales.len()],
                &[per_scale],
            ));
        }
        let tokens = fset
            .scales
            .iter()
            .enumerate()
            .map(|(j, s)| self.for_scale(j).forward(g, store, s.tokens, Some(s.pos)))
            .collect::<Result<Vec<_>>>()?;
        Ok(fset.with_tokens(&tokens))
    }
}

/// Multi-scale block: joint self-attention over all scales' tokens.
#[derive(Clone, Debug)]
pub struct MultiBlock {
    pub sa: SelfAttnSublayer,
    pub ffn: FfnSublayer,
}

impl MultiBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let attn_cfg = AttentionConfig::new(cfg.heads, cfg.dim)?;
        Ok(Self {
            sa: SelfAttnSublayer::new(store, rng, &format!("{name}.sa"), attn_cfg)?,
            ffn: FfnSublayer::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim)?,
        })
    }

    pub fn as_block(&self) -> BlockRef<'_> {
        BlockRef {
            sa: &self.sa,
            ffn: &self.ffn,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fset: &FeatureMapSet) -> Result<FeatureMapSet> {
        let toks: Vec<Var> = fset.scales.iter().map(|s| s.tokens).collect();
        let pos: Vec<Var> = fset.scales.iter().map(|s| s.pos).collect();
        let (x, p) = if toks.len() == 1 {
            (toks[0], pos[0])
        } else {
            (g.concat(&toks, 1)?, g.concat(&pos, 1)?)
        };
        let y = self.as_block().forward(g, store, x, Some(p))?;
        let mut out = Vec::with_capacity(toks.len());
        let mut start = 0;
        for s in &fset.scales {
            out.push(if toks.len() == 1 {
                y
            } else {
                g.slice(y, 1, start, s.len())?
            });
            start += s.len();
        }
        Ok(fset.with_tokens(&out))
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Intra(IntraBlock),
    Multi(MultiBlock),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: EncoderConfig) -> Result<Self> {
        AttentionConfig::new(cfg.heads, cfg.dim)?;
        let blocks = cfg
            .plan
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let bname = format!("{name}.b{i}");
                Ok(match kind {
                    BlockKind::Intra => EncoderBlock::Intra(IntraBlock::new(store, rng, &bname, &cfg)?),
                    BlockKind::Multi => EncoderBlock::Multi(MultiBlock::new(store, rng, &bname, &cfg)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, blocks })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, fset: &FeatureMapSet) -> Result<FeatureMapSet> {
        let mut cur = fset.clone();
        for block in &self.blocks {
            cur = match block {
                EncoderBlock::Intra(b) => b.forward(g, store, &cur)?,
                EncoderBlock::Multi(b) => b.forward(g, store, &cur)?,
            };
        }
        Ok(cur)
    }
}
