//! Per-query spatial priors: centers, head offsets, scales, and the
//! Gaussian-like weight map they induce, kept in the log domain.
//!
//! A query feature goes through a two-layer MLP whose two outputs are the
//! pre-sigmoid center `(x, y)`; a sigmoid maps it to normalized image
//! coordinates. With per-head modulation each head adds its own offset (in
//! normalized units, clamped back into `[0, 1]`) and predicts its own scales.
//! Scales are expressed in cells of the finest feature grid and rescaled for
//! coarser grids so a prior spans the same image region at every scale.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::tape::{sigmoid, Graph, GridSpec, Var};
use crate::tensor::ParamStore;

/// Smallest scale magnitude, in grid cells.
pub const SCALE_FLOOR: f64 = 1e-2;

/// How the width/height scales of each Gaussian are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Constant scale 1 on both axes.
    Fixed,
    /// One predicted scalar shared by width and height.
    Single,
    /// Separate predicted width and height scales.
    Independent,
}

/// Whether every attention head sees the same map or its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Shared,
    PerHead,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Fixed => "fixed",
            ScaleMode::Single => "single",
            ScaleMode::Independent => "indep",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ScaleMode::Fixed),
            "single" => Ok(ScaleMode::Single),
            "indep" | "independent" => Ok(ScaleMode::Independent),
            other => Err(Error::config(format!("unknown scale mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub heads: usize,
    pub head_mode: HeadMode,
    pub scale_mode: ScaleMode,
    pub beta: f64,
    /// Initial bias of the scale layer, in finest-grid cells.
    pub scale_init: f64,
}

impl PriorConfig {
    /// Number of distinct maps: `heads` with per-head modulation, else 1.
    pub fn map_heads(&self) -> usize {
        match self.head_mode {
            HeadMode::Shared => 1,
            HeadMode::PerHead => self.heads,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::config("prior needs at least one head"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Learnable layers that map a query feature to its spatial prior.
#[derive(Clone, Debug)]
pub struct PriorPredictor {
    pub cfg: PriorConfig,
    pub center_mlp: Mlp,
    pub offsets: Option<Linear>,
    pub scales: Option<Linear>,
}

impl PriorPredictor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, cfg: PriorConfig) -> Result<Self> {
        cfg.validate()?;
        let center_mlp = Mlp::new(store, rng, &format!("{name}.center_mlp"), &[dim, dim, 2])?;
        let hp = cfg.map_heads();
        // Offsets start at zero so every head begins at the shared center.
        let offsets = match cfg.head_mode {
            HeadMode::PerHead => Some(Linear::constant(store, &format!("{name}.offsets"), dim, 2 * hp, 0.0)?),
            HeadMode::Shared => None,
        };
        let scale_outputs = match cfg.scale_mode {
            ScaleMode::Fixed => 0,
            ScaleMode::Single => hp,
            ScaleMode::Independent => 2 * hp,
        };
        let scales = if scale_outputs > 0 {
            let lin = Linear::new(store, rng, &format!("{name}.scales"), dim, scale_outputs)?;
            store.get_mut(lin.bias).tensor.values_mut().fill(cfg.scale_init);
            Some(lin)
        } else {
            None
        };
        Ok(Self {
            cfg,
            center_mlp,
            offsets,
            scales,
        })
    }

    /// Predicts priors for `query: [rows, dim]`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, query: Var) -> Result<SpatialPrior> {
        let rows = g.shape(query)[0];
        let hp = self.cfg.map_heads();
        let center_logit = self.center_mlp.forward(g, store, query)?;
        let center_norm = g.sigmoid(center_logit);

        let shared = g.reshape(center_norm, &[rows, 1, 2])?;
        let head_centers = match &self.offsets {
            Some(lin) => {
                let tiled = g.expand(shared, &[rows, hp, 2])?;
                let off = lin.forward(g, store, query)?;
                let off = g.reshape(off, &[rows, hp, 2])?;
                let moved = g.add(tiled, off)?;
                g.clamp(moved, 0.0, 1.0)
            }
            None => shared,
        };

        let head_scales = match (&self.scales, self.cfg.scale_mode) {
            (None, _) => g.constant(&[rows, hp, 2], vec![1.0; rows * hp * 2])?,
            (Some(lin), ScaleMode::Single) => {
                let s = lin.forward(g, store, query)?;
                let s = g.abs_floor(s, SCALE_FLOOR);
                let s = g.reshape(s, &[rows, hp, 1])?;
                g.expand(s, &[rows, hp, 2])?
            }
            (Some(lin), _) => {
                let s = lin.forward(g, store, query)?;
                let s = g.abs_floor(s, SCALE_FLOOR);
                g.reshape(s, &[rows, hp, 2])?
            }
        };

        Ok(SpatialPrior {
            center_logit,
            center_norm,
            head_centers,
            head_scales,
            heads: hp,
            beta: self.cfg.beta,
        })
    }
}

/// Graph-resident prior for a block of queries.
#[derive(Clone, Copy, Debug)]
pub struct SpatialPrior {
    /// `[rows, 2]` pre-sigmoid head-shared center.
    pub center_logit: Var,
    /// `[rows, 2]` normalized head-shared center.
    pub center_norm: Var,
    /// `[rows, heads, 2]` normalized per-head centers after offsets.
    pub head_centers: Var,
    /// `[rows, heads, 2]` positive `(s_w, s_h)` in finest-grid cells.
    pub head_scales: Var,
    pub heads: usize,
    pub beta: f64,
}

impl SpatialPrior {
    /// Log weight maps on a `height × width` grid for queries laid out as
    /// `[batch, queries]`, returned as `[batch, heads, queries, height * width]`.
    ///
    /// `scale_mult` converts finest-grid scales to cells of this grid.
    pub fn log_maps(
        &self,
        g: &mut Graph,
        batch: usize,
        queries: usize,
        height: usize,
        width: usize,
        scale_mult: f64,
    ) -> Result<Var> {
        let rows = batch * queries * self.heads;
        let c = g.reshape(self.head_centers, &[rows, 2])?;
        let s = g.reshape(self.head_scales, &[rows, 2])?;
        let grid = GridSpec {
            height,
            width,
            beta: self.beta,
            scale_mult,
        };
        let m = g.log_gaussian_map(c, s, grid)?;
        let m = g.reshape(m, &[batch, queries, self.heads, height * width])?;
        g.swap_axes12(m)
    }

    pub fn values(&self, g: &Graph) -> PriorValues {
        PriorValues {
            center_logit: g.value(self.center_logit).to_vec(),
            center_norm: g.value(self.center_norm).to_vec(),
            head_centers: g.value(self.head_centers).to_vec(),
            head_scales: g.value(self.head_scales).to_vec(),
            heads: self.heads,
            beta: self.beta,
        }
    }
}

/// Plain-value copy of a [`SpatialPrior`], for inspection and dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorValues {
    pub center_logit: Vec<f64>,
    pub center_norm: Vec<f64>,
    pub head_centers: Vec<f64>,
    pub head_scales: Vec<f64>,
    pub heads: usize,
    pub beta: f64,
}

impl PriorValues {
    /// Largest `|sigmoid(center_logit) - center_norm|`.
    pub fn max_sigmoid_gap(&self) -> f64 {
        self.center_logit
            .iter()
            .zip(&self.center_norm)
            .map(|(l, c)| (sigmoid(*l) - c).abs())
            .fold(0.0, f64::max)
    }

    /// Log weight map of one query row and head on a grid, row-major
    /// `[height, width]`.
    pub fn log_map(&self, row: usize, head: usize, height: usize, width: usize, scale_mult: f64) -> Result<Vec<f64>> {
        let k = (row * self.heads + head) * 2;
        log_gaussian_map(
            (self.head_centers[k], self.head_centers[k + 1]),
            (self.head_scales[k], self.head_scales[k + 1]),
            self.beta,
            height,
            width,
            scale_mult,
        )
    }
}

/// Value-level log weight map for a single center and scale pair:
/// `-((i - c_w)^2 / (beta s_w^2) + (j - c_h)^2 / (beta s_h^2))` at every grid
/// point, row-major over `[height, width]`.
pub fn log_gaussian_map(
    center_norm: (f64, f64),
    scale: (f64, f64),
    beta: f64,
    height: usize,
    width: usize,
    scale_mult: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let c = g.constant(&[1, 2], vec![center_norm.0, center_norm.1])?;
    let s = g.constant(&[1, 2], vec![scale.0, scale.1])?;
    let m = g.log_gaussian_map(
        c,
        s,
        GridSpec {
            height,
            width,
            beta,
            scale_mult,
        },
    )?;
    Ok(g.value(m).to_vec())
}

/// Normalized coordinate whose unnormalized position is exactly grid index `i`.
pub fn grid_point_to_norm(i: usize, dim: usize) -> f64 {
    (i as f64 + 0.5) / dim as f64
}

/// Inverse of the center sigmoid.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
