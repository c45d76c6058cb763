//! Patch-embedding stem and positional encodings producing the multi-scale
//! token set consumed by the encoder and decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Linear};
use crate::tape::{Graph, Var};
use crate::tensor::{ParamId, ParamStore};

/// Sinusoid temperature.
const TEMPERATURE: f64 = 10_000.0;

/// One scale of encoded visual tokens.
#[derive(Clone, Copy, Debug)]
pub struct FeatureScale {
    /// `[batch, height * width, dim]`, row-major over the grid.
    pub tokens: Var,
    /// `[1, height * width, dim]`, shared across the batch.
    pub pos: Var,
    pub height: usize,
    pub width: usize,
    /// Downsampling ratio relative to the canvas.
    pub ratio: usize,
}

impl FeatureScale {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tokens of every scale, finest first.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub batch: usize,
    pub scales: Vec<FeatureScale>,
}

impl FeatureMapSet {
    pub fn token_counts(&self) -> Vec<usize> {
        self.scales.iter().map(FeatureScale::len).collect()
    }

    pub fn with_tokens(&self, tokens: &[Var]) -> Self {
        debug_assert_eq!(tokens.len(), self.scales.len());
        Self {
            batch: self.batch,
            scales: self
                .scales
                .iter()
                .zip(tokens)
                .map(|(s, &t)| FeatureScale { tokens: t, ..*s })
                .collect(),
        }
    }
}

/// 2-D sinusoidal encoding of a `height × width` grid in normalized
/// coordinates, `[height * width, dim]`: the first half of the channels
/// encodes `y`, the second half `x`, alternating sine and cosine.
pub fn sinusoidal_2d(height: usize, width: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::config(format!(
            "positional encoding needs dim divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let freq: Vec<f64> = (0..half)
        .map(|k| TEMPERATURE.powf((2 * (k / 2)) as f64 / half as f64))
        .collect();
    let encode = |p: f64, out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            let a = p / freq[k];
            *o = if k % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; height * width * dim];
    for j in 0..height {
        for i in 0..width {
            let row = &mut out[(j * width + i) * dim..(j * width + i + 1) * dim];
            let (ys, xs) = row.split_at_mut(half);
            encode((j as f64 + 0.5) / height as f64 * tau, ys);
            encode((i as f64 + 0.5) / width as f64 * tau, xs);
        }
    }
    Ok(out)
}

/// Non-overlapping patch embedding per stride plus per-scale positional
/// encodings (sinusoid plus a learned level embedding).
#[derive(Clone, Debug)]
pub struct Stem {
    pub canvas: usize,
    pub strides: Vec<usize>,
    pub dim: usize,
    pub embed: Vec<Linear>,
    /// `[scales, dim]` learned level embedding.
    pub level: ParamId,
    sinusoids: Vec<Vec<f64>>,
}

impl Stem {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        canvas: usize,
        strides: &[usize],
        dim: usize,
    ) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::config("at least one stride is required"));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "strides must be strictly increasing, got {strides:?}"
            )));
        }
        for &r in strides {
            if r == 0 || !canvas.is_multiple_of(r) {
                return Err(Error::config(format!("canvas {canvas} is not divisible by stride {r}")));
            }
        }
        let mut embed = Vec::with_capacity(strides.len());
        let mut sinusoids = Vec::with_capacity(strides.len());
        for (j, &r) in strides.iter().enumerate() {
            embed.push(Linear::new(store, rng, &format!("stem.s{j}"), r * r, dim)?);
            sinusoids.push(sinusoidal_2d(canvas / r, canvas / r, dim)?);
        }
        let level = store.add("pos.level", uniform(rng, &[strides.len(), dim], 0.1))?;
        Ok(Self {
            canvas,
            strides: strides.to_vec(),
            dim,
            embed,
            level,
            sinusoids,
        })
    }

    pub fn grid(&self, scale: usize) -> usize {
        self.canvas / self.strides[scale]
    }

    /// Embeds a batch of row-major `canvas × canvas` images.
    pub fn featurize(&self, g: &mut Graph, store: &ParamStore, images: &[&[f64]]) -> Result<FeatureMapSet> {
        let n = self.canvas;
        if images.is_empty() {
            return Err(Error::usage("featurize needs at least one image"));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != n * n) {
            return Err(Error::dim("featurize image", &[bad.len()], &[n * n]));
        }
        let batch = images.len();
        let level = g.param(store, self.level);
        let mut scales = Vec::with_capacity(self.strides.len());
        for (j, &r) in self.strides.iter().enumerate() {
            let gs = n / r;
            let mut patches = Vec::with_capacity(batch * gs * gs * r * r);
            for im in images {
                for py in 0..gs {
                    for px in 0..gs {
                        for y in 0..r {
                            let start = (py * r + y) * n + px * r;
                            patches.extend_from_slice(&im[start..start + r]);
                        }
                    }
                }
            }
            let x = g.constant(&[batch, gs * gs, r * r], patches)?;
            let tokens = self.embed[j].forward(g, store, x)?;
            let sin = g.constant(&[1, gs * gs, self.dim], self.sinusoids[j].clone())?;
            let lv = g.slice(level, 0, j, 1)?;
            let lv = g.reshape(lv, &[1, 1, self.dim])?;
            let lv = g.expand(lv, &[1, gs * gs, self.dim])?;
            let pos = g.add(sin, lv)?;
            scales.push(FeatureScale {
                tokens,
                pos,
                height: gs,
                width: gs,
                ratio: r,
            });
        }
        Ok(FeatureMapSet { batch, scales })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_rows_are_distinct_and_bounded() {
        let p = sinusoidal_2d(4, 4, 8).unwrap();
        assert!(p.iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<&[f64]> = p.chunks(8).collect();
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                assert_ne!(rows[a], rows[b]);
            }
        }
        assert!(sinusoidal_2d(4, 4, 6).is_err());
    }

    #[test]
    fn rejects_bad_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            Stem::new(&mut store, &mut rng, 30, &[4], 8),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Stem::new(&mut store, &mut rng, 32, &[4, 2], 8),
            Err(Error::Config(_))
        ));
    }
}
