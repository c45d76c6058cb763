//! Parameterized building blocks: linear layers, MLPs, layer norm, FFN.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Graph, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Values drawn uniformly from `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, values).expect("shape and value count agree")
}

/// Fully connected layer `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound))?;
        let bias = store.add(format!("{name}.b"), uniform(rng, &[fan_out], bound))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Zero weights and a constant bias.
    pub fn constant(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let bias = store.add(format!("{name}.b"), Tensor::full(&[fan_out], bias))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths, input first: `[in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Two-layer MLP, the form used for center prediction.
pub fn mlp2(g: &mut Graph, store: &ParamStore, mlp: &Mlp, x: Var) -> Result<Var> {
    debug_assert_eq!(mlp.layers.len(), 2);
    mlp.forward(g, store, x)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Position-wise feed-forward network `W2 relu(W1 x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, rng, name, &[dim, hidden, dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.mlp.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_is_a_no_op() {
        let mut store = ParamStore::new();
        let lin = Linear::constant(&mut store, "id", 3, 3, 0.0).unwrap();
        let w = store.get_mut(lin.weight).tensor.values_mut();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.constant(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(&mut store, &mut rng, "l", 16, 4).unwrap();
        let bound = 0.25;
        assert!(store.get(lin.weight).tensor.values().iter().all(|v| v.abs() <= bound));
        assert!(store.get(lin.bias).tensor.values().iter().all(|v| v.abs() <= bound));
    }
}
