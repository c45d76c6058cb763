//! Multi-head dot-product attention in its four forms: self-attention,
//! co-attention between object queries and encoder memory, co-attention
//! modulated by log spatial weight maps, and multi-scale modulated
//! co-attention mixed by per-query scale-selection weights.
//!
//! Tensors are batch-major: tokens are `[batch, len, dim]` and attention
//! logits `[batch, heads, queries, keys]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tape::{Graph, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dim: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, dim: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self { heads, dim })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output of an attention call: the aggregated features and the
/// post-softmax weights `[batch, heads, queries, keys]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Scaled dot-product attention over pre-projected `q: [b, n, c]`,
/// `k, v: [b, l, c]`, with an optional additive logit bias
/// `[b, 1 | heads, n, l]`. Returns heads concatenated as `[b, n, c]`.
pub fn scaled_dot_product(
    g: &mut Graph,
    cfg: AttentionConfig,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
) -> Result<Attended> {
    let qh = g.split_heads(q, cfg.heads)?;
    let kh = g.split_heads(k, cfg.heads)?;
    let vh = g.split_heads(v, cfg.heads)?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut logits = g.bmm(qh, kh, false, true, scale)?;
    if let Some(bias) = bias {
        let target = g.shape(logits).to_vec();
        let bs = g.shape(bias).to_vec();
        if bs.len() != 4 || bs[0] != target[0] || bs[2..] != target[2..] {
            return Err(Error::dim("attention bias", &bs, &target));
        }
        let bias = if bs[1] == target[1] {
            bias
        } else {
            g.expand(bias, &target)?
        };
        logits = g.add(logits, bias)?;
    }
    let weights = g.softmax_lastdim(logits)?;
    let heads_out = g.bmm(weights, vh, false, false, 1.0)?;
    let out = g.merge_heads(heads_out)?;
    Ok(Attended { out, weights })
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        let c = cfg.dim;
        Ok(Self {
            cfg,
            q: Linear::new(store, rng, &format!("{name}.q"), c, c)?,
            k: Linear::new(store, rng, &format!("{name}.k"), c, c)?,
            v: Linear::new(store, rng, &format!("{name}.v"), c, c)?,
            o: Linear::new(store, rng, &format!("{name}.o"), c, c)?,
        })
    }
}

fn add_pos(g: &mut Graph, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        None => Ok(x),
        Some(p) => {
            let p = if g.shape(p) == g.shape(x) {
                p
            } else {
                let target = g.shape(x).to_vec();
                g.expand(p, &target)
                    .map_err(|_| Error::dim("positional encoding", g.shape(p), &target))?
            };
            g.add(x, p)
        }
    }
}

/// Self-attention over `tokens: [b, l, c]`; `pos` (same shape, or with a
/// batch axis of 1) is added to the query and key inputs only.
pub fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    tokens: Var,
    pos: Option<Var>,
) -> Result<Attended> {
    let with_pos = add_pos(g, tokens, pos)?;
    let q = attn.q.forward(g, store, with_pos)?;
    let k = attn.k.forward(g, store, with_pos)?;
    let v = attn.v.forward(g, store, tokens)?;
    let a = scaled_dot_product(g, attn.cfg, q, k, v, None)?;
    let out = attn.o.forward(g, store, a.out)?;
    Ok(Attended {
        out,
        weights: a.weights,
    })
}

/// Unmodulated co-attention of `queries: [b, n, c]` over `memory: [b, l, c]`.
pub fn co_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    queries: Var,
    memory: Var,
) -> Result<Attended> {
    modulated_co_attention(g, store, attn, queries, memory, None)
}

/// Co-attention whose logits receive `log_maps` before the softmax.
///
/// `log_maps` is `[b, 1, n, l]` for one map shared by all heads, or
/// `[b, heads, n, l]` for head-specific maps; entries follow memory token
/// order.
pub fn modulated_co_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    queries: Var,
    memory: Var,
    log_maps: Option<Var>,
) -> Result<Attended> {
    let q = attn.q.forward(g, store, queries)?;
    let k = attn.k.forward(g, store, memory)?;
    let v = attn.v.forward(g, store, memory)?;
    let a = scaled_dot_product(g, attn.cfg, q, k, v, log_maps)?;
    let out = attn.o.forward(g, store, a.out)?;
    Ok(Attended {
        out,
        weights: a.weights,
    })
}

/// Per-query softmax weights over feature scales, shared by all heads.
pub fn scale_selection(g: &mut Graph, store: &ParamStore, fc: &Linear, query: Var) -> Result<Var> {
    let logits = fc.forward(g, store, query)?;
    g.softmax_lastdim(logits)
}

/// One scale of encoder memory as seen by the decoder.
#[derive(Clone, Copy, Debug)]
pub struct MemoryScale {
    /// `[b, l, c]` encoded tokens (values are projected from these).
    pub tokens: Var,
    /// Positional encoding added to the key input, broadcastable to tokens.
    pub pos: Option<Var>,
}

/// Co-attention over several feature scales with separate key/value
/// projections per scale. Each scale's modulated attention output is
/// weighted by its selection weight and the results are summed before the
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiScaleCoAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub o: Linear,
}

/// Result of [`multi_scale_modulated_co_attention`].
#[derive(Clone, Debug)]
pub struct MultiScaleAttended {
    pub out: Var,
    /// Post-softmax weights per scale, `[b, heads, n, l_j]`.
    pub weights: Vec<Var>,
}

impl MultiScaleCoAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: AttentionConfig,
        scales: usize,
    ) -> Result<Self> {
        let c = cfg.dim;
        let mut k = Vec::with_capacity(scales);
        let mut v = Vec::with_capacity(scales);
        for j in 0..scales {
            k.push(Linear::new(store, rng, &format!("{name}.k{j}"), c, c)?);
            v.push(Linear::new(store, rng, &format!("{name}.v{j}"), c, c)?);
        }
        Ok(Self {
            cfg,
            q: Linear::new(store, rng, &format!("{name}.q"), c, c)?,
            k,
            v,
            o: Linear::new(store, rng, &format!("{name}.o"), c, c)?,
        })
    }

    pub fn scales(&self) -> usize {
        self.k.len()
    }
}

/// `queries: [b, n, c]`; `selection: [b * n, scales]`; `log_maps[j]` is the
/// optional bias for scale `j` (see [`modulated_co_attention`]).
pub fn multi_scale_modulated_co_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiScaleCoAttention,
    queries: Var,
    memory: &[MemoryScale],
    log_maps: &[Option<Var>],
    selection: Var,
) -> Result<MultiScaleAttended> {
    let s = attn.scales();
    let sel_shape = g.shape(selection).to_vec();
    if memory.len() != s || log_maps.len() != s || sel_shape.get(1) != Some(&s) {
        return Err(Error::dim(
            "multi-scale co-attention scale count",
            &[memory.len(), log_maps.len(), sel_shape.get(1).copied().unwrap_or(0)],
            &[s],
        ));
    }
    let qs = g.shape(queries).to_vec();
    let q = attn.q.forward(g, store, queries)?;
    let mut total: Option<Var> = None;
    let mut weights = Vec::with_capacity(s);
    for j in 0..s {
        let keys_in = add_pos(g, memory[j].tokens, memory[j].pos)?;
        let k = attn.k[j].forward(g, store, keys_in)?;
        let v = attn.v[j].forward(g, store, memory[j].tokens)?;
        let a = scaled_dot_product(g, attn.cfg, q, k, v, log_maps[j])?;
        let alpha = g.slice(selection, 1, j, 1)?;
        let alpha = g.reshape(alpha, &[qs[0], qs[1], 1])?;
        let alpha = g.expand(alpha, &qs)?;
        let weighted = g.mul(a.out, alpha)?;
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
        weights.push(a.weights);
    }
    let out = attn.o.forward(g, store, total.expect("at least one scale"))?;
    Ok(MultiScaleAttended { out, weights })
}
