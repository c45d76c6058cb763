//! Transformer decoder: query self-attention, spatially modulated
//! multi-scale co-attention, feed-forward, and the box and class heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_scale_modulated_co_attention, scale_selection, AttentionConfig, MemoryScale, MultiScaleCoAttention,
};
use crate::encoder::{FfnSublayer, SelfAttnSublayer};
use crate::error::{Error, Result};
use crate::features::FeatureMapSet;
use crate::nn::{uniform, LayerNorm, Linear, Mlp};
use crate::prior::{PriorConfig, PriorPredictor, SpatialPrior};
use crate::tape::{Graph, Var};
use crate::tensor::{ParamId, ParamStore};

/// Initial foreground probability of every class logit.
pub const PRIOR_PROB: f64 = 0.01;

/// How box centers are produced from the box MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    /// `sigmoid(MLP(state))`.
    Detr,
    /// The prior's pre-sigmoid center is added to the center channels first.
    Smca,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub queries: usize,
    pub num_classes: usize,
    pub scales: usize,
    /// Spatial modulation; `None` gives plain co-attention.
    pub prior: Option<PriorConfig>,
    pub box_mode: BoxMode,
}

impl DecoderConfig {
    fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.heads, self.dim)?;
        if self.layers == 0 || self.queries == 0 || self.num_classes == 0 || self.scales == 0 {
            return Err(Error::config(
                "decoder layers, queries, classes and scales must be positive",
            ));
        }
        if self.box_mode == BoxMode::Smca && self.prior.is_none() {
            return Err(Error::config("smca box mode requires spatial modulation"));
        }
        if let Some(p) = &self.prior {
            if p.heads != self.heads {
                return Err(Error::config(format!(
                    "prior heads {} differ from attention heads {}",
                    p.heads, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttnSublayer,
    pub cross: MultiScaleCoAttention,
    pub cross_norm: LayerNorm,
    pub select: Linear,
    pub prior: Option<PriorPredictor>,
    pub ffn: FfnSublayer,
}

/// Everything one decoder layer produced.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `[batch, queries, dim]`.
    pub state: Var,
    pub prior: Option<SpatialPrior>,
    /// `[batch * queries, scales]` scale-selection weights.
    pub selection: Var,
    /// Per scale `[batch, heads, queries, tokens]` co-attention weights.
    pub cross_weights: Vec<Var>,
    /// Per scale `[batch, 1 | heads, queries, tokens]` log maps.
    pub log_maps: Vec<Option<Var>>,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let attn = AttentionConfig::new(cfg.heads, cfg.dim)?;
        Ok(Self {
            self_attn: SelfAttnSublayer::new(store, rng, &format!("{name}.self"), attn)?,
            cross: MultiScaleCoAttention::new(store, rng, &format!("{name}.cross"), attn, cfg.scales)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross.norm"), cfg.dim)?,
            select: Linear::new(store, rng, &format!("{name}.select"), cfg.dim, cfg.scales)?,
            prior: cfg
                .prior
                .clone()
                .map(|p| PriorPredictor::new(store, rng, &format!("{name}.prior"), cfg.dim, p))
                .transpose()?,
            ffn: FfnSublayer::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim)?,
        })
    }

    /// One layer over `state: [b, n, c]` with query positions `query_pos`
    /// of the same shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Var,
        query_pos: Var,
        memory: &FeatureMapSet,
    ) -> Result<LayerOutput> {
        let shape = g.shape(state).to_vec();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let h = self.self_attn.forward(g, store, state, Some(query_pos))?;

        let query = g.add(h, query_pos)?;
        let flat = g.reshape(query, &[b * n, c])?;
        let prior = self.prior.as_ref().map(|p| p.predict(g, store, flat)).transpose()?;
        let selection = scale_selection(g, store, &self.select, flat)?;

        let finest = memory.scales[0].ratio as f64;
        let mut log_maps = Vec::with_capacity(memory.scales.len());
        for s in &memory.scales {
            log_maps.push(match &prior {
                Some(p) => Some(p.log_maps(g, b, n, s.height, s.width, finest / s.ratio as f64)?),
                None => None,
            });
        }
        let mem: Vec<MemoryScale> = memory
            .scales
            .iter()
            .map(|s| MemoryScale {
                tokens: s.tokens,
                pos: Some(s.pos),
            })
            .collect();
        let cross = multi_scale_modulated_co_attention(g, store, &self.cross, query, &mem, &log_maps, selection)?;
        let r = g.add(h, cross.out)?;
        let h = self.cross_norm.forward(g, store, r)?;
        let state = self.ffn.forward(g, store, h)?;
        Ok(LayerOutput {
            state,
            prior,
            selection,
            cross_weights: cross.weights,
            log_maps,
        })
    }
}

/// Box and class predictions of one decoder layer, rows ordered
/// `[batch, queries]`.
#[derive(Clone, Copy, Debug)]
pub struct Detections {
    /// `[batch * queries, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[batch * queries, classes]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    pub detections: Vec<Detections>,
}

impl DecoderOutput {
    pub fn last(&self) -> &Detections {
        self.detections.last().expect("decoder has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// `[queries, dim]` learned query embeddings.
    pub query_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub box_mlp: Mlp,
    pub class_head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let query_embed = store.add(
            format!("{name}.query_embed"),
            uniform(rng, &[cfg.queries, cfg.dim], 1.0),
        )?;
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("{name}.layer{i}"), &cfg))
            .collect::<Result<_>>()?;
        let c = cfg.dim;
        let box_mlp = Mlp::new(store, rng, &format!("{name}.box_mlp"), &[c, c, c, 4])?;
        // Zero final layer: initial boxes sit at the prior centers.
        for id in [box_mlp.last().weight, box_mlp.last().bias] {
            store.get_mut(id).tensor.values_mut().fill(0.0);
        }
        let class_head = Linear::new(store, rng, &format!("{name}.class_head"), c, cfg.num_classes)?;
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        store.get_mut(class_head.bias).tensor.values_mut().fill(bias);
        Ok(Self {
            cfg,
            query_embed,
            layers,
            box_mlp,
            class_head,
        })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: &FeatureMapSet) -> Result<DecoderOutput> {
        if memory.scales.len() != self.cfg.scales {
            return Err(Error::dim(
                "decoder memory scales",
                &[memory.scales.len()],
                &[self.cfg.scales],
            ));
        }
        let (b, n, c) = (memory.batch, self.cfg.queries, self.cfg.dim);
        let qe = g.param(store, self.query_embed);
        let qe = g.reshape(qe, &[1, n, c])?;
        let query_pos = g.expand(qe, &[b, n, c])?;
        let mut state = g.zeros(&[b, n, c]);
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut detections = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, store, state, query_pos, memory)?;
            state = out.state;
            let flat = g.reshape(state, &[b * n, c])?;
            let boxes = predict_boxes(g, store, &self.box_mlp, flat, out.prior.as_ref(), self.cfg.box_mode)?;
            let logits = predict_scores(g, store, &self.class_head, flat)?;
            detections.push(Detections { boxes, logits });
            layers.push(out);
        }
        Ok(DecoderOutput { layers, detections })
    }
}

/// Boxes from decoder features `state: [rows, dim]`. In smca mode the
/// prior's pre-sigmoid center is added to the two center channels before
/// the sigmoid.
pub fn predict_boxes(
    g: &mut Graph,
    store: &ParamStore,
    box_mlp: &Mlp,
    state: Var,
    prior: Option<&SpatialPrior>,
    mode: BoxMode,
) -> Result<Var> {
    let pre = box_logits(g, store, box_mlp, state, prior, mode)?;
    Ok(g.sigmoid(pre))
}

/// Pre-sigmoid boxes of [`predict_boxes`].
pub fn box_logits(
    g: &mut Graph,
    store: &ParamStore,
    box_mlp: &Mlp,
    state: Var,
    prior: Option<&SpatialPrior>,
    mode: BoxMode,
) -> Result<Var> {
    let raw = box_mlp.forward(g, store, state)?;
    match mode {
        BoxMode::Detr => Ok(raw),
        BoxMode::Smca => {
            let prior = prior.ok_or_else(|| Error::usage("smca box prediction needs a spatial prior"))?;
            let rows = g.shape(raw)[0];
            let zeros = g.zeros(&[rows, 2]);
            let shift = g.concat(&[prior.center_logit, zeros], 1)?;
            g.add(raw, shift)
        }
    }
}

/// Class logits, one linear layer over decoder features.
pub fn predict_scores(g: &mut Graph, store: &ParamStore, head: &Linear, state: Var) -> Result<Var> {
    head.forward(g, store, state)
}

/// Zeroes the weights and bias of `lin`, e.g. to ablate a sub-layer.
pub fn zero_linear(store: &mut ParamStore, lin: &Linear) {
    for id in [lin.weight, lin.bias] {
        store.get_mut(id).tensor.values_mut().fill(0.0);
    }
}
