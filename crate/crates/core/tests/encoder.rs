//! Encoder blocks: a loop reference for one block, cross-scale influence,
//! weight sharing and gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smca::encoder::{
    BlockKind, Encoder, EncoderConfig, EncoderPlan, FfnSublayer, IntraBlock, MultiBlock, SelfAttnSublayer, Sharing,
};
use smca::features::{FeatureMapSet, FeatureScale};
use smca::gradcheck::{finite_diff_check, GradCheckOptions};
use smca::nn::{LayerNorm, Linear};
use smca::{Graph, ParamStore};

const DIM: usize = 8;
const HEADS: usize = 2;
const FFN: usize = 12;

fn cfg(scales: usize, plan: &str, sharing: Sharing) -> EncoderConfig {
    EncoderConfig {
        dim: DIM,
        heads: HEADS,
        ffn_dim: FFN,
        scales,
        plan: plan.parse().unwrap(),
        sharing,
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Raw per-scale tokens and positions, `(h, w)` grids.
struct Inputs {
    grids: Vec<(usize, usize)>,
    tokens: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
}

impl Inputs {
    fn random(rng: &mut ChaCha8Rng, grids: &[(usize, usize)]) -> Self {
        Self {
            grids: grids.to_vec(),
            tokens: grids.iter().map(|(h, w)| rand_vec(rng, h * w * DIM)).collect(),
            pos: grids.iter().map(|(h, w)| rand_vec(rng, h * w * DIM)).collect(),
        }
    }

    fn build(&self, g: &mut Graph) -> FeatureMapSet {
        let scales = self
            .grids
            .iter()
            .enumerate()
            .map(|(j, &(h, w))| FeatureScale {
                tokens: g.constant(&[1, h * w, DIM], self.tokens[j].clone()).unwrap(),
                pos: g.constant(&[1, h * w, DIM], self.pos[j].clone()).unwrap(),
                height: h,
                width: w,
                ratio: 1 << j,
            })
            .collect();
        FeatureMapSet { batch: 1, scales }
    }
}

fn outputs(g: &Graph, f: &FeatureMapSet) -> Vec<Vec<f64>> {
    f.scales.iter().map(|s| g.value(s.tokens).to_vec()).collect()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.tensor.values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

// Loop references.

fn ref_linear(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight).tensor.values();
    let b = store.get(lin.bias).tensor.values();
    let rows = x.len() / lin.fan_in;
    let mut out = vec![0.0; rows * lin.fan_out];
    for r in 0..rows {
        for o in 0..lin.fan_out {
            out[r * lin.fan_out + o] = b[o]
                + (0..lin.fan_in)
                    .map(|i| x[r * lin.fan_in + i] * w[i * lin.fan_out + o])
                    .sum::<f64>();
        }
    }
    out
}

fn ref_norm(store: &ParamStore, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let gamma = store.get(ln.gamma).tensor.values();
    let beta = store.get(ln.beta).tensor.values();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(DIM) {
        let mean = row.iter().sum::<f64>() / DIM as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / DIM as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn ref_block(store: &ParamStore, sa: &SelfAttnSublayer, ffn: &FfnSublayer, x: &[f64], pos: &[f64]) -> Vec<f64> {
    let n = x.len() / DIM;
    let d = DIM / HEADS;
    let xp = add(x, pos);
    let q = ref_linear(store, &sa.attn.q, &xp);
    let k = ref_linear(store, &sa.attn.k, &xp);
    let v = ref_linear(store, &sa.attn.v, x);
    let mut heads_out = vec![0.0; n * DIM];
    for h in 0..HEADS {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d)
                        .map(|t| q[i * DIM + h * d + t] * k[j * DIM + h * d + t])
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                heads_out[i * DIM + h * d + t] = (0..n).map(|j| e[j] / z * v[j * DIM + h * d + t]).sum();
            }
        }
    }
    let a = ref_linear(store, &sa.attn.o, &heads_out);
    let h1 = ref_norm(store, &sa.norm, &add(x, &a));
    let layers = &ffn.ffn.mlp.layers;
    let hidden: Vec<f64> = ref_linear(store, &layers[0], &h1)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let f = ref_linear(store, &layers[1], &hidden);
    ref_norm(store, &ffn.norm, &add(&h1, &f))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn intra_block_matches_loop_reference_per_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sharing in [Sharing::Full, Sharing::None, Sharing::Ffn, Sharing::Sa] {
        let mut store = ParamStore::new();
        let c = cfg(2, "intra", sharing);
        let block = IntraBlock::new(&mut store, &mut rng, "b", &c).unwrap();
        randomize(&mut store, &mut rng);
        let inputs = Inputs::random(&mut rng, &[(3, 3), (2, 1)]);
        let mut g = Graph::new();
        let fset = inputs.build(&mut g);
        let out = {
            let o = block.forward(&mut g, &store, &fset).unwrap();
            outputs(&g, &o)
        };
        for j in 0..2 {
            let r = block.for_scale(j);
            let expect = ref_block(&store, r.sa, r.ffn, &inputs.tokens[j], &inputs.pos[j]);
            assert!(close(&out[j], &expect, 1e-10), "{sharing} scale {j}");
        }
    }
}

#[test]
fn multi_block_matches_reference_on_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let block = MultiBlock::new(&mut store, &mut rng, "m", &cfg(2, "multi", Sharing::Full)).unwrap();
    randomize(&mut store, &mut rng);
    let inputs = Inputs::random(&mut rng, &[(2, 2), (1, 2)]);
    let mut g = Graph::new();
    let fset = inputs.build(&mut g);
    let out = {
        let o = block.forward(&mut g, &store, &fset).unwrap();
        outputs(&g, &o)
    };
    let joint = ref_block(
        &store,
        &block.sa,
        &block.ffn,
        &[inputs.tokens[0].clone(), inputs.tokens[1].clone()].concat(),
        &[inputs.pos[0].clone(), inputs.pos[1].clone()].concat(),
    );
    assert!(close(&out[0], &joint[..4 * DIM], 1e-10));
    assert!(close(&out[1], &joint[4 * DIM..], 1e-10));
    // Token counts per scale are conserved.
    assert_eq!(out.iter().map(|o| o.len() / DIM).collect::<Vec<_>>(), vec![4, 2]);
}

#[test]
fn single_scale_multi_equals_intra_with_same_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let multi = MultiBlock::new(&mut store, &mut rng, "m", &cfg(1, "multi", Sharing::Full)).unwrap();
    randomize(&mut store, &mut rng);
    let intra = IntraBlock {
        sa: vec![multi.sa.clone()],
        ffn: vec![multi.ffn.clone()],
    };
    let inputs = Inputs::random(&mut rng, &[(3, 2)]);
    let mut g = Graph::new();
    let fset = inputs.build(&mut g);
    let a = {
        let o = multi.forward(&mut g, &store, &fset).unwrap();
        outputs(&g, &o)
    };
    let b = {
        let o = intra.forward(&mut g, &store, &fset).unwrap();
        outputs(&g, &o)
    };
    assert_eq!(a, b);
}

/// Largest change of each output scale when scale `src`'s tokens move.
fn cross_influence(encoder: &Encoder, store: &ParamStore, inputs: &Inputs, src: usize) -> Vec<f64> {
    let run = |inp: &Inputs| {
        let mut g = Graph::new();
        let f = inp.build(&mut g);
        {
            let o = encoder.encode(&mut g, store, &f).unwrap();
            outputs(&g, &o)
        }
    };
    let base = run(inputs);
    let mut bumped = Inputs {
        grids: inputs.grids.clone(),
        tokens: inputs.tokens.clone(),
        pos: inputs.pos.clone(),
    };
    for v in bumped.tokens[src].iter_mut().step_by(3) {
        *v += 1e-3;
    }
    let moved = run(&bumped);
    base.iter()
        .zip(&moved)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect()
}

#[test]
fn intra_blocks_never_mix_scales_multi_blocks_do() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = Inputs::random(&mut rng, &[(2, 2), (2, 1), (1, 1)]);
    for sharing in [Sharing::Full, Sharing::None] {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "e", cfg(3, "3intra", sharing)).unwrap();
        for src in 0..3 {
            let infl = cross_influence(&enc, &store, &inputs, src);
            for (dst, &d) in infl.iter().enumerate() {
                if dst == src {
                    assert!(d > 1e-6, "self influence vanished");
                } else {
                    assert_eq!(d, 0.0, "intra {sharing}: scale {src} moved scale {dst}");
                }
            }
        }
    }
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, "e", cfg(3, "multi", Sharing::Full)).unwrap();
    for src in 0..3 {
        let infl = cross_influence(&enc, &store, &inputs, src);
        assert!(infl.iter().all(|&d| d > 1e-8), "multi: {infl:?}");
    }
}

#[test]
fn shared_intra_blocks_commute_with_scale_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, "e", cfg(3, "3intra", Sharing::Full)).unwrap();
    let inputs = Inputs::random(&mut rng, &[(2, 2), (3, 1), (1, 2)]);
    let perm = [2, 0, 1];
    let permuted = Inputs {
        grids: perm.iter().map(|&j| inputs.grids[j]).collect(),
        tokens: perm.iter().map(|&j| inputs.tokens[j].clone()).collect(),
        pos: perm.iter().map(|&j| inputs.pos[j].clone()).collect(),
    };
    let run = |inp: &Inputs| {
        let mut g = Graph::new();
        let f = inp.build(&mut g);
        {
            let o = enc.encode(&mut g, &store, &f).unwrap();
            outputs(&g, &o)
        }
    };
    let (a, b) = (run(&inputs), run(&permuted));
    for (k, &j) in perm.iter().enumerate() {
        assert_eq!(b[k], a[j]);
    }
}

fn sublayer_params() -> (usize, usize) {
    let sa = 4 * (DIM * DIM + DIM) + 2 * DIM;
    let ffn = DIM * FFN + FFN + FFN * DIM + DIM + 2 * DIM;
    (sa, ffn)
}

#[test]
fn sharing_parameter_counts_are_exact() {
    let (sa, ffn) = sublayer_params();
    let scales = 3;
    let count = |plan: &str, sharing| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::new(&mut store, &mut rng, "e", cfg(scales, plan, sharing)).unwrap();
        store.num_scalars()
    };
    let plan = "intra,intra,multi,intra,intra";
    let intra_blocks = 4;
    let full = count(plan, Sharing::Full);
    assert_eq!(full, 5 * (sa + ffn));
    assert_eq!(count(plan, Sharing::Sa), full + intra_blocks * (scales - 1) * ffn);
    assert_eq!(count(plan, Sharing::Ffn), full + intra_blocks * (scales - 1) * sa);
    assert_eq!(
        count(plan, Sharing::None),
        full + intra_blocks * (scales - 1) * (sa + ffn)
    );
    assert!(full < count(plan, Sharing::Ffn) && count(plan, Sharing::Ffn) < count(plan, Sharing::None));
    // Multi blocks have one parameter set regardless of sharing.
    assert_eq!(count("3multi", Sharing::None), count("3multi", Sharing::Full));
}

#[test]
fn named_plans() {
    let kinds = |s: &str| s.parse::<EncoderPlan>().unwrap().blocks().to_vec();
    use BlockKind::*;
    assert_eq!(kinds("3intra"), vec![Intra; 3]);
    assert_eq!(kinds("5intra"), vec![Intra; 5]);
    assert_eq!(kinds("3multi"), vec![Multi; 3]);
    assert_eq!(EncoderPlan::default().blocks(), &[Intra, Intra, Multi, Intra, Intra]);
    assert!("".parse::<EncoderPlan>().is_err());
    assert!("intra,sideways".parse::<EncoderPlan>().is_err());
}

#[test]
fn encode_is_deterministic_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, "e", cfg(2, "intra,multi", Sharing::None)).unwrap();
    randomize(&mut store, &mut rng);
    let inputs = Inputs::random(&mut rng, &[(2, 2), (1, 2)]);
    let weights = rand_vec(&mut rng, 6 * DIM);
    let f = |g: &mut Graph, s: &ParamStore| {
        let fset = inputs.build(g);
        let out = enc.encode(g, s, &fset)?;
        let toks: Vec<_> = out.scales.iter().map(|x| x.tokens).collect();
        let all = g.concat(&toks, 1)?;
        let w = g.constant(&[1, 6, DIM], weights.clone())?;
        let prod = g.mul(all, w)?;
        Ok(g.sum(prod))
    };
    let once = {
        let mut g = Graph::new();
        let l = f(&mut g, &store).unwrap();
        g.value(l)[0]
    };
    let twice = {
        let mut g = Graph::new();
        let l = f(&mut g, &store).unwrap();
        g.value(l)[0]
    };
    assert_eq!(once.to_bits(), twice.to_bits());
    let report = finite_diff_check(&mut store, f, &GradCheckOptions::default(), |_| true).unwrap();
    assert!(report.passed(), "{}", report.summary());
}

#[test]
fn intra_block_rejects_wrong_scale_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let block = IntraBlock::new(&mut store, &mut rng, "b", &cfg(3, "intra", Sharing::None)).unwrap();
    let inputs = Inputs::random(&mut rng, &[(1, 1), (1, 1)]);
    let mut g = Graph::new();
    let fset = inputs.build(&mut g);
    assert!(block.forward(&mut g, &store, &fset).is_err());
}
