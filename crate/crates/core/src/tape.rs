//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node keeps its value and enough saved state to compute vector-Jacobian
//! products, so [`Graph::backward`] can replay the record in reverse order
//! from a scalar loss. Parameters from a [`ParamStore`] enter the graph as
//! leaves through [`Graph::param`]; their gradients are pushed back into the
//! store with [`Graph::accumulate_param_grads`].
//!
//! One graph serves one forward pass and is single-threaded. Independent
//! graphs share nothing and may live on different threads.

use std::collections::HashMap;

use crate::boxes::{giou_with_grad, BoxCxcywh};
use crate::error::{Error, Result};
use crate::kernels::{gemm, MatView};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        av: MatView,
        bv: MatView,
        alpha: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Expand {
        a: Var,
        src_strides: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    AbsFloor(Var, f64),
    Clamp(Var, f64, f64),
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    SwapAxes12 {
        a: Var,
        dims: [usize; 4],
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        len: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
        row_len: usize,
    },
    LogGaussian {
        center: Var,
        scale: Var,
        grid: GridSpec,
    },
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: Option<f64>,
        gamma: f64,
    },
    Giou {
        pred: Var,
        target: Vec<f64>,
    },
}

/// Geometry of a log-domain Gaussian evaluation (see [`Graph::log_gaussian_map`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Bandwidth; must be positive.
    pub beta: f64,
    /// Multiplier converting predicted scales into cells of this grid.
    pub scale_mult: f64,
}

impl GridSpec {
    /// Position of grid index 0 relative to the unnormalized center.
    ///
    /// A normalized coordinate `c` maps to `c * dim - 0.5` so that integer
    /// grid indices sit at cell centers.
    pub fn unnormalize(dim: usize, c: f64) -> f64 {
        c * dim as f64 - 0.5
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph with reverse-mode gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Leaf holding `t`; differentiable when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Non-differentiable leaf built from raw values.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::dim("constant", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false)
    }

    /// Binds a parameter as a differentiable leaf. Binding the same id twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = &store.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true);
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// Plain matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        self.bmm(a, b, false, false, 1.0)
    }

    /// Batched product `alpha * op(a) · op(b)` over all leading dimensions,
    /// where `op` optionally transposes the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || ra != sb.len() || sa[..ra - 2] != sb[..ra - 2] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (m, ka) = if ta {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let (kb, n) = if tb {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if ka != kb {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let k = ka;
        let groups = numel(&sa[..ra - 2]);
        let av = if ta {
            MatView::row_major(m).t()
        } else {
            MatView::row_major(k)
        };
        let bv = if tb {
            MatView::row_major(k).t()
        } else {
            MatView::row_major(n)
        };
        let mut out = vec![0.0; groups * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &va[g * m * k..],
                    av,
                    &vb[g * k * n..],
                    bv,
                    0.0,
                    &mut out[g * m * n..],
                    MatView::row_major(n),
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                av,
                bv,
                alpha,
            },
            rg,
        ))
    }

    /// `x · w + b` applied to the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (fan_in, fan_out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim("linear bias", self.shape(b), &[fan_out]));
            }
        }
        let rows = numel(&sx) / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(fan_out).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            self.value(x),
            MatView::row_major(fan_in),
            self.value(w),
            MatView::row_major(fan_out),
            1.0,
            &mut out,
            MatView::row_major(fan_out),
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `max(|x|, floor)`: magnitude bounded away from zero.
    pub fn abs_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.abs().max(floor), Op::AbsFloor(a, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Broadcasts `a` to `shape`; every axis of `a` must equal the target or be 1.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::dim("expand", &src, shape));
        }
        let mut src_strides = vec![0; src.len()];
        let mut stride = 1;
        for d in (0..src.len()).rev() {
            src_strides[d] = if src[d] == 1 { 0 } else { stride };
            stride *= src[d];
        }
        let mut out = Vec::with_capacity(numel(shape));
        let va = self.value(a);
        for_each_index(shape, &src_strides, |si| out.push(va[si]));
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Expand { a, src_strides }, rg))
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let cols = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::usage("softmax of rank-0 value"))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() || row.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("non-finite softmax input".into()));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a, cols }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = vx.len() / cols;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- reductions and layout ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `[p, q, r, s] -> [p, r, q, s]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::dim("swap_axes12", s, &[0, 0, 0, 0]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let [p, q, r, t] = dims;
        let va = self.value(a);
        let mut out = vec![0.0; va.len()];
        for i in 0..p {
            for j in 0..q {
                for k in 0..r {
                    let src = ((i * q + j) * r + k) * t;
                    let dst = ((i * r + k) * q + j) * t;
                    out[dst..dst + t].copy_from_slice(&va[src..src + t]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![p, r, q, t], out, Op::SwapAxes12 { a, dims }, rg))
    }

    /// Splits the channel axis of `[.., l, c]` into `heads` groups and moves
    /// the head axis in front of the sequence axis: `[.., heads, l, c / heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("split_heads", &s, &[heads]));
        }
        let c = s[s.len() - 1];
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "channel dim {c} is not divisible by {heads} heads"
            )));
        }
        let l = s[s.len() - 2];
        let outer = numel(&s[..s.len() - 2]);
        let r = self.reshape(x, &[outer, l, heads, c / heads])?;
        let r = self.swap_axes12(r)?;
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([heads, l, c / heads]);
        self.reshape(r, &shape)
    }

    /// Inverse of [`Graph::split_heads`]: `[.., h, l, d] -> [.., l, h * d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim("merge_heads", &s, &[0, 0, 0]));
        }
        let (h, l, d) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let outer = numel(&s[..s.len() - 3]);
        let r = self.reshape(x, &[outer, h, l, d])?;
        let r = self.swap_axes12(r)?;
        let mut shape = s[..s.len() - 3].to_vec();
        shape.extend([l, h * d]);
        self.reshape(r, &shape)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::usage("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &ch) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p)[o * ch..(o + 1) * ch]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src_chunk = s[axis] * inner;
        let (offset, clen) = (start * inner, len * inner);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * clen);
        for o in 0..outer {
            out.extend_from_slice(&va[o * src_chunk + offset..o * src_chunk + offset + clen]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                a,
                outer,
                src_chunk,
                offset,
                len: clen,
            },
            rg,
        ))
    }

    /// Rows of `a` (first axis) selected by `idx`, repetition allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::dim("gather_rows", &s, idx));
        }
        let row_len = numel(&s[1..]);
        let va = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            out.extend_from_slice(&va[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
                row_len,
            },
            rg,
        ))
    }

    // ---- domain ops ---------------------------------------------------------

    /// Log of a separable Gaussian-like weight map, evaluated directly in the
    /// log domain on every integer point of a `height × width` grid.
    ///
    /// `center` is `[r, 2]` holding normalized `(x, y)` centers; `scale` is
    /// `[r, 2]` holding positive `(s_w, s_h)`. The output is `[r, height *
    /// width]` with row-major grid order, each entry
    /// `-((i - c_w)^2 / (beta s_w^2) + (j - c_h)^2 / (beta s_h^2))`.
    pub fn log_gaussian_map(&mut self, center: Var, scale: Var, grid: GridSpec) -> Result<Var> {
        let sc = self.shape(center);
        if sc.len() != 2 || sc[1] != 2 || self.shape(scale) != sc {
            return Err(Error::dim("log_gaussian_map", sc, self.shape(scale)));
        }
        if !(grid.beta > 0.0) {
            return Err(Error::config(format!(
                "bandwidth beta must be positive, got {}",
                grid.beta
            )));
        }
        if grid.height == 0 || grid.width == 0 {
            return Err(Error::config("grid dims must be at least 1"));
        }
        let rows = sc[0];
        let (gh, gw) = (grid.height, grid.width);
        let (vc, vs) = (self.value(center), self.value(scale));
        let mut out = Vec::with_capacity(rows * gh * gw);
        let mut wterm = vec![0.0; gw];
        for r in 0..rows {
            let cx = GridSpec::unnormalize(gw, vc[2 * r]);
            let cy = GridSpec::unnormalize(gh, vc[2 * r + 1]);
            let sx = vs[2 * r] * grid.scale_mult;
            let sy = vs[2 * r + 1] * grid.scale_mult;
            let (dx_den, dy_den) = (grid.beta * sx * sx, grid.beta * sy * sy);
            for (i, w) in wterm.iter_mut().enumerate() {
                let d = i as f64 - cx;
                *w = d * d / dx_den;
            }
            for j in 0..gh {
                let d = j as f64 - cy;
                let hterm = d * d / dy_den;
                out.extend(wterm.iter().map(|w| -(w + hterm)));
            }
        }
        let rg = self.rg(center) || self.rg(scale);
        Ok(self.push(vec![rows, gh * gw], out, Op::LogGaussian { center, scale, grid }, rg))
    }

    /// Summed sigmoid focal loss of `logits` against 0/1 `targets` of equal
    /// length. `alpha = None` disables class weighting.
    pub fn focal_loss(&mut self, logits: Var, targets: &[f64], alpha: Option<f64>, gamma: f64) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(Error::dim("focal_loss", self.shape(logits), &[targets.len()]));
        }
        let total = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| focal_term(z, t, alpha, gamma).0)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Summed `1 - giou` between `[m, 4]` predicted boxes and fixed targets.
    pub fn giou_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(pred);
        if s.len() != 2 || s[1] != 4 || target.len() != s[0] * 4 {
            return Err(Error::dim("giou_loss", s, &[target.len()]));
        }
        let total = self
            .value(pred)
            .chunks(4)
            .zip(target.chunks(4))
            .map(|(p, t)| 1.0 - giou_with_grad(BoxCxcywh::from_slice(p), BoxCxcywh::from_slice(t)).0)
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::Giou {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of every differentiable node with respect to the
    /// scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients of all bound parameters into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound_order {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                av,
                bv,
                alpha,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                let gv = MatView::row_major(n);
                acc(a, &mut |da| {
                    for grp in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            alpha,
                            &g[grp * m * n..],
                            gv,
                            &vb[grp * k * n..],
                            bv.t(),
                            1.0,
                            &mut da[grp * m * k..],
                            av,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for grp in 0..groups {
                        gemm(
                            k,
                            m,
                            n,
                            alpha,
                            &va[grp * m * k..],
                            av.t(),
                            &g[grp * m * n..],
                            gv,
                            1.0,
                            &mut db[grp * k * n..],
                            bv,
                        );
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (vx, vw) = (self.value(x), self.value(w));
                acc(x, &mut |dx| {
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        1.0,
                        g,
                        MatView::row_major(fan_out),
                        vw,
                        MatView::row_major(fan_out).t(),
                        1.0,
                        dx,
                        MatView::row_major(fan_in),
                    )
                });
                acc(w, &mut |dw| {
                    gemm(
                        fan_in,
                        rows,
                        fan_out,
                        1.0,
                        vx,
                        MatView::row_major(fan_in).t(),
                        g,
                        MatView::row_major(fan_out),
                        1.0,
                        dw,
                        MatView::row_major(fan_out),
                    )
                });
                if let Some(b) = b {
                    acc(b, &mut |db| {
                        for row in g.chunks(fan_out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                acc(a, &mut |d| zip3(d, g, vb, |g, y| g * y));
                acc(b, &mut |d| zip3(d, g, va, |g, x| g * x));
            }
            &Op::Scale(a, s) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            Op::Expand { a, src_strides } => {
                let shape = &node.shape;
                acc(*a, &mut |d| {
                    let mut k = 0;
                    for_each_index(shape, src_strides, |si| {
                        d[si] += g[k];
                        k += 1;
                    });
                });
            }
            &Op::Relu(a) => acc(a, &mut |d| zip3(d, g, out, |g, y| if y > 0.0 { g } else { 0.0 })),
            &Op::Sigmoid(a) => acc(a, &mut |d| zip3(d, g, out, |g, y| g * y * (1.0 - y))),
            &Op::Exp(a) => acc(a, &mut |d| zip3(d, g, out, |g, y| g * y)),
            &Op::Abs(a) => {
                let va = self.value(a);
                acc(a, &mut |d| zip3(d, g, va, |g, x| g * sign(x)));
            }
            &Op::AbsFloor(a, floor) => {
                let va = self.value(a);
                acc(a, &mut |d| {
                    zip3(d, g, va, |g, x| if x.abs() > floor { g * sign(x) } else { 0.0 })
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let va = self.value(a);
                acc(a, &mut |d| {
                    zip3(d, g, va, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })
                });
            }
            &Op::Softmax { a, cols } => acc(a, &mut |d| {
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (g - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = self.value(*gamma);
                acc(*x, &mut |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            mean_d += dxh;
                            mean_dx += dxh * xr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            dx[span.start + c] += rs * (gr[c] * gv[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        zip3(dg, gr, xr, |g, x| g * x);
                    }
                });
                acc(*beta, &mut |db| g.chunks(cols).for_each(|gr| add_into(db, gr)));
            }
            &Op::Sum(a) => acc(a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::SwapAxes12 { a, dims } => {
                let [p, q, r, t] = dims;
                acc(a, &mut |d| {
                    for i in 0..p {
                        for j in 0..q {
                            for k in 0..r {
                                let src = ((i * q + j) * r + k) * t;
                                let dst = ((i * r + k) * q + j) * t;
                                add_into(&mut d[src..src + t], &g[dst..dst + t]);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&p, &ch) in parts.iter().zip(chunks) {
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = o * total + off;
                            add_into(&mut d[o * ch..(o + 1) * ch], &g[src..src + ch]);
                        }
                    });
                    off += ch;
                }
            }
            &Op::Slice {
                a,
                outer,
                src_chunk,
                offset,
                len,
            } => acc(a, &mut |d| {
                for o in 0..outer {
                    let dst = o * src_chunk + offset;
                    add_into(&mut d[dst..dst + len], &g[o * len..(o + 1) * len]);
                }
            }),
            Op::GatherRows { a, idx, row_len } => acc(*a, &mut |d| {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(
                        &mut d[i * row_len..(i + 1) * row_len],
                        &g[k * row_len..(k + 1) * row_len],
                    );
                }
            }),
            &Op::LogGaussian { center, scale, grid } => {
                let (vc, vs) = (self.value(center), self.value(scale));
                let rows = vc.len() / 2;
                let (gh, gw) = (grid.height, grid.width);
                let mut dcenter = vec![0.0; rows * 2];
                let mut dscale = vec![0.0; rows * 2];
                for r in 0..rows {
                    let cx = GridSpec::unnormalize(gw, vc[2 * r]);
                    let cy = GridSpec::unnormalize(gh, vc[2 * r + 1]);
                    let (s0x, s0y) = (vs[2 * r], vs[2 * r + 1]);
                    let sx = s0x * grid.scale_mult;
                    let sy = s0y * grid.scale_mult;
                    let gr = &g[r * gh * gw..(r + 1) * gh * gw];
                    // Row sums over the grid reduce the separable terms.
                    let (mut sum_dx, mut sum_dx2, mut sum_dy, mut sum_dy2) = (0.0, 0.0, 0.0, 0.0);
                    for j in 0..gh {
                        let dy = j as f64 - cy;
                        for i in 0..gw {
                            let dx = i as f64 - cx;
                            let gij = gr[j * gw + i];
                            sum_dx += gij * dx;
                            sum_dx2 += gij * dx * dx;
                            sum_dy += gij * dy;
                            sum_dy2 += gij * dy * dy;
                        }
                    }
                    // out = -dx^2/(beta sx^2) - dy^2/(beta sy^2); dx = i - c*gw + 0.5.
                    dcenter[2 * r] = sum_dx * 2.0 / (grid.beta * sx * sx) * gw as f64;
                    dcenter[2 * r + 1] = sum_dy * 2.0 / (grid.beta * sy * sy) * gh as f64;
                    dscale[2 * r] = sum_dx2 * 2.0 / (grid.beta * sx * sx * s0x);
                    dscale[2 * r + 1] = sum_dy2 * 2.0 / (grid.beta * sy * sy * s0y);
                }
                acc(center, &mut |d| add_into(d, &dcenter));
                acc(scale, &mut |d| add_into(d, &dscale));
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let vz = self.value(*logits);
                acc(*logits, &mut |d| {
                    for ((d, &z), &t) in d.iter_mut().zip(vz).zip(targets) {
                        *d += g[0] * focal_term(z, t, *alpha, *gamma).1;
                    }
                });
            }
            Op::Giou { pred, target } => {
                let vp = self.value(*pred);
                acc(*pred, &mut |d| {
                    for ((dr, p), t) in d.chunks_mut(4).zip(vp.chunks(4)).zip(target.chunks(4)) {
                        let (_, gr) = giou_with_grad(BoxCxcywh::from_slice(p), BoxCxcywh::from_slice(t));
                        for (d, gr) in dr.iter_mut().zip(gr) {
                            *d -= g[0] * gr;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
///
/// Targets are treated as binary: `t >= 0.5` is the positive class.
pub(crate) fn focal_term(z: f64, t: f64, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if t >= 0.5 {
        let w = alpha.unwrap_or(1.0);
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        let loss = -w * q.powf(gamma) * log_p;
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        // d/dz of -(q^gamma) log p with dp/dz = p q.
        let grad = w * (dq * log_p * p * q - q.powf(gamma) * q);
        (loss, grad)
    } else {
        let w = alpha.map_or(1.0, |a| 1.0 - a);
        let log_q = -softplus(z);
        let loss = -w * p.powf(gamma) * log_q;
        let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        let grad = -w * (dp * log_q * p * (1.0 - p) - p.powf(gamma) * p);
        (loss, grad)
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn zip3(d: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
        *d += f(g, x);
    }
}

/// Calls `f` with the source offset of every target index in row-major order.
fn for_each_index(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    let total = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        f(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}
