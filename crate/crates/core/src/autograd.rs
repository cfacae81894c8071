//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node to the [`Graph`]; node indices are a topological
//! order, so [`Graph::backward`] is a single reverse sweep. A graph is built
//! per forward pass and dropped afterwards.
//!
//! Reductions inside matmul, softmax and layer-norm accumulate in `f64` and
//! always run in a fixed order, so results are bit-reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    LayerNorm { x: Var, rstd: Vec<f32> },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} produced non-finite values (output shape {:?})",
                value.shape()
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let (da, db) = (ta.data(), tb.data());
        let mut data = vec![0.0f32; out.iter().product()];
        for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|x| x * sigmoid(x));
        self.push("silu", v, Op::Silu(x), &[x])
    }

    // ---- contractions and normalisation ------------------------------------

    /// `a @ b`. `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// carries the same leading batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b` laid out as `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = MatDims::new(ta.shape(), tb.shape(), trans_b)?;
        let af = to_f64(ta.data());
        let bf = to_f64(tb.data());
        let mut c = vec![0.0f64; dims.batch * dims.m * dims.n];
        dims.forward(&af, &bf, &mut c);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = dims.n;
        let value = Tensor::new(shape, to_f32(&c))?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let rows = t.numel() / d.max(1);
        let mut out = vec![0.0f32; t.numel()];
        let mut rstd = vec![0.0f32; rows];
        for (r, (row, dst)) in t.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let mut out = vec![0.0f32; t.numel()];
        for (row, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let e = (v as f64 - max).exp();
                    sum += e;
                    e
                })
                .collect();
            for (o, e) in dst.iter_mut().zip(exps) {
                *o = (e / sum) as f32;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let value = permute_tensor(t, perm)?;
        self.push("permute", value, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat_channel(&mut self, inputs: &[Var]) -> Result<Var> {
        let rank = inputs.first().map(|v| self.shape(*v).len()).unwrap_or(0);
        self.concat(inputs, rank.saturating_sub(1))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum_f64() / t.numel().max(1) as f64;
        self.push("mean", Tensor::scalar(m as f32), Op::Mean(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf created with
    /// `requires_grad`. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, Var(i), g, &mut grads, &mut out)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        me: Var,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {
                out.grads.insert(me, Tensor::new(out_shape.to_vec(), g)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                let ga = reduce_to(&g, out_shape, self.shape(*a));
                let mut gb = reduce_to(&g, out_shape, self.shape(*b));
                if negate {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = mul_backward(&g, out_shape, ta, tb);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                let ga = g.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dims = MatDims::new(ta.shape(), tb.shape(), *trans_b)?;
                let gf = to_f64(&g);
                if self.nodes[a.0].requires_grad {
                    let bf = to_f64(tb.data());
                    let mut da = vec![0.0; ta.numel()];
                    dims.grad_a(&gf, &bf, &mut da);
                    self.accumulate(grads, *a, to_f32(&da));
                }
                if self.nodes[b.0].requires_grad {
                    let af = to_f64(ta.data());
                    let mut db = vec![0.0; tb.numel()];
                    dims.grad_b(&gf, &af, &mut db);
                    self.accumulate(grads, *b, to_f32(&db));
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut gx = vec![0.0f32; g.len()];
                for (r, ((gy, yr), dst)) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mean_g = gy.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / d as f64;
                    let rs = rstd[r] as f64;
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gy).zip(yr) {
                        *o = (rs * (gv as f64 - mean_g - yv as f64 * mean_gy)) as f32;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut gx = vec![0.0f32; g.len()];
                for ((gy, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gy.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gy).zip(yr) {
                        *o = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let gx = g.iter().zip(xs).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let xs = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out_shape.to_vec(), g)?;
                let gx = permute_tensor(&gt, &inv)?.into_vec();
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.nodes[v.0].requires_grad {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * row + offset;
                            gv.extend_from_slice(&g[s..s + chunk]);
                        }
                        self.accumulate(grads, *v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![0.0f32; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
        }
        Ok(())
    }
}

// ---- kernels ----------------------------------------------------------------

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= n {
            s[i + s.len() - n]
        } else {
            1
        }
    };
    (0..n)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` in row-major order with the matching flat
/// offsets into two broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[n - 1];
    let (ia_step, ib_step) = (sa[n - 1], sb[n - 1]);
    let outer: usize = out[..n - 1].iter().product();
    let mut idx = vec![0usize; n - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut i = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(i, ia, ib);
            i += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..n - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of broadcast shape `out` back down to `target`.
fn reduce_to(g: &[f32], out: &[usize], target: &[usize]) -> Vec<f32> {
    if out == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0f64; target.iter().product()];
    for_each_broadcast(out, &st, &zero, |i, it, _| acc[it] += g[i] as f64);
    to_f32(&acc)
}

fn mul_backward(g: &[f32], out: &[usize], a: &Tensor, b: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let ga = g.iter().zip(db).map(|(x, y)| x * y).collect();
        let gb = g.iter().zip(da).map(|(x, y)| x * y).collect();
        return (ga, gb);
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = vec![0.0f64; a.numel()];
    let mut gb = vec![0.0f64; b.numel()];
    for_each_broadcast(out, &sa, &sb, |i, ia, ib| {
        ga[ia] += g[i] as f64 * db[ib] as f64;
        gb[ib] += g[i] as f64 * da[ia] as f64;
    });
    (to_f32(&ga), to_f32(&gb))
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let n = s.len();
    let mut seen = vec![false; n];
    let valid = perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
    if !valid {
        return Err(Error::InvalidShape {
            op: "permute",
            msg: format!("{perm:?} is not a permutation of the axes of {s:?}"),
        });
    }
    let mut in_strides = vec![1; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; n];
    let data = t.data();
    let mut out = vec![0.0f32; t.numel()];
    if n == 0 {
        out.copy_from_slice(data);
    } else {
        for_each_broadcast(&out_shape, &src_strides, &zero, |i, src, _| out[i] = data[src]);
    }
    Tensor::new(out_shape, out)
}

/// Shape bookkeeping shared by the matmul forward and backward kernels.
#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

impl MatDims {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(Error::shape("matmul", a, b));
        }
        let a_batch: usize = a[..a.len() - 2].iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && (b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2]) {
            return Err(Error::shape("matmul", a, b));
        }
        Ok(Self {
            batch: a_batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        })
    }

    /// Row/column strides of one `b` matrix as seen by `a @ b`.
    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (rsb, csb) = self.b_strides();
        if self.shared_b {
            gemm(
                self.batch * self.m,
                self.k,
                self.n,
                a,
                (self.k as isize, 1),
                b,
                (rsb, csb),
                c,
            );
            return;
        }
        let (sa, sb, sc) = (self.m * self.k, self.k * self.n, self.m * self.n);
        for i in 0..self.batch {
            gemm(
                self.m,
                self.k,
                self.n,
                &a[i * sa..(i + 1) * sa],
                (self.k as isize, 1),
                &b[i * sb..(i + 1) * sb],
                (rsb, csb),
                &mut c[i * sc..(i + 1) * sc],
            );
        }
    }

    /// dA = dC @ B^T (per batch).
    fn grad_a(&self, g: &[f64], b: &[f64], da: &mut [f64]) {
        // B^T as an n x k operand.
        let bt = if self.trans_b {
            (self.k as isize, 1)
        } else {
            (1, self.n as isize)
        };
        if self.shared_b {
            gemm(self.batch * self.m, self.n, self.k, g, (self.n as isize, 1), b, bt, da);
            return;
        }
        let (sa, sb, sc) = (self.m * self.k, self.k * self.n, self.m * self.n);
        for i in 0..self.batch {
            gemm(
                self.m,
                self.n,
                self.k,
                &g[i * sc..(i + 1) * sc],
                (self.n as isize, 1),
                &b[i * sb..(i + 1) * sb],
                bt,
                &mut da[i * sa..(i + 1) * sa],
            );
        }
    }

    /// dB = A^T @ dC, or dC^T @ A when `b` is stored transposed.
    fn grad_b(&self, g: &[f64], a: &[f64], db: &mut [f64]) {
        let rows = if self.shared_b { self.batch * self.m } else { self.m };
        let reps = if self.shared_b { 1 } else { self.batch };
        let (sa, sb, sc) = (rows * self.k, self.k * self.n, rows * self.n);
        for i in 0..reps {
            let (ai, gi) = (&a[i * sa..(i + 1) * sa], &g[i * sc..(i + 1) * sc]);
            let dbi = &mut db[i * sb..(i + 1) * sb];
            if self.trans_b {
                // n x rows @ rows x k
                gemm(
                    self.n,
                    rows,
                    self.k,
                    gi,
                    (1, self.n as isize),
                    ai,
                    (self.k as isize, 1),
                    dbi,
                );
            } else {
                // k x rows @ rows x n
                gemm(
                    self.k,
                    rows,
                    self.n,
                    ai,
                    (1, self.k as isize),
                    gi,
                    (self.n as isize, 1),
                    dbi,
                );
            }
        }
    }
}

/// `c = a @ b` for an `m x k` and a `k x n` operand given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides above address exactly the `m x k`, `k x n` and
    // `m x n` row-major blocks backed by `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.1));
        let b = g.constant(Tensor::from_fn(&[2, 5, 4], |i| (i as f32).sin()));
        let bt = g.permute(b, &[0, 2, 1]).unwrap();
        let c1 = g.matmul_nt(a, b).unwrap();
        let c2 = g.matmul(a, bt).unwrap();
        assert!(g.value(c1).max_abs_diff(g.value(c2)).unwrap() < 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"),
            "{err}"
        );
    }

    #[test]
    fn concat_channel_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 4, 4, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4, 4, 5]));
        let c = g.concat_channel(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 4, 8]);
        let bad = g.constant(Tensor::zeros(&[2, 4, 3, 5]));
        assert!(g.concat_channel(&[a, bad]).is_err());
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 3], |i| i as f32));
        let b = g.constant(Tensor::from_fn(&[3, 2, 5], |i| -(i as f32)));
        let c = g.concat_channel(&[a, b]).unwrap();
        let a2 = g.slice(c, 2, 0, 3).unwrap();
        let b2 = g.slice(c, 2, 3, 5).unwrap();
        assert!(g.value(a2).bit_eq(g.value(a)));
        assert!(g.value(b2).bit_eq(g.value(b)));
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.leaf(t(&[2, 2], &[1.0; 4]), true);
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get(y).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4]), true);
        let b = g.leaf(Tensor::zeros(&[3, 1]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f32::MAX]));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32));
        let p = g.permute(x, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 3, 5]);
        let back = g.permute(p, &[0, 2, 1, 3]).unwrap();
        assert!(g.value(back).bit_eq(g.value(x)));
        assert!(g.permute(x, &[0, 0, 1, 2]).is_err());
    }
}
