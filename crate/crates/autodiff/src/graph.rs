use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        eps: f64,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is
/// therefore a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`] for leaf and parameter nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Output positions `t` for which `t*stride + k - padding` falls inside `[0, len)`.
fn conv_range(len: usize, out_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // t*stride >= padding - k
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // t*stride <= len - 1 + padding - k
    let top = len + padding;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - 1 - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
            let ma = broadcast_index_map(&shape, ta.shape());
            let mb = broadcast_index_map(&shape, tb.shape());
            let (da, db) = (ta.data(), tb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x^p` for non-negative `x`. At `x = 0` the derivative is taken as 0
    /// unless `p == 1`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], data)?, Op::Matmul(a, b), rg))
    }

    /// 1-D convolution (cross-correlation). `x: [c_in, len]`,
    /// `w: [c_out, c_in, k]`, optional `b: [c_out]`; output
    /// `[c_out, (len + 2*padding - k) / stride + 1]` with zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] || stride == 0 {
            return Err(mismatch());
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, ks) = (sw[0], sw[2]);
        if len + 2 * padding < ks {
            return Err(mismatch());
        }
        let out_len = (len + 2 * padding - ks) / stride + 1;
        let mut out = vec![0.0; c_out * out_len];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vec![c_out],
                    rhs: tb.shape().to_vec(),
                });
            }
            for (co, &bv) in tb.data().iter().enumerate() {
                out[co * out_len..(co + 1) * out_len].fill(bv);
            }
        }
        let (xd, wd) = (tx.data(), tw.data());
        for co in 0..c_out {
            let orow = &mut out[co * out_len..(co + 1) * out_len];
            for ci in 0..c_in {
                let xrow = &xd[ci * len..(ci + 1) * len];
                for k in 0..ks {
                    let wv = wd[(co * c_in + ci) * ks + k];
                    let (lo, hi) = conv_range(len, out_len, k, stride, padding);
                    if stride == 1 {
                        let src0 = lo + k - padding;
                        let xs = &xrow[src0..src0 + (hi - lo)];
                        for (o, xv) in orow[lo..hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            orow[t] += wv * xrow[t * stride + k - padding];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let op = Op::Conv1d {
            x,
            w,
            b,
            stride,
            padding,
        };
        Ok(self.push(Tensor::new([c_out, out_len], out)?, op, rg))
    }

    /// Normalise over the last dimension (no affine transform).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, eps }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(TensorError::Contract(format!(
                "mean_axis: axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = outer_inner(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (v, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *v += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!(
                "concat: axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || start > end || end > t.shape()[axis] {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = outer_inner(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects 2-D, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Nearest-neighbour upsampling of the last axis by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(TensorError::Contract("upsample factor 0".into()));
        }
        let t = self.value(x);
        let l = last_dim(t.shape());
        let mut out = Vec::with_capacity(t.len() * factor);
        for row in t.data().chunks(l) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let mut shape = t.shape().to_vec();
        if let Some(s) = shape.last_mut() {
            *s *= factor;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, factor }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Parameter gradients are *added* into `store` (call
    /// [`ParamStore::zero_grad`] between steps); running backward twice without
    /// a reset therefore doubles them. Gradients of [`Graph::input`] leaves are
    /// returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.trainable {
                        for (a, b) in p.grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    grads[i] = Some(g);
                }
                op => self.propagate(op, i, &g, &mut grads)?,
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    /// Sum a full-size gradient down onto a (possibly broadcast) operand.
    fn reduce_onto(&self, g: &[f64], out_shape: &[usize], v: Var) -> Vec<f64> {
        let shape = self.shape(v);
        if shape == out_shape {
            return g.to_vec();
        }
        let map = broadcast_index_map(out_shape, shape);
        let mut r = vec![0.0; self.value(v).len()];
        for (gi, &j) in g.iter().zip(&map) {
            r[j] += gi;
        }
        r
    }

    /// Operand values expanded to the output shape.
    fn expand(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        let t = self.value(v);
        if t.shape() == out_shape {
            return t.data().to_vec();
        }
        let map = broadcast_index_map(out_shape, t.shape());
        map.iter().map(|&j| t.data()[j]).collect()
    }

    fn propagate(
        &self,
        op: &Op,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let out = &self.nodes[i].value;
        let out_shape = out.shape();
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                if self.rg(a) {
                    let r = self.reduce_onto(g, out_shape, a);
                    self.acc(grads, a, r);
                }
                if self.rg(b) {
                    let r = self.reduce_onto(g, out_shape, b);
                    self.acc(grads, b, r);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    let r = self.reduce_onto(g, out_shape, a);
                    self.acc(grads, a, r);
                }
                if self.rg(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let r = self.reduce_onto(&neg, out_shape, b);
                    self.acc(grads, b, r);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let eb = self.expand(b, out_shape);
                    let full: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                    let r = self.reduce_onto(&full, out_shape, a);
                    self.acc(grads, a, r);
                }
                if self.rg(b) {
                    let ea = self.expand(a, out_shape);
                    let full: Vec<f64> = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                    let r = self.reduce_onto(&full, out_shape, b);
                    self.acc(grads, b, r);
                }
            }
            Op::Div(a, b) => {
                let eb = self.expand(b, out_shape);
                if self.rg(a) {
                    let full: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x / y).collect();
                    let r = self.reduce_onto(&full, out_shape, a);
                    self.acc(grads, a, r);
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let full: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .zip(&eb)
                        .map(|((gv, o), bv)| -gv * o / bv)
                        .collect();
                    let r = self.reduce_onto(&full, out_shape, b);
                    self.acc(grads, b, r);
                }
            }
            Op::Neg(x) => self.acc(grads, x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => self.acc(grads, x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.acc(grads, x, g.to_vec()),
            Op::Powf(x, p) => {
                let xd = self.data(x);
                let r = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, &xv)| {
                        if xv == 0.0 && p != 1.0 {
                            0.0
                        } else {
                            gv * p * xv.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bd = self.data(b);
                    let mut ga = vec![0.0; m * k];
                    for ii in 0..m {
                        let grow = &g[ii * n..(ii + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[ii * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.rg(b) {
                    let ad = self.data(a);
                    let mut gb = vec![0.0; k * n];
                    for ii in 0..m {
                        let grow = &g[ii * n..(ii + 1) * n];
                        for p in 0..k {
                            let av = ad[ii * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (c_in, len) = (sx[0], sx[1]);
                let (c_out, ks) = (sw[0], sw[2]);
                let out_len = out_shape[1];
                let (xd, wd) = (self.data(x), self.data(w));
                if let Some(b) = b {
                    if self.rg(b) {
                        let gb = g.chunks(out_len).map(|r| r.iter().sum()).collect();
                        self.acc(grads, b, gb);
                    }
                }
                let need_x = self.rg(x);
                let need_w = self.rg(w);
                let mut gx = if need_x { vec![0.0; c_in * len] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; wd.len()] } else { Vec::new() };
                for co in 0..c_out {
                    let grow = &g[co * out_len..(co + 1) * out_len];
                    for ci in 0..c_in {
                        let xrow = &xd[ci * len..(ci + 1) * len];
                        for k in 0..ks {
                            let widx = (co * c_in + ci) * ks + k;
                            let (lo, hi) = conv_range(len, out_len, k, stride, padding);
                            if stride == 1 {
                                let src0 = lo + k - padding;
                                let n = hi - lo;
                                if need_w {
                                    gw[widx] += grow[lo..hi]
                                        .iter()
                                        .zip(&xrow[src0..src0 + n])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if need_x {
                                    let wv = wd[widx];
                                    let gxrow = &mut gx[ci * len + src0..ci * len + src0 + n];
                                    for (o, gv) in gxrow.iter_mut().zip(&grow[lo..hi]) {
                                        *o += wv * gv;
                                    }
                                }
                            } else {
                                let wv = wd[widx];
                                let mut acc = 0.0;
                                for t in lo..hi {
                                    let src = t * stride + k - padding;
                                    acc += grow[t] * xrow[src];
                                    if need_x {
                                        gx[ci * len + src] += wv * grow[t];
                                    }
                                }
                                if need_w {
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.acc(grads, x, gx);
                }
                if need_w {
                    self.acc(grads, w, gw);
                }
            }
            Op::Relu(x) => {
                let r = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Gelu(x) => {
                let r = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Sigmoid(x) => {
                let r = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Softplus(x) => {
                let r = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Exp(x) => {
                let r = g.iter().zip(out.data()).map(|(gv, o)| gv * o).collect();
                self.acc(grads, x, r);
            }
            Op::Log(x) => {
                let r = g.iter().zip(self.data(x)).map(|(gv, xv)| gv / xv).collect();
                self.acc(grads, x, r);
            }
            Op::Square(x) => {
                let r = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, xv)| 2.0 * gv * xv)
                    .collect();
                self.acc(grads, x, r);
            }
            Op::Sqrt(x) => {
                let r = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| gv * 0.5 / o)
                    .collect();
                self.acc(grads, x, r);
            }
            Op::LayerNorm { x, eps } => {
                let c = last_dim(out_shape);
                let xd = self.data(x);
                let mut r = vec![0.0; g.len()];
                for ((rrow, grow), (yrow, xrow)) in r
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c).zip(xd.chunks(c)))
                {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var =
                        xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gv), yv) in rrow.iter_mut().zip(grow).zip(yrow) {
                        *o = inv * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, x, r);
            }
            Op::Softmax(x) => {
                let c = last_dim(out_shape);
                let mut r = vec![0.0; g.len()];
                for ((rrow, grow), yrow) in r.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in rrow.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, x, r);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.acc(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                self.acc(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = outer_inner(self.shape(x), axis);
                let mut r = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let dst = &mut r[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s / n as f64;
                        }
                    }
                }
                self.acc(grads, x, r);
            }
            Op::Concat { ref xs, axis } => {
                let (outer, total, inner) = outer_inner(out_shape, axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[axis];
                    if self.rg(v) {
                        let mut r = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            r.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.acc(grads, v, r);
                    }
                    offset += n;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let (outer, n, inner) = outer_inner(self.shape(x), axis);
                let w = end - start;
                let mut r = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    r[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.acc(grads, x, r);
            }
            Op::Transpose(x) => {
                let (r0, c0) = (self.shape(x)[0], self.shape(x)[1]);
                let mut r = vec![0.0; r0 * c0];
                for a in 0..r0 {
                    for b in 0..c0 {
                        r[a * c0 + b] = g[b * r0 + a];
                    }
                }
                self.acc(grads, x, r);
            }
            Op::Reshape(x) => self.acc(grads, x, g.to_vec()),
            Op::Upsample { x, factor } => {
                let r = g.chunks(factor).map(|c| c.iter().sum()).collect();
                self.acc(grads, x, r);
            }
        }
        Ok(())
    }
}
