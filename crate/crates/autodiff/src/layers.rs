//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in the [`ParamStore`] passed to `new` and `forward`.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine map on the last axis: `x: [n, in] -> [n, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = init_bound(in_dim);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform([in_dim, out_dim], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::uniform([out_dim], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let x2 = if g.shape(x).len() == 1 {
            let n = g.shape(x)[0];
            g.reshape(x, &[1, n])?
        } else {
            x
        };
        let y = g.matmul(x2, w)?;
        g.add(y, b)
    }
}

/// 1-D convolution layer over `[channels, length]` inputs.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = init_bound(c_in * kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform([c_out, c_in, kernel], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::uniform([c_out], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// `query: [tq, e]`, `key` and `value: [tk, e]`; `e` must be divisible by
/// `heads`. Each head attends over its own contiguous `e / heads` slice and
/// head outputs are concatenated back to `[tq, e]`.
pub fn attention(g: &mut Graph, query: Var, key: Var, value: Var, heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (
        g.shape(query).to_vec(),
        g.shape(key).to_vec(),
        g.shape(value).to_vec(),
    );
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(TensorError::Contract(format!(
            "attention expects 2-D inputs, got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    if sq[1] != sk[1] || sk != sv {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let e = sq[1];
    if heads == 0 || e % heads != 0 {
        return Err(TensorError::Contract(format!(
            "embedding dim {e} not divisible by {heads} heads"
        )));
    }
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { query } else { g.slice(query, 1, a, b)? };
        let kh = if heads == 1 { key } else { g.slice(key, 1, a, b)? };
        let vh = if heads == 1 { value } else { g.slice(value, 1, a, b)? };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Multi-head self-attention with input/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Contract(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = attention(g, q, k, v, self.heads)?;
        self.out.forward(g, store, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attention_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new([1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let v = g.constant(Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = attention(&mut g, q, q, v, 2).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new([1, 2], vec![0.7, -0.2]).unwrap());
        let k = g.constant(Tensor::new([2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let v = g.constant(Tensor::new([2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let out = attention(&mut g, q, k, v, 1).unwrap();
        // weights 0.5/0.5 -> mean of value rows
        assert_eq!(g.data(out), &[2.0, 4.0]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros([2, 6]));
        assert!(attention(&mut g, q, q, q, 4).is_err());
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn linear_accepts_vectors() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 2]);
    }
}
