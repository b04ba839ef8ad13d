//! Building blocks shared by the enhancer and the decoder.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.linear_weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Set weight to `w` and bias to zero.
    pub fn assign<T: Scalar>(&self, store: &mut ParamStore<T>, w: Tensor<T>) {
        let cols = w.cols();
        store.set(self.weight, w);
        store.set(self.bias, Tensor::zeros(1, cols));
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let (r, c) = store.get(self.weight).shape();
        self.assign(store, Tensor::zeros(r, c));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm { gain: store.ones(format!("{name}.gain"), 1, dim), bias: store.zeros(format!("{name}.bias"), 1, dim) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// One projection set: query, key, value and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention. `mask` is additive, entries in
    /// `{0, -inf}`, shaped `[n_q, n_k]`, and applied to every head before the
    /// softmax.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (nq, d) = g.shape(queries);
        let nk = g.shape(keys_values).0;
        if let Some(m) = mask {
            check_mask(m, nq, nk)?;
        }
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, keys_values);
        let v = self.v.forward(g, store, keys_values);
        let dh = d / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mask_var = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let s = match mask_var {
                Some(m) => g.add(s, m),
                None => s,
            };
            let p = g.softmax(s);
            heads.push(g.matmul(p, vh));
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        Ok(self.out.forward(g, store, o))
    }
}

/// Reject masks with entries outside `{0, -inf}` or rows with no visible key.
pub fn check_mask<T: Scalar>(mask: &Tensor<T>, nq: usize, nk: usize) -> Result<()> {
    if mask.shape() != (nq, nk) {
        return Err(Error::invalid(format!("attention mask is {:?}, expected ({nq}, {nk})", mask.shape())));
    }
    for r in 0..nq {
        let row = mask.row(r);
        if let Some(bad) = row.iter().find(|v| !(**v == T::zero() || **v == T::neg_infinity())) {
            return Err(Error::invalid(format!("attention mask entry {bad} is neither 0 nor -inf")));
        }
        if row.iter().all(|v| *v == T::neg_infinity()) {
            return Err(Error::DegenerateSoftmax { row: r });
        }
    }
    Ok(())
}
