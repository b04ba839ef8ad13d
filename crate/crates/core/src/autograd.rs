//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Values are computed eagerly when a node is pushed; [`Graph::backward`]
//! walks the tape once in reverse. Nodes that do not depend on a trainable
//! parameter are never visited during the backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    SumAll(Var),
    SumRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MergeRows(Vec<(Var, usize)>),
    PickElems { x: Var, idx: Vec<(usize, usize)> },
    BceLogits { x: Var, target: Tensor<T> },
    Im2Col3 { x: Var, h: usize, w: usize },
    AvgPool2 { x: Var, h: usize, w: usize },
    Resize { x: Var, plan: Arc<ResizePlan> },
    Deformable { values: Var, offsets: Var, weights: Var, geom: SampleGeometry },
}

/// Bilinear resampling of an `h x w` map to `H x W`, sampling source
/// coordinates at pixel centres (`(o + 0.5) * src / dst - 0.5`, clamped to the
/// grid). Each output cell reads four weighted taps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl ResizePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let axis = |out: usize, n: usize| -> Vec<(usize, usize, f64)> {
            (0..out)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).max(0.0);
                    let i0 = (s.floor() as usize).min(n - 1);
                    (i0, (i0 + 1).min(n - 1), (s - i0 as f64).min(1.0))
                })
                .collect()
        };
        let (ys, xs) = (axis(dst.0, src.0), axis(dst.1, src.1));
        let w = src.1;
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        ResizePlan { src, dst, taps }
    }

    /// Resample every row of `[K, h*w]` into `[K, H*W]`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.cols(), self.src.0 * self.src.1, "resize source size mismatch");
        let taps: Vec<[(usize, T); 4]> = self.taps.iter().map(|t| t.map(|(i, w)| (i, T::lit(w)))).collect();
        let mut out = Tensor::zeros(x.rows(), taps.len());
        for k in 0..x.rows() {
            let src = x.row(k);
            for (o, t) in out.row_mut(k).iter_mut().zip(&taps) {
                *o = src[t[0].0] * t[0].1 + src[t[1].0] * t[1].1 + src[t[2].0] * t[2].1 + src[t[3].0] * t[3].1;
            }
        }
        out
    }

    fn apply_transpose<T: Scalar>(&self, g: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(g.rows(), self.src.0 * self.src.1);
        for k in 0..g.rows() {
            let grow = g.row(k);
            let drow = dx.row_mut(k);
            for (&go, t) in grow.iter().zip(&self.taps) {
                for &(i, w) in t {
                    drow[i] += go * T::lit(w);
                }
            }
        }
        dx
    }
}

/// Layout of a deformable sampling call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleGeometry {
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub points: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter that took part in the graph, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(move |&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn bilinear_corners<T: Scalar>(y: T, x: T, h: usize, w: usize) -> [(Option<usize>, T, T, T); 4] {
    // (flat index if in bounds, weight, d weight / dy, d weight / dx)
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let one = T::one();
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let idx = |yy: i64, xx: i64| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    [
        (idx(y0, x0), (one - fy) * (one - fx), -(one - fx), -(one - fy)),
        (idx(y0, x0 + 1), (one - fy) * fx, -fx, one - fy),
        (idx(y0 + 1, x0), fy * (one - fx), one - fx, -fy),
        (idx(y0 + 1, x0 + 1), fy * fx, fx, fy),
    ]
}

/// Bilinear read of channels `[c0, c0 + len)` at fractional grid position
/// `(y, x)` with zero padding outside the grid.
pub fn bilinear_sample<T: Scalar>(values: &Tensor<T>, h: usize, w: usize, y: T, x: T, c0: usize, out: &mut [T]) {
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for (idx, wt, _, _) in bilinear_corners(y, x, h, w) {
        if let Some(i) = idx {
            if wt == T::zero() {
                continue;
            }
            let row = &values.row(i)[c0..c0 + out.len()];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += wt * v;
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stable `max(x, 0) - x t + ln(1 + e^{-|x|})`.
pub(crate) fn bce_with_logits<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.get(0, 0)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient even though it is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter read; repeated reads of one id inside a graph return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    /// `a[n,m] + b[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row expects a [1, cols] operand");
        let v = Tensor::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + bv.get(0, c));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    /// `a[n,m] * b[1,m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "mul_row expects a [1, cols] operand");
        let v = Tensor::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) * bv.get(0, c));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulRow(a, b), ng)
    }

    /// `a[n,m] / b[n,1]` broadcast over columns.
    pub fn div_col(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (av.rows(), 1), "div_col expects a [rows, 1] operand");
        let v = Tensor::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) / bv.get(r, 0));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::DivCol(a, b), ng)
    }

    /// `a * s` for a `[1,1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut out = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        let mf = T::lit(m as f64);
        let eps = T::lit(LN_EPS);
        for r in 0..n {
            let row = av.row(r);
            let mean = row.iter().copied().fold(T::zero(), |s, x| s + x) / mf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).fold(T::zero(), |s, x| s + x) / mf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero weight;
    /// callers guarantee every row has at least one finite entry.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            let row = av.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = out.row_mut(r);
            let mut s = T::zero();
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - mx).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            let row = av.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s = row.iter().map(|&x| (x - mx).exp()).fold(T::zero(), |a, b| a + b);
            let lse = mx + s.ln();
            for (oi, &x) in out.row_mut(r).iter_mut().zip(row) {
                *oi = x - lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Divide each row by its L2 norm. Zero rows must be rejected by the caller.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut out = Tensor::zeros(n, m);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = av.row(r);
            let nrm = row.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt();
            norms.push(nrm);
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x / nrm;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormRows { x: a, norms }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `[n,m] -> [n,1]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Tensor::from_fn(av.rows(), 1, |r, _| av.row(r).iter().copied().fold(T::zero(), |s, x| s + x));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let v = Tensor::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let ng = self.ng(a);
        self.push(v, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Assemble a matrix whose row `r` is row `picks[r].1` of node `picks[r].0`.
    pub fn merge_rows(&mut self, picks: &[(Var, usize)]) -> Var {
        let cols = self.shape(picks[0].0).1;
        let mut data = Vec::with_capacity(picks.len() * cols);
        for &(v, r) in picks {
            let t = self.value(v);
            assert_eq!(t.cols(), cols, "merge_rows column mismatch");
            data.extend_from_slice(t.row(r));
        }
        let ng = picks.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::from_vec(picks.len(), cols, data), Op::MergeRows(picks.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let picks: Vec<(Var, usize)> = idx.iter().map(|&i| (a, i)).collect();
        self.merge_rows(&picks)
    }

    /// `[n,1]` column of selected elements.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let v = Tensor::from_fn(idx.len(), 1, |r, _| av.get(idx[r].0, idx[r].1));
        let ng = self.ng(a);
        self.push(v, Op::PickElems { x: a, idx: idx.to_vec() }, ng)
    }

    /// Elementwise binary cross-entropy against a constant target.
    pub fn bce_logits(&mut self, a: Var, target: &Tensor<T>) -> Var {
        let v = self.value(a).zip_map(target, bce_with_logits);
        let ng = self.ng(a);
        self.push(v, Op::BceLogits { x: a, target: target.clone() }, ng)
    }

    /// 3x3 zero-padded patch extraction: `[h*w, c] -> [h*w, 9c]`.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert_eq!(av.rows(), h * w, "im2col3 grid mismatch");
        let mut v = Tensor::zeros(h * w, 9 * c);
        for y in 0..h {
            for x in 0..w {
                let orow = v.row_mut(y * w + x);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            continue;
                        }
                        let k = ky * 3 + kx;
                        orow[k * c..(k + 1) * c].copy_from_slice(av.row(sy as usize * w + sx as usize));
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Im2Col3 { x: a, h, w }, ng)
    }

    /// 2x2 average pooling; ragged edge windows average the pixels they contain.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut v = Tensor::zeros(oh * ow, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = (2 * oy)..(2 * oy + 2).min(h);
                let xs = (2 * ox)..(2 * ox + 2).min(w);
                let cnt = T::lit((ys.len() * xs.len()) as f64);
                let orow = v.row_mut(oy * ow + ox);
                for y in ys {
                    for x in xs.clone() {
                        for (o, &s) in orow.iter_mut().zip(av.row(y * w + x)) {
                            *o += s;
                        }
                    }
                }
                for o in orow.iter_mut() {
                    *o /= cnt;
                }
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::AvgPool2 { x: a, h, w }, ng)
    }

    /// Bilinear resize of each row of `a` according to `plan`.
    pub fn resize(&mut self, a: Var, plan: &Arc<ResizePlan>) -> Var {
        let v = plan.apply(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Resize { x: a, plan: Arc::clone(plan) }, ng)
    }

    /// Deformable sampling: for each grid position `p`, head `h` and point `k`
    /// read `values` bilinearly at `p + offset[p,h,k]` and sum with
    /// `weights[p,h,k]`. Offsets are laid out `(dy, dx)` per point.
    pub fn deformable_sample(&mut self, values: Var, offsets: Var, weights: Var, geom: SampleGeometry) -> Var {
        let (vv, ov, wv) = (self.value(values), self.value(offsets), self.value(weights));
        let SampleGeometry { height: h, width: w, heads, points } = geom;
        let d = vv.cols();
        assert_eq!(vv.rows(), h * w, "deformable values grid mismatch");
        assert_eq!(d % heads, 0, "channels not divisible by heads");
        assert_eq!(ov.shape(), (h * w, heads * points * 2), "offset layout mismatch");
        assert_eq!(wv.shape(), (h * w, heads * points), "weight layout mismatch");
        let dh = d / heads;
        let mut out = Tensor::zeros(h * w, d);
        let mut buf = vec![T::zero(); dh];
        for p in 0..h * w {
            let (py, px) = (T::lit((p / w) as f64), T::lit((p % w) as f64));
            for hd in 0..heads {
                for k in 0..points {
                    let j = hd * points + k;
                    let y = py + ov.get(p, 2 * j);
                    let x = px + ov.get(p, 2 * j + 1);
                    bilinear_sample(vv, h, w, y, x, hd * dh, &mut buf);
                    let a = wv.get(p, j);
                    let orow = &mut out.row_mut(p)[hd * dh..(hd + 1) * dh];
                    for (o, &s) in orow.iter_mut().zip(&buf) {
                        *o += a * s;
                    }
                }
            }
        }
        let ng = self.ng(values) || self.ng(offsets) || self.ng(weights);
        self.push(out, Op::Deformable { values, offsets, weights, geom }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(1, 1));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(_, v)| v.0);
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, g.clone().reshape(r, c));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                }
                if self.ng(*b) {
                    let t = g.zip_map(out, |x, o| x * o);
                    acc(*b, t.zip_map(bv, |x, y| -x / y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * bv.get(0, c)));
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let cur = db.get(0, c);
                            db.set(0, c, cur + g.get(r, c) * av.get(r, c));
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::DivCol(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    acc(*a, Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) / bv.get(r, 0)));
                }
                if self.ng(*b) {
                    let db = Tensor::from_fn(g.rows(), 1, |r, _| {
                        let s = g.row(r).iter().zip(out.row(r)).fold(T::zero(), |s, (&x, &o)| s + x * o);
                        -s / bv.get(r, 0)
                    });
                    acc(*b, db);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                if self.ng(*a) {
                    acc(*a, g.map(|x| x * sv));
                }
                if self.ng(*s) {
                    let d = g.data().iter().zip(self.value(*a).data()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    acc(*s, Tensor::scalar(d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, v| x * gelu_grad(v))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, s| x * s * (T::one() - s))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, e| x * e)),
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |x, v| x / v)),
            Op::LayerNorm { x, inv_std } => {
                let (n, m) = out.shape();
                let mf = T::lit(m as f64);
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    let (gy, y) = (g.row(r), out.row(r));
                    let mean_g = gy.iter().copied().fold(T::zero(), |a, b| a + b) / mf;
                    let mean_gy = gy.iter().zip(y).fold(T::zero(), |a, (&p, &q)| a + p * q) / mf;
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *d = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(a) => {
                let (n, m) = out.shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    let (gy, y) = (g.row(r), out.row(r));
                    let dot = gy.iter().zip(y).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let (n, m) = out.shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    let (gy, y) = (g.row(r), out.row(r));
                    let s = gy.iter().copied().fold(T::zero(), |a, b| a + b);
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *d = gi - yi.exp() * s;
                    }
                }
                acc(*a, dx);
            }
            Op::L2NormRows { x, norms } => {
                let (n, m) = out.shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    let (gy, y) = (g.row(r), out.row(r));
                    let dot = gy.iter().zip(y).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *d = (gi - yi * dot) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.get(0, 0)));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        acc(p, Tensor::from_fn(g.rows(), pc, |r, c| g.get(r, off + c)));
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.ng(p) {
                        acc(p, Tensor::from_vec(pr, pc, g.data()[off * pc..(off + pr) * pc].to_vec()));
                    }
                    off += pr;
                }
            }
            Op::MergeRows(picks) => {
                let mut partial: HashMap<usize, Tensor<T>> = HashMap::new();
                for (r, &(v, src)) in picks.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let (vr, vc) = self.shape(v);
                    let t = partial.entry(v.0).or_insert_with(|| Tensor::zeros(vr, vc));
                    for (d, &x) in t.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                let mut keys: Vec<usize> = partial.keys().copied().collect();
                keys.sort_unstable();
                for k in keys {
                    let t = partial.remove(&k).expect("key present");
                    acc(Var(k), t);
                }
            }
            Op::PickElems { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (k, &(i, j)) in idx.iter().enumerate() {
                    let cur = dx.get(i, j);
                    dx.set(i, j, cur + g.get(k, 0));
                }
                acc(*x, dx);
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| g.get(r, c) * (sigmoid(xv.get(r, c)) - target.get(r, c)));
                acc(*x, dx);
            }
            Op::Im2Col3 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.shape(*x).1;
                let mut dx = Tensor::zeros(h * w, c);
                for y in 0..h {
                    for xx in 0..w {
                        let grow = g.row(y * w + xx);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                let k = ky * 3 + kx;
                                let drow = dx.row_mut(sy as usize * w + sx as usize);
                                for (d, &gv) in drow.iter_mut().zip(&grow[k * c..(k + 1) * c]) {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Resize { x, plan } => {
                acc(*x, plan.apply_transpose(g));
            }
            Op::AvgPool2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.shape(*x).1;
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                let mut dx = Tensor::zeros(h * w, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let ys = (2 * oy)..(2 * oy + 2).min(h);
                        let xs = (2 * ox)..(2 * ox + 2).min(w);
                        let cnt = T::lit((ys.len() * xs.len()) as f64);
                        let grow = g.row(oy * ow + ox);
                        for y in ys {
                            for xx in xs.clone() {
                                for (d, &gv) in dx.row_mut(y * w + xx).iter_mut().zip(grow) {
                                    *d += gv / cnt;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Deformable { values, offsets, weights, geom } => {
                let SampleGeometry { height: h, width: w, heads, points } = *geom;
                let (vv, ov, wv) = (self.value(*values), self.value(*offsets), self.value(*weights));
                let d = vv.cols();
                let dh = d / heads;
                let mut dv = Tensor::zeros(h * w, d);
                let mut doff = Tensor::zeros(h * w, heads * points * 2);
                let mut dw = Tensor::zeros(h * w, heads * points);
                let mut buf = vec![T::zero(); dh];
                for p in 0..h * w {
                    let (py, px) = (T::lit((p / w) as f64), T::lit((p % w) as f64));
                    for hd in 0..heads {
                        let gh = &g.row(p)[hd * dh..(hd + 1) * dh];
                        for k in 0..points {
                            let j = hd * points + k;
                            let y = py + ov.get(p, 2 * j);
                            let x = px + ov.get(p, 2 * j + 1);
                            let a = wv.get(p, j);
                            bilinear_sample(vv, h, w, y, x, hd * dh, &mut buf);
                            let ga = gh.iter().zip(&buf).fold(T::zero(), |s, (&gi, &bi)| s + gi * bi);
                            dw.set(p, j, ga);
                            let (mut gy, mut gx) = (T::zero(), T::zero());
                            for (idx, cw, dwy, dwx) in bilinear_corners(y, x, h, w) {
                                let Some(q) = idx else { continue };
                                let vrow = &vv.row(q)[hd * dh..(hd + 1) * dh];
                                let dot = gh.iter().zip(vrow).fold(T::zero(), |s, (&gi, &vi)| s + gi * vi);
                                gy += a * dwy * dot;
                                gx += a * dwx * dot;
                                if cw != T::zero() {
                                    let drow = &mut dv.row_mut(q)[hd * dh..(hd + 1) * dh];
                                    for (dd, &gi) in drow.iter_mut().zip(gh) {
                                        *dd += a * cw * gi;
                                    }
                                }
                            }
                            doff.set(p, 2 * j, gy);
                            doff.set(p, 2 * j + 1, gx);
                        }
                    }
                }
                acc(*values, dv);
                acc(*offsets, doff);
                acc(*weights, dw);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(out ⊙ probe))/d(input) for a graph builder.
    fn check_op(shape: (usize, usize), build: impl Fn(&mut Graph<f64>, Var) -> Var, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::<f64>::randn(shape.0, shape.1, 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>, Tensor<f64>) {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            let (r, c) = g.shape(y);
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let probe = g.constant(Tensor::randn(r, c, 1.0, &mut prng));
            let prod = g.mul(y, probe);
            let s = g.sum_all(prod);
            let grads = g.backward(s);
            (g.scalar_value(s), grads.wrt(xv).cloned(), g.value(y).clone())
        };
        let (_, analytic, _) = eval(&x0);
        let analytic = analytic.expect("input gradient");
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_op((3, 4), |g, x| g.gelu(x), 1);
        check_op((3, 4), |g, x| g.sigmoid(x), 2);
        check_op((3, 4), |g, x| g.exp(x), 3);
        check_op((3, 4), |g, x| g.layer_norm(x), 4);
        check_op((3, 4), |g, x| g.softmax(x), 5);
        check_op((3, 4), |g, x| g.log_softmax(x), 6);
        check_op((3, 4), |g, x| g.l2_normalize_rows(x), 7);
        check_op((3, 4), |g, x| g.sum_rows(x), 8);
        check_op((3, 4), |g, x| g.transpose(x), 9);
        check_op((3, 4), |g, x| g.slice_cols(x, 1, 2), 10);
        check_op((3, 4), |g, x| g.gather_rows(x, &[2, 0, 2]), 11);
        check_op((3, 4), |g, x| g.pick(x, &[(0, 1), (2, 3), (0, 1)]), 12);
        check_op((3, 4), |g, x| {
            let t = Tensor::from_fn(3, 4, |r, c| ((r + c) % 2) as f64);
            g.bce_logits(x, &t)
        }, 13);
        check_op((3, 4), |g, x| {
            let y = g.exp(x);
            g.ln(y)
        }, 14);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let b = Tensor::<f64>::randn(4, 2, 1.0, &mut rng);
        let row = Tensor::<f64>::randn(1, 4, 1.0, &mut rng);
        let col = Tensor::<f64>::from_fn(3, 1, |r, _| 1.5 + r as f64);
        check_op((3, 4), |g, x| {
            let bv = g.input(b.clone());
            g.matmul(x, bv)
        }, 21);
        check_op((3, 4), |g, x| {
            let bv = g.input(b.transpose());
            g.matmul_t(x, bv)
        }, 22);
        check_op((3, 4), |g, x| {
            let rv = g.input(row.clone());
            g.mul_row(x, rv)
        }, 23);
        check_op((3, 4), |g, x| {
            let cv = g.input(col.clone());
            g.div_col(x, cv)
        }, 24);
        check_op((3, 4), |g, x| {
            let s = g.sum_all(x);
            let s2 = g.exp(s);
            let y = g.mul_scalar(x, s2);
            g.mul(y, x)
        }, 25);
        // gradient flowing into the denominator
        check_op((3, 1), |g, x| {
            let e = g.exp(x);
            let a = g.input(Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0));
            g.div_col(a, e)
        }, 26);
        check_op((1, 1), |g, x| {
            let e = g.exp(x);
            let a = g.scale(e, 2.0);
            let b = g.add_const(e, 1.0);
            g.div(a, b)
        }, 27);
    }

    #[test]
    fn spatial_ops_match_finite_differences() {
        check_op((5 * 3, 2), |g, x| g.im2col3(x, 5, 3), 30);
        check_op((5 * 3, 2), |g, x| g.avg_pool2(x, 5, 3), 31);
        let plan = Arc::new(ResizePlan::new((3, 2), (7, 5)));
        check_op((2, 6), move |g, x| g.resize(x, &plan), 32);
    }

    #[test]
    fn deformable_sampling_gradients() {
        let geom = SampleGeometry { height: 3, width: 4, heads: 2, points: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let values = Tensor::<f64>::randn(12, 4, 1.0, &mut rng);
        let offsets = Tensor::<f64>::randn(12, 8, 0.7, &mut rng);
        let weights = Tensor::<f64>::randn(12, 4, 1.0, &mut rng);
        let (o1, w1) = (offsets.clone(), weights.clone());
        check_op((12, 4), move |g, x| {
            let o = g.constant(o1.clone());
            let w = g.constant(w1.clone());
            g.deformable_sample(x, o, w, geom)
        }, 41);
        let (v2, w2) = (values.clone(), weights.clone());
        check_op((12, 8), move |g, x| {
            let v = g.constant(v2.clone());
            let w = g.constant(w2.clone());
            let x = g.scale(x, 0.7);
            g.deformable_sample(v, x, w, geom)
        }, 42);
        let (v3, o3) = (values, offsets);
        check_op((12, 4), move |g, x| {
            let v = g.constant(v3.clone());
            let o = g.constant(o3.clone());
            g.deformable_sample(v, o, x, geom)
        }, 43);
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(1, 3, &[0.3, 5.0, -1.0]));
        let m = g.constant(Tensor::from_f64(1, 3, &[0.0, f64::NEG_INFINITY, 0.0]));
        let s = g.add(x, m);
        let p = g.softmax(s);
        assert_eq!(g.value(p).get(0, 1), 0.0);
        let total: f64 = g.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let l = g.pick(p, &[(0, 0)]);
        let l = g.sum_all(l);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(x).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn shared_param_reads_alias_one_node() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(1, 1, &[2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let (pid, grad) = grads.params().next().unwrap();
        assert_eq!(pid, id);
        assert_eq!(grad.get(0, 0), 4.0);
    }
}
