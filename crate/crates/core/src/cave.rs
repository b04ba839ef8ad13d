//! Concept-aware visual enhancer: stacked layers that let category embeddings
//! read the image (text-to-image attention), then let every image position
//! read only the categories named for its own image (masked image-to-text
//! attention), followed by deformable self-attention over the grid.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SampleGeometry, Var};
use crate::embedding::{CategoryEmbeddingTable, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{check_mask, Attention, FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DsaMode {
    #[default]
    Deformable,
    /// Ordinary multi-head self-attention over the flattened grid.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaveConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub dsa_mode: DsaMode,
}

impl CaveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.enhancer_layers", "must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("model.heads", format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.points == 0 {
            return Err(Error::config("model.points", "must be at least 1"));
        }
        Ok(())
    }
}

/// `B x m` additive mask: 0 where image `i` names batch category `j`, `-inf`
/// elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskMatrix<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> AttentionMaskMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        check_mask(&values, values.rows(), values.cols())?;
        Ok(AttentionMaskMatrix { values })
    }

    pub fn images(&self) -> usize {
        self.values.rows()
    }

    /// Row `i` repeated once per query position.
    fn broadcast(&self, i: usize, rows: usize) -> Tensor<T> {
        let row = self.values.row(i);
        Tensor::from_fn(rows, row.len(), |_, c| row[c])
    }
}

/// Category embeddings for one batch and which image names which category.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchConceptContext<T> {
    pub batch_categories: Vec<usize>,
    pub memberships: Vec<BTreeSet<usize>>,
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> BatchConceptContext<T> {
    /// Batch categories are the ascending union of the memberships.
    pub fn from_memberships(table: &CategoryEmbeddingTable<T>, memberships: Vec<BTreeSet<usize>>) -> Result<Self> {
        let union: BTreeSet<usize> = memberships.iter().flatten().copied().collect();
        Self::with_categories(table, union.into_iter().collect(), memberships)
    }

    /// Explicit batch category order; may include categories no image names.
    pub fn with_categories(table: &CategoryEmbeddingTable<T>, batch_categories: Vec<usize>, memberships: Vec<BTreeSet<usize>>) -> Result<Self> {
        if batch_categories.is_empty() {
            return Err(Error::invalid("batch has no categories"));
        }
        let known: BTreeSet<usize> = batch_categories.iter().copied().collect();
        if known.len() != batch_categories.len() {
            return Err(Error::invalid("batch categories repeat"));
        }
        for (i, m) in memberships.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::invalid(format!("image {i} has an empty concept set")));
            }
            if let Some(c) = m.iter().find(|c| !known.contains(c)) {
                return Err(Error::invalid(format!("image {i} names category {c} outside the batch")));
            }
        }
        let sub = table.subset(&batch_categories)?;
        Ok(BatchConceptContext { batch_categories, memberships, embeddings: sub.vectors })
    }

    pub fn len(&self) -> usize {
        self.batch_categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_categories.is_empty()
    }

    /// Batch row indices of image `i`'s categories, ascending.
    pub fn member_rows(&self, i: usize) -> Vec<usize> {
        self.batch_categories.iter().enumerate().filter(|(_, c)| self.memberships[i].contains(c)).map(|(r, _)| r).collect()
    }

    pub fn mask(&self) -> AttentionMaskMatrix<T> {
        let values = Tensor::from_fn(self.memberships.len(), self.len(), |i, j| {
            if self.memberships[i].contains(&self.batch_categories[j]) {
                T::zero()
            } else {
                T::neg_infinity()
            }
        });
        AttentionMaskMatrix { values }
    }
}

/// Learned-offset sampled attention over a feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformableAttention {
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformableAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, points: usize, rng: &mut R) -> Self {
        let value = Linear::new(store, &format!("{name}.value"), dim, dim, rng);
        let offsets = Linear::new(store, &format!("{name}.offsets"), dim, heads * points * 2, rng);
        let weights = Linear::new(store, &format!("{name}.weights"), dim, heads * points, rng);
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, rng);
        let w = store.get(offsets.weight).map(|v| v * T::lit(0.1));
        store.set(offsets.weight, w);
        // Start each head's points on a ring around the query position.
        let total = heads * points;
        let ring = Tensor::from_fn(1, total * 2, |_, c| {
            let j = c / 2;
            let angle = 2.0 * PI * j as f64 / total as f64 + 0.3;
            let radius = 1.0 + (j % points) as f64 * 0.5;
            T::lit(if c % 2 == 0 { radius * angle.sin() } else { radius * angle.cos() })
        });
        store.set(offsets.bias, ring);
        DeformableAttention { value, offsets, weights, out, heads, points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridSelfAttention {
    Deformable(DeformableAttention),
    Dense(Attention),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaveLayer {
    pub t2i: Attention,
    pub t2i_norm_q: LayerNorm,
    pub t2i_norm_kv: LayerNorm,
    pub text_ffn: FeedForward,
    pub text_ffn_norm: LayerNorm,
    pub i2t: Attention,
    pub i2t_norm_q: LayerNorm,
    pub i2t_norm_kv: LayerNorm,
    pub image_ffn: FeedForward,
    pub image_ffn_norm: LayerNorm,
    pub dsa: GridSelfAttention,
    pub dsa_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaveParams {
    pub config: CaveConfig,
    pub layers: Vec<CaveLayer>,
}

impl CaveParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: CaveConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.dim, config.heads, config.ffn_hidden);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("cave.{l}");
                CaveLayer {
                    t2i: Attention::new(store, &format!("{p}.t2i"), d, h, rng),
                    t2i_norm_q: LayerNorm::new(store, &format!("{p}.t2i_norm_q"), d),
                    t2i_norm_kv: LayerNorm::new(store, &format!("{p}.t2i_norm_kv"), d),
                    text_ffn: FeedForward::new(store, &format!("{p}.text_ffn"), d, f, rng),
                    text_ffn_norm: LayerNorm::new(store, &format!("{p}.text_ffn_norm"), d),
                    i2t: Attention::new(store, &format!("{p}.i2t"), d, h, rng),
                    i2t_norm_q: LayerNorm::new(store, &format!("{p}.i2t_norm_q"), d),
                    i2t_norm_kv: LayerNorm::new(store, &format!("{p}.i2t_norm_kv"), d),
                    image_ffn: FeedForward::new(store, &format!("{p}.image_ffn"), d, f, rng),
                    image_ffn_norm: LayerNorm::new(store, &format!("{p}.image_ffn_norm"), d),
                    dsa: match config.dsa_mode {
                        DsaMode::Deformable => GridSelfAttention::Deformable(DeformableAttention::new(store, &format!("{p}.dsa"), d, h, config.points, rng)),
                        DsaMode::Dense => GridSelfAttention::Dense(Attention::new(store, &format!("{p}.dsa"), d, h, rng)),
                    },
                    dsa_norm: LayerNorm::new(store, &format!("{p}.dsa_norm"), d),
                }
            })
            .collect();
        Ok(CaveParams { config, layers })
    }

    /// The last projection of every residual branch. Zeroing them all turns
    /// the enhancer into the identity.
    pub fn branch_outputs(&self) -> Vec<Linear> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.t2i.out, l.text_ffn.fc2, l.i2t.out, l.image_ffn.fc2]);
            out.push(match l.dsa {
                GridSelfAttention::Deformable(d) => d.out,
                GridSelfAttention::Dense(a) => a.out,
            });
        }
        out
    }
}

/// Multi-head attention of `queries` over `keys_values` under an additive
/// `{0, -inf}` mask.
pub fn masked_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    attn: &Attention,
    queries: Var,
    keys_values: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    attn.forward(g, store, queries, keys_values, Some(mask))
}

/// Deformable attention over an `[height*width, dim]` grid node.
pub fn deformable_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dsa: &DeformableAttention,
    grid: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    let n = height * width;
    let values = dsa.value.forward(g, store, grid);
    let offsets = dsa.offsets.forward(g, store, grid);
    if !g.value(offsets).all_finite() {
        return Err(Error::Numerical("deformable attention predicted non-finite sampling offsets".into()));
    }
    let logits = dsa.weights.forward(g, store, grid);
    let grouped = g.reshape(logits, n * dsa.heads, dsa.points);
    let weights = g.softmax(grouped);
    let weights = g.reshape(weights, n, dsa.heads * dsa.points);
    let geom = SampleGeometry { height, width, heads: dsa.heads, points: dsa.points };
    let sampled = g.deformable_sample(values, offsets, weights, geom);
    Ok(dsa.out.forward(g, store, sampled))
}

/// Convenience wrapper over plain feature grids.
pub fn deformable_self_attention_grid<T: Scalar>(grid: &FeatureGrid<T>, store: &ParamStore<T>, dsa: &DeformableAttention) -> Result<FeatureGrid<T>> {
    let mut g = Graph::new();
    let x = g.constant(grid.features.clone());
    let y = deformable_self_attention(&mut g, store, dsa, x, grid.height, grid.width)?;
    FeatureGrid::new(grid.height, grid.width, grid.stride, g.value(y).clone())
}

/// One image's grid inside a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct CaveOutput {
    /// Enhanced grid per image.
    pub enhanced: Vec<Var>,
    /// Per-image concept state `[m, dim]`; only the image's member rows differ
    /// from the input embeddings.
    pub image_concepts: Vec<Var>,
    /// Batch-level concepts: mean of the member images' states per row.
    pub refined: Var,
}

pub fn cave_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &CaveParams,
    ctx: &BatchConceptContext<T>,
    grids: &[GridVar],
    mask: &AttentionMaskMatrix<T>,
) -> Result<CaveOutput> {
    let m = ctx.len();
    if grids.len() != ctx.memberships.len() || mask.values.shape() != (grids.len(), m) {
        return Err(Error::invalid(format!(
            "{} grids, {} membership sets and a {:?} mask do not line up",
            grids.len(),
            ctx.memberships.len(),
            mask.values.shape()
        )));
    }
    if ctx.embeddings.cols() != params.config.dim {
        return Err(Error::invalid(format!("concept dim {} does not match enhancer dim {}", ctx.embeddings.cols(), params.config.dim)));
    }
    check_mask(&mask.values, grids.len(), m)?;
    for i in 0..grids.len() {
        for j in 0..m {
            let open = mask.values.get(i, j) == T::zero();
            if open != ctx.memberships[i].contains(&ctx.batch_categories[j]) {
                return Err(Error::invalid(format!("mask entry ({i}, {j}) disagrees with the membership of image {i}")));
            }
        }
    }
    let base = g.constant(ctx.embeddings.clone());
    let mut enhanced = Vec::with_capacity(grids.len());
    let mut image_concepts = Vec::with_capacity(grids.len());
    for (i, grid) in grids.iter().enumerate() {
        if g.shape(grid.var) != (grid.height * grid.width, params.config.dim) {
            return Err(Error::invalid(format!("grid {i} has shape {:?}", g.shape(grid.var))));
        }
        let members = ctx.member_rows(i);
        let row_mask = mask.broadcast(i, grid.height * grid.width);
        let mut e = base;
        let mut v = grid.var;
        for layer in &params.layers {
            let em = g.gather_rows(e, &members);
            let q = layer.t2i_norm_q.forward(g, store, em);
            let kv = layer.t2i_norm_kv.forward(g, store, v);
            let a = layer.t2i.forward(g, store, q, kv, None)?;
            let em = g.add(em, a);
            let n = layer.text_ffn_norm.forward(g, store, em);
            let f = layer.text_ffn.forward(g, store, n);
            let em = g.add(em, f);
            let mut pos = 0;
            let picks: Vec<(Var, usize)> = (0..m)
                .map(|j| {
                    if members.get(pos) == Some(&j) {
                        pos += 1;
                        (em, pos - 1)
                    } else {
                        (e, j)
                    }
                })
                .collect();
            e = g.merge_rows(&picks);

            let q = layer.i2t_norm_q.forward(g, store, v);
            let kv = layer.i2t_norm_kv.forward(g, store, e);
            let a = masked_cross_attention(g, store, &layer.i2t, q, kv, &row_mask)?;
            v = g.add(v, a);
            let n = layer.image_ffn_norm.forward(g, store, v);
            let f = layer.image_ffn.forward(g, store, n);
            v = g.add(v, f);
            let n = layer.dsa_norm.forward(g, store, v);
            let s = match &layer.dsa {
                GridSelfAttention::Deformable(d) => deformable_self_attention(g, store, d, n, grid.height, grid.width)?,
                GridSelfAttention::Dense(a) => a.forward(g, store, n, n, None)?,
            };
            v = g.add(v, s);
        }
        enhanced.push(v);
        image_concepts.push(e);
    }
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let owners: Vec<usize> = (0..grids.len()).filter(|&i| ctx.memberships[i].contains(&ctx.batch_categories[j])).collect();
        if owners.is_empty() {
            rows.push(g.gather_rows(base, &[j]));
            continue;
        }
        let picks: Vec<(Var, usize)> = owners.iter().map(|&i| (image_concepts[i], j)).collect();
        let stacked = g.merge_rows(&picks);
        let avg = g.constant(Tensor::full(1, owners.len(), T::one() / T::lit(owners.len() as f64)));
        rows.push(g.matmul(avg, stacked));
    }
    let refined = g.concat_rows(&rows);
    Ok(CaveOutput { enhanced, image_concepts, refined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::bilinear_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_with_identity<T: Scalar>(store: &mut ParamStore<T>, dim: usize) -> Attention {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Attention::new(store, "a", dim, 1, &mut rng);
        for l in [a.q, a.k, a.v, a.out] {
            l.assign(store, Tensor::identity(dim));
        }
        a
    }

    #[test]
    fn masked_key_gets_no_weight() {
        let mut store = ParamStore::<f64>::new();
        let a = attention_with_identity(&mut store, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_f64(1, 2, &[1.0, 0.5]));
        let kv = g.constant(Tensor::from_f64(2, 2, &[0.3, -0.7, 9.0, 4.0]));
        let mask = Tensor::from_f64(1, 2, &[0.0, f64::NEG_INFINITY]);
        let y = masked_cross_attention(&mut g, &store, &a, q, kv, &mask).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
        let kv1 = g.constant(Tensor::from_f64(1, 2, &[2.0, 3.0]));
        let y = masked_cross_attention(&mut g, &store, &a, q, kv1, &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let a = attention_with_identity(&mut store, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 2));
        let kv = g.constant(Tensor::zeros(2, 2));
        let inf = f64::NEG_INFINITY;
        let mask = Tensor::from_f64(2, 2, &[0.0, inf, inf, inf]);
        assert!(matches!(masked_cross_attention(&mut g, &store, &a, q, kv, &mask), Err(Error::DegenerateSoftmax { row: 1 })));
    }

    #[test]
    fn single_head_attention_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let a = Attention::new(&mut store, "a", 4, 1, &mut rng);
        let qx = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let kx = Tensor::<f64>::randn(4, 4, 1.0, &mut rng);
        let inf = f64::NEG_INFINITY;
        let mask = Tensor::from_f64(3, 4, &[0.0, inf, 0.0, 0.0, inf, inf, 0.0, inf, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(qx.clone()), g.constant(kx.clone()));
        let y = masked_cross_attention(&mut g, &store, &a, qv, kv, &mask).unwrap();
        let lin = |x: &Tensor<f64>, l: Linear| {
            let w = store.get(l.weight);
            let b = store.get(l.bias);
            Tensor::from_fn(x.rows(), w.cols(), |r, c| b.get(0, c) + (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>())
        };
        let (q, k, v) = (lin(&qx, a.q), lin(&kx, a.k), lin(&kx, a.v));
        let mut o = Tensor::zeros(3, 4);
        for i in 0..3 {
            let s: Vec<f64> = (0..4).map(|j| (0..4).map(|d| q.get(i, d) * k.get(j, d)).sum::<f64>() / 2.0 + mask.get(i, j)).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for d in 0..4 {
                o.set(i, d, (0..4).map(|j| (s[j] - mx).exp() / z * v.get(j, d)).sum());
            }
        }
        let expect = lin(&o, a.out);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }

    fn zero_dsa(store: &mut ParamStore<f64>, dim: usize) -> DeformableAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DeformableAttention::new(store, "dsa", dim, 1, 1, &mut rng);
        d.value.assign(store, Tensor::identity(dim));
        d.out.assign(store, Tensor::identity(dim));
        d.offsets.zero(store);
        d
    }

    #[test]
    fn zero_offsets_single_point_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let d = zero_dsa(&mut store, 4);
        let grid = FeatureGrid::new(3, 3, 4, Tensor::randn(9, 4, 1.0, &mut rng)).unwrap();
        let out = deformable_self_attention_grid(&grid, &store, &d).unwrap();
        assert!(out.features.bit_eq(&grid.features));
    }

    #[test]
    fn deformable_attention_matches_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let d = DeformableAttention::new(&mut store, "dsa", 8, 2, 3, &mut rng);
        let x = Tensor::<f64>::randn(16, 8, 1.0, &mut rng);
        let grid = FeatureGrid::new(4, 4, 4, x.clone()).unwrap();
        let out = deformable_self_attention_grid(&grid, &store, &d).unwrap();
        let lin = |x: &Tensor<f64>, l: Linear| {
            let w = store.get(l.weight);
            let b = store.get(l.bias);
            Tensor::from_fn(x.rows(), w.cols(), |r, c| b.get(0, c) + (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>())
        };
        let (vals, offs, logits) = (lin(&x, d.value), lin(&x, d.offsets), lin(&x, d.weights));
        let bil = |y: f64, xx: f64, c: usize| -> f64 {
            let y0 = y.floor();
            let x0 = xx.floor();
            let mut s = 0.0;
            for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                let (yy, xc) = (y0 + dy, x0 + dx);
                if yy < 0.0 || xc < 0.0 || yy > 3.0 || xc > 3.0 {
                    continue;
                }
                let wgt = (1.0 - (y - yy).abs()) * (1.0 - (xx - xc).abs());
                s += wgt * vals.get(yy as usize * 4 + xc as usize, c);
            }
            s
        };
        let mut sampled = Tensor::zeros(16, 8);
        for p in 0..16 {
            for h in 0..2 {
                let ls: Vec<f64> = (0..3).map(|k| logits.get(p, h * 3 + k)).collect();
                let mx = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = ls.iter().map(|l| (l - mx).exp()).sum();
                for k in 0..3 {
                    let j = h * 3 + k;
                    let y = (p / 4) as f64 + offs.get(p, 2 * j);
                    let xx = (p % 4) as f64 + offs.get(p, 2 * j + 1);
                    let a = (ls[k] - mx).exp() / z;
                    for c in 0..4 {
                        let cur = sampled.get(p, h * 4 + c);
                        sampled.set(p, h * 4 + c, cur + a * bil(y, xx, h * 4 + c));
                    }
                }
            }
        }
        let expect = lin(&sampled, d.out);
        assert!(out.features.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn integer_sample_reads_the_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::<f64>::randn(12, 3, 1.0, &mut rng);
        let mut out = [0.0; 3];
        bilinear_sample(&v, 3, 4, 2.0, 1.0, 0, &mut out);
        assert_eq!(&out, v.row(9));
    }

    #[test]
    fn non_finite_offsets_are_reported() {
        let mut store = ParamStore::<f64>::new();
        let d = zero_dsa(&mut store, 4);
        store.set(d.offsets.bias, Tensor::from_f64(1, 2, &[f64::NAN, 0.0]));
        let grid = FeatureGrid::new(2, 2, 4, Tensor::ones(4, 4)).unwrap();
        assert!(matches!(deformable_self_attention_grid(&grid, &store, &d), Err(Error::Numerical(_))));
    }

    pub(crate) fn tiny_config(mode: DsaMode) -> CaveConfig {
        CaveConfig { dim: 8, heads: 2, layers: 1, points: 2, ffn_hidden: 16, dsa_mode: mode }
    }

    fn table(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> CategoryEmbeddingTable<f64> {
        let raw = Tensor::<f64>::randn(n, dim, 1.0, rng);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let nrm = raw.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                raw.row(r).iter().map(|x| x / nrm).collect()
            })
            .collect();
        CategoryEmbeddingTable::new(Tensor::from_rows(&rows), (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn run(store: &ParamStore<f64>, params: &CaveParams, ctx: &BatchConceptContext<f64>, grids: &[Tensor<f64>]) -> (Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<GridVar> = grids.iter().map(|t| GridVar { var: g.constant(t.clone()), height: 4, width: 4 }).collect();
        let out = cave_forward(&mut g, store, params, ctx, &vars, &ctx.mask()).unwrap();
        (out.enhanced.iter().map(|&v| g.value(v).clone()).collect(), g.value(out.refined).clone())
    }

    #[test]
    fn zeroed_branches_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let params = CaveParams::new(&mut store, tiny_config(DsaMode::Deformable), &mut rng).unwrap();
        for l in params.branch_outputs() {
            l.zero(&mut store);
        }
        let t = table(3, 8, &mut rng);
        let ctx = BatchConceptContext::from_memberships(&t, vec![BTreeSet::from([0, 2])]).unwrap();
        let x = Tensor::randn(16, 8, 1.0, &mut rng);
        let (out, _) = run(&store, &params, &ctx, std::slice::from_ref(&x));
        assert!(out[0].bit_eq(&x));
    }

    #[test]
    fn fully_masked_category_has_no_influence() {
        for mode in [DsaMode::Deformable, DsaMode::Dense] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::<f64>::new();
            let params = CaveParams::new(&mut store, tiny_config(mode), &mut rng).unwrap();
            let t = table(4, 8, &mut rng);
            let memberships = vec![BTreeSet::from([0, 1]), BTreeSet::from([1])];
            let ctx = BatchConceptContext::with_categories(&t, vec![0, 1, 2, 3], memberships).unwrap();
            let grids = vec![Tensor::randn(16, 8, 1.0, &mut rng), Tensor::randn(16, 8, 1.0, &mut rng)];
            let (a, _) = run(&store, &params, &ctx, &grids);
            let mut perturbed = ctx.clone();
            for j in [2, 3] {
                for c in 0..8 {
                    perturbed.embeddings.set(j, c, rng.random::<f64>() * 10.0 - 5.0);
                }
            }
            let (b, _) = run(&store, &params, &perturbed, &grids);
            for (x, y) in a.iter().zip(&b) {
                assert!(x.bit_eq(y));
            }
        }
    }

    #[test]
    fn joint_batch_equals_separate_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let params = CaveParams::new(&mut store, tiny_config(DsaMode::Deformable), &mut rng).unwrap();
        let t = table(5, 8, &mut rng);
        let memberships = vec![BTreeSet::from([0, 3]), BTreeSet::from([1, 3, 4])];
        let ctx = BatchConceptContext::from_memberships(&t, memberships.clone()).unwrap();
        let grids = vec![Tensor::randn(16, 8, 1.0, &mut rng), Tensor::randn(16, 8, 1.0, &mut rng)];
        let (joint, _) = run(&store, &params, &ctx, &grids);
        for i in 0..2 {
            let alone = BatchConceptContext::from_memberships(&t, vec![memberships[i].clone()]).unwrap();
            let (single, _) = run(&store, &params, &alone, &grids[i..i + 1]);
            let scale = single[0].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(joint[i].max_abs_diff(&single[0]) <= 1e-5 * scale);
        }
    }

    #[test]
    fn membership_mask_disagreement_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let params = CaveParams::new(&mut store, tiny_config(DsaMode::Deformable), &mut rng).unwrap();
        let t = table(2, 8, &mut rng);
        let ctx = BatchConceptContext::from_memberships(&t, vec![BTreeSet::from([0])]).unwrap();
        let mut g = Graph::new();
        let v = GridVar { var: g.constant(Tensor::zeros(16, 8)), height: 4, width: 4 };
        let wrong = AttentionMaskMatrix::new(Tensor::zeros(1, 1)).unwrap();
        let ctx2 = BatchConceptContext::with_categories(&t, vec![0, 1], vec![BTreeSet::from([0])]).unwrap();
        assert!(cave_forward(&mut g, &store, &params, &ctx2, &[v], &wrong).is_err());
        assert!(cave_forward(&mut g, &store, &params, &ctx, &[v], &ctx.mask()).is_ok());
        assert!(BatchConceptContext::from_memberships(&t, vec![BTreeSet::new()]).is_err());
    }
}
