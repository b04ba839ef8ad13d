//! Query decoder with shared cross-attention: each layer's queries read the
//! image's concepts and then the enhanced grid through one projection set,
//! talk among themselves, and emit mask queries whose inner products with the
//! grid are the mask logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cave::GridVar;
use crate::embedding::{CategoryEmbeddingTable, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pooling weights below this total fall back to the unweighted grid mean.
pub const POOL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub ffn_hidden: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.decoder_layers", "must be at least 1"));
        }
        if self.queries == 0 {
            return Err(Error::config("model.queries", "must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("model.heads", format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayer {
    /// Used for both the concept step and the visual step.
    pub shared: Attention,
    pub concept_norm: LayerNorm,
    pub visual_norm: LayerNorm,
    pub self_attn: Attention,
    pub self_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub query_init: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub mask_norm: LayerNorm,
    pub mask_head: FeedForward,
}

impl DecoderParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.dim, config.heads, config.ffn_hidden);
        let query_init = store.add("decoder.query_init", Tensor::randn(config.queries, d, 0.02, rng));
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayer {
                    shared: Attention::new(store, &format!("{p}.shared"), d, h, rng),
                    concept_norm: LayerNorm::new(store, &format!("{p}.concept_norm"), d),
                    visual_norm: LayerNorm::new(store, &format!("{p}.visual_norm"), d),
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), d, h, rng),
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, f, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let mask_norm = LayerNorm::new(store, "decoder.mask_norm", d);
        let mask_head = FeedForward::new(store, "decoder.mask_head", d, f, rng);
        Ok(DecoderParams { config, query_init, layers, mask_norm, mask_head })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerOutput {
    pub queries: Var,
    pub mask_queries: Var,
    /// `[K, H'*W']`.
    pub mask_logits: Var,
}

/// Run all decoder layers. `concepts` holds the image's member categories
/// only; `enhanced` is the enhancer output for the same image.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &DecoderParams,
    concepts: Var,
    enhanced: GridVar,
) -> Result<Vec<DecoderLayerOutput>> {
    let (m, d) = g.shape(concepts);
    if m == 0 {
        return Err(Error::invalid("decoder needs at least one member category"));
    }
    if d != params.config.dim || g.shape(enhanced.var) != (enhanced.height * enhanced.width, params.config.dim) {
        return Err(Error::invalid(format!("decoder dim {} does not match its inputs", params.config.dim)));
    }
    let concept_kv = g.layer_norm(concepts);
    let visual_kv = g.layer_norm(enhanced.var);
    let mut q = g.param(store, params.query_init);
    let mut out = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let n = layer.concept_norm.forward(g, store, q);
        let a = layer.shared.forward(g, store, n, concept_kv, None)?;
        q = g.add(q, a);
        let n = layer.visual_norm.forward(g, store, q);
        let a = layer.shared.forward(g, store, n, visual_kv, None)?;
        q = g.add(q, a);
        let n = layer.self_norm.forward(g, store, q);
        let a = layer.self_attn.forward(g, store, n, n, None)?;
        q = g.add(q, a);
        let n = layer.ffn_norm.forward(g, store, q);
        let f = layer.ffn.forward(g, store, n);
        q = g.add(q, f);
        let n = params.mask_norm.forward(g, store, q);
        let mask_queries = params.mask_head.forward(g, store, n);
        let mask_logits = compute_masks(g, mask_queries, enhanced.var);
        out.push(DecoderLayerOutput { queries: q, mask_queries, mask_logits });
    }
    Ok(out)
}

/// Mask logits `[K, positions]` as inner products of mask queries with the grid.
pub fn compute_masks<T: Scalar>(g: &mut Graph<T>, mask_queries: Var, enhanced: Var) -> Var {
    g.matmul_t(mask_queries, enhanced)
}

/// Sigmoid-weighted mean of `global` under each mask. Rows whose weights
/// sum below [`POOL_EPS`] take the plain grid mean instead.
pub fn mask_pool<T: Scalar>(g: &mut Graph<T>, mask_logits: Var, global: Var) -> Result<Var> {
    let (k, p) = g.shape(mask_logits);
    if g.shape(global).0 != p {
        return Err(Error::invalid(format!("masks cover {p} positions but the grid has {}", g.shape(global).0)));
    }
    let w = g.sigmoid(mask_logits);
    let num = g.matmul(w, global);
    let den = g.sum_rows(w);
    let low: Vec<usize> = (0..k).filter(|&r| g.value(den).get(r, 0).as_f64() < POOL_EPS).collect();
    if low.is_empty() {
        return Ok(g.div_col(num, den));
    }
    let safe_den = {
        let fixed = Tensor::from_fn(k, 1, |r, _| if low.contains(&r) { T::one() } else { T::zero() });
        let c = g.constant(fixed);
        g.add(den, c)
    };
    let pooled = g.div_col(num, safe_den);
    let gv = g.value(global).clone();
    let mean = Tensor::from_fn(1, gv.cols(), |_, c| (0..p).map(|r| gv.get(r, c)).fold(T::zero(), |s, x| s + x) / T::lit(p as f64));
    let mean = g.constant(mean);
    let picks: Vec<(Var, usize)> = (0..k).map(|r| if low.contains(&r) { (mean, 0) } else { (pooled, r) }).collect();
    Ok(g.merge_rows(&picks))
}

/// Scaled cosine scores of mask embeddings against `[table; no_object]`,
/// optionally multiplied elementwise by `weights` (length `n + 1`) before the
/// temperature. Returns `[K, n+1]` logits.
pub fn class_logits<T: Scalar>(
    g: &mut Graph<T>,
    mask_embeddings: Var,
    table: &Tensor<T>,
    no_object: Var,
    logit_scale: Var,
    weights: Option<&[T]>,
) -> Result<Var> {
    let me = g.value(mask_embeddings);
    for r in 0..me.rows() {
        let n2 = me.row(r).iter().fold(T::zero(), |s, &x| s + x * x);
        if !(n2 > T::zero()) || !n2.is_finite() {
            return Err(Error::Numerical(format!("mask embedding {r} has zero or non-finite norm")));
        }
    }
    let e = g.l2_normalize_rows(mask_embeddings);
    let t = g.constant(table.clone());
    let nobj = g.l2_normalize_rows(no_object);
    let keys = g.concat_rows(&[t, nobj]);
    let mut scores = g.matmul_t(e, keys);
    if let Some(w) = weights {
        if w.len() != table.rows() + 1 {
            return Err(Error::invalid(format!("{} weights for {} classes", w.len(), table.rows() + 1)));
        }
        let wv = g.constant(Tensor::from_vec(1, w.len(), w.to_vec()));
        scores = g.mul_row(scores, wv);
    }
    let s = g.exp(logit_scale);
    Ok(g.mul_scalar(scores, s))
}

/// `[K, n+1]` class probabilities at a fixed temperature.
pub fn classify<T: Scalar>(mask_embeddings: &Tensor<T>, table: &CategoryEmbeddingTable<T>, no_object: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    classify_weighted(mask_embeddings, table, no_object, temperature, None)
}

pub fn classify_weighted<T: Scalar>(
    mask_embeddings: &Tensor<T>,
    table: &CategoryEmbeddingTable<T>,
    no_object: &Tensor<T>,
    temperature: f64,
    weights: Option<&[T]>,
) -> Result<Tensor<T>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut g = Graph::new();
    let e = g.constant(mask_embeddings.clone());
    let n = g.constant(no_object.clone());
    let s = g.constant(Tensor::scalar(T::lit((1.0 / temperature).ln())));
    let logits = class_logits(&mut g, e, &table.vectors, n, s, weights)?;
    let p = g.softmax(logits);
    Ok(g.value(p).clone())
}

/// Mask logits for plain tensors: `[K, D]` queries against a grid.
pub fn masks_for_grid<T: Scalar>(mask_queries: &Tensor<T>, grid: &FeatureGrid<T>) -> Tensor<T> {
    mask_queries.matmul_t(&grid.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> DecoderConfig {
        DecoderConfig { dim: 8, heads: 2, layers: 2, queries: 3, ffn_hidden: 16 }
    }

    #[test]
    fn zeroed_branches_keep_initial_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = DecoderParams::new(&mut store, config(), &mut rng).unwrap();
        for l in &p.layers {
            for lin in [l.shared.out, l.self_attn.out, l.ffn.fc2] {
                lin.zero(&mut store);
            }
        }
        let mut g = Graph::new();
        let c = g.constant(Tensor::randn(2, 8, 1.0, &mut rng));
        let v = GridVar { var: g.constant(Tensor::randn(9, 8, 1.0, &mut rng)), height: 3, width: 3 };
        let out = decoder_forward(&mut g, &store, &p, c, v).unwrap();
        assert!(g.value(out.last().unwrap().queries).bit_eq(store.get(p.query_init)));
    }

    #[test]
    fn final_layer_masks_are_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let p = DecoderParams::new(&mut store, config(), &mut rng).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::randn(2, 8, 1.0, &mut rng));
        let grid = FeatureGrid::new(3, 3, 4, Tensor::randn(9, 8, 1.0, &mut rng)).unwrap();
        let v = GridVar { var: g.constant(grid.features.clone()), height: 3, width: 3 };
        let out = decoder_forward(&mut g, &store, &p, c, v).unwrap();
        let last = out.last().unwrap();
        let again = masks_for_grid(g.value(last.mask_queries), &grid);
        assert!(g.value(last.mask_logits).bit_eq(&again));
        let empty = g.constant(Tensor::zeros(0, 8));
        assert!(decoder_forward(&mut g, &store, &p, empty, v).is_err());
    }

    #[test]
    fn constant_grid_gives_constant_logits() {
        let q = Tensor::from_f64(1, 3, &[0.5, -1.0, 2.0]);
        let grid = FeatureGrid::new(2, 2, 4, Tensor::from_fn(4, 3, |_, c| [1.0, 2.0, 3.0][c])).unwrap();
        let m = masks_for_grid(&q, &grid);
        assert!(m.data().iter().all(|&v| v == 4.5));
        let orth = Tensor::from_f64(1, 3, &[2.0, -1.0, 0.0]);
        assert!(masks_for_grid(&orth, &grid).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masks_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f64>::randn(2, 8, 1.0, &mut rng);
        let grid = FeatureGrid::new(3, 3, 4, Tensor::randn(9, 8, 1.0, &mut rng)).unwrap();
        let m = masks_for_grid(&q, &grid);
        for k in 0..2 {
            for p in 0..9 {
                let dot: f64 = (0..8).map(|d| q.get(k, d) * grid.features.get(p, d)).sum();
                assert!((m.get(k, p) - dot).abs() < 1e-12);
            }
        }
        let unit = Tensor::from_fn(9, 9, |r, c| if r == c { 1.0 } else { 0.0 });
        let ug = FeatureGrid::new(3, 3, 4, unit.clone()).unwrap();
        let m = masks_for_grid(&unit.gather_rows(&[4]), &ug);
        let best = (0..9).max_by(|&a, &b| m.get(0, a).partial_cmp(&m.get(0, b)).unwrap()).unwrap();
        assert_eq!(best, 4);
    }

    fn pool(logits: Tensor<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let l = g.constant(logits);
        let v = g.constant(grid.clone());
        let e = mask_pool(&mut g, l, v).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn pooling_degenerate_and_uniform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Tensor::<f64>::randn(6, 4, 1.0, &mut rng);
        let hard = Tensor::from_fn(1, 6, |_, c| if c == 2 { f64::INFINITY } else { f64::NEG_INFINITY });
        assert_eq!(pool(hard, &grid).row(0), grid.row(2));
        let mean: Vec<f64> = (0..4).map(|c| (0..6).map(|r| grid.get(r, c)).sum::<f64>() / 6.0).collect();
        let uni = pool(Tensor::full(1, 6, 0.3), &grid);
        let off = pool(Tensor::full(1, 6, f64::NEG_INFINITY), &grid);
        for c in 0..4 {
            assert!((uni.get(0, c) - mean[c]).abs() < 1e-12);
            assert!((off.get(0, c) - mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_matches_weighted_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Tensor::<f64>::randn(9, 4, 1.0, &mut rng);
        let logits = Tensor::<f64>::randn(3, 9, 2.0, &mut rng);
        let got = pool(logits.clone(), &grid);
        for k in 0..3 {
            let w: Vec<f64> = (0..9).map(|p| 1.0 / (1.0 + (-logits.get(k, p)).exp())).collect();
            let z: f64 = w.iter().sum();
            for c in 0..4 {
                let e: f64 = (0..9).map(|p| w[p] * grid.get(p, c)).sum::<f64>() / z;
                assert!((got.get(k, c) - e).abs() < 1e-6);
            }
        }
    }

    fn orthonormal_table() -> CategoryEmbeddingTable<f64> {
        CategoryEmbeddingTable::new(Tensor::from_fn(3, 4, |r, c| if r == c { 1.0 } else { 0.0 }), vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn classification_picks_matching_row() {
        let t = orthonormal_table();
        let nobj = Tensor::from_f64(1, 4, &[0.0, 0.0, 0.0, 1.0]);
        let e = Tensor::from_f64(1, 4, &[0.0, 1.0, 0.0, 0.0]);
        let p = classify(&e, &t, &nobj, 0.07).unwrap();
        let best = (0..4).max_by(|&a, &b| p.get(0, a).partial_cmp(&p.get(0, b)).unwrap()).unwrap();
        assert_eq!(best, 1);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let scaled = classify(&e.map(|v| v * 7.5), &t, &nobj, 0.07).unwrap();
        assert!(scaled.max_abs_diff(&p) < 1e-15);
        assert!(matches!(classify(&Tensor::zeros(1, 4), &t, &nobj, 0.07), Err(Error::Numerical(_))));
        assert!(classify(&e, &t, &nobj, 0.0).is_err());
    }

    #[test]
    fn classification_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw = Tensor::<f64>::randn(4, 6, 1.0, &mut rng);
        let unit = |t: &Tensor<f64>| {
            Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) / t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let table = CategoryEmbeddingTable::new(unit(&raw), (0..4).map(|i| i.to_string()).collect()).unwrap();
        let nobj = Tensor::<f64>::randn(1, 6, 1.0, &mut rng);
        let e = Tensor::<f64>::randn(3, 6, 1.0, &mut rng);
        let temp = 0.2;
        let p = classify(&e, &table, &nobj, temp).unwrap();
        let keys: Vec<Vec<f64>> = (0..4).map(|r| table.vectors.row(r).to_vec()).chain(std::iter::once(unit(&nobj).row(0).to_vec())).collect();
        let en = unit(&e);
        for k in 0..3 {
            let s: Vec<f64> = keys.iter().map(|key| (0..6).map(|d| en.get(k, d) * key[d]).sum::<f64>() / temp).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..5 {
                assert!((p.get(k, j) - (s[j] - mx).exp() / z).abs() < 1e-6);
            }
        }
    }
}
