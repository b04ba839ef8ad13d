//! Set-prediction training: rasterised targets, bipartite matching, the
//! weighted class/pixel/dice objective with deep supervision, and the AdamW
//! loop over per-image graphs.

mod checkpoint;
mod hungarian;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logits, sigmoid, Graph, ResizePlan, Var};
use crate::data_synth::{Image, PanopticSegmentation};
use crate::embedding::{CategoryEmbeddingTable, FeatureGrid};
use crate::error::{Error, Result};
use crate::model::{Features, ImageOutputs, ImageRequest, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamId;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_SCHEMA_VERSION};
pub use hungarian::{hungarian_match, MatchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_cls: f64,
    pub lambda_pixel: f64,
    pub lambda_dice: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Upper bound on optimiser steps; 0 means no bound beyond `epochs`.
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub aux_supervision: bool,
    /// Re-run matching on every auxiliary layer instead of reusing the final one.
    pub rematch_aux: bool,
    pub freeze_backbone: bool,
    pub no_object_weight: f64,
    pub lr_schedule: LrSchedule,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub grad_clip_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - step / total)^0.9`.
    Poly,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly if total == 0 => base,
            LrSchedule::Poly => base * (1.0 - step as f64 / total as f64).max(0.0).powf(0.9),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cls: 2.0,
            lambda_pixel: 5.0,
            lambda_dice: 5.0,
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 50,
            max_steps: 0,
            batch_size: 4,
            seed: 0,
            precision: Precision::F64,
            aux_supervision: true,
            rematch_aux: false,
            freeze_backbone: true,
            no_object_weight: 0.1,
            lr_schedule: LrSchedule::Constant,
            grad_clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("train.lambda_cls", self.lambda_cls), ("train.lambda_pixel", self.lambda_pixel), ("train.lambda_dice", self.lambda_dice)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a non-negative number, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.grad_clip_norm >= 0.0 && self.grad_clip_norm.is_finite()) {
            return Err(Error::config("train.grad_clip_norm", "must be finite and non-negative"));
        }
        if !(self.no_object_weight > 0.0) {
            return Err(Error::config("train.no_object_weight", "must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Pixel BCE on logits, averaged over pixels.
pub fn pixel_bce_loss<T: Scalar>(logits: &[T], target: &[T]) -> Result<T> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::invalid(format!("mask of {} pixels against target of {}", logits.len(), target.len())));
    }
    let s = logits.iter().zip(target).fold(T::zero(), |s, (&x, &t)| s + bce_with_logits(x, t));
    Ok(s / T::lit(logits.len() as f64))
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`.
pub fn dice_loss<T: Scalar>(probs: &[T], target: &[T]) -> Result<T> {
    if probs.len() != target.len() {
        return Err(Error::invalid(format!("mask of {} pixels against target of {}", probs.len(), target.len())));
    }
    let (mut pt, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in probs.iter().zip(target) {
        pt += p * t;
        ps += p;
        ts += t;
    }
    Ok(T::one() - (T::lit(2.0) * pt + T::one()) / (ps + ts + T::one()))
}

/// One ground-truth segment, rasterised to the resolution the loss runs at.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTarget<T> {
    pub segment_id: u32,
    pub category_id: usize,
    /// Row of the classification table.
    pub class_index: usize,
    /// `[1, pixels]` binary mask.
    pub mask: Tensor<T>,
}

/// Plurality label of every `stride x stride` block (ties to the smaller id).
pub fn downsample_ids(seg: &PanopticSegmentation, stride: usize, height: usize, width: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(height * width);
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for gy in 0..height {
        for gx in 0..width {
            counts.clear();
            for y in gy * stride..((gy + 1) * stride).min(seg.height) {
                for x in gx * stride..((gx + 1) * stride).min(seg.width) {
                    let id = seg.id_map[y * seg.width + x];
                    match counts.iter_mut().find(|c| c.0 == id) {
                        Some(c) => c.1 += 1,
                        None => counts.push((id, 1)),
                    }
                }
            }
            let best = counts.iter().fold((0u32, 0usize), |b, &c| if c.1 > b.1 || (c.1 == b.1 && c.0 < b.0) { c } else { b });
            out.push(best.0);
        }
    }
    out
}

/// Binary per-segment targets on a `stride`-subsampled grid (`stride = 1`
/// keeps full resolution). Segments that vanish after subsampling are dropped
/// with a warning.
pub fn rasterize_targets<T: Scalar>(seg: &PanopticSegmentation, stride: usize, height: usize, width: usize, class_ids: &[usize]) -> Result<Vec<SegmentTarget<T>>> {
    let ids = downsample_ids(seg, stride, height, width);
    let mut out = Vec::new();
    for s in &seg.segments {
        let class_index = class_ids
            .iter()
            .position(|&c| c == s.category_id)
            .ok_or_else(|| Error::invalid(format!("segment {} of {} has category {} outside the training vocabulary", s.id, seg.image_id, s.category_id)))?;
        let mask: Vec<T> = ids.iter().map(|&v| if v == s.id { T::one() } else { T::zero() }).collect();
        if mask.iter().all(|v| *v == T::zero()) {
            if seg.area(s.id) > 0 {
                log::warn!("{}: segment {} covers no cell at stride {stride}; excluded from the loss", seg.image_id, s.id);
            }
            continue;
        }
        out.push(SegmentTarget { segment_id: s.id, category_id: s.category_id, class_index, mask: Tensor::from_vec(1, height * width, mask) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub pixel: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sums over supervised layers.
    pub cls: f64,
    pub pixel: f64,
    pub dice: f64,
    /// Supervised layers in order, final layer last.
    pub layers: Vec<LayerLoss>,
}

/// Matching cost `lambda_cls * -log p(class) + lambda_pixel * bce + lambda_dice * dice`.
pub fn matching_cost<T: Scalar>(class_logits: &Tensor<T>, mask_logits: &Tensor<T>, targets: &[SegmentTarget<T>], config: &TrainConfig) -> Tensor<T> {
    let k = class_logits.rows();
    let mut cost = Tensor::zeros(k, targets.len());
    for q in 0..k {
        let row = class_logits.row(q);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().fold(T::zero(), |s, &x| s + (x - mx).exp()).ln();
        let probs: Vec<T> = mask_logits.row(q).iter().map(|&x| sigmoid(x)).collect();
        for (t, tg) in targets.iter().enumerate() {
            let nll = lse - row[tg.class_index];
            let bce = pixel_bce_loss(mask_logits.row(q), tg.mask.data()).expect("shapes checked");
            let dice = dice_loss(&probs, tg.mask.data()).expect("shapes checked");
            cost.set(q, t, T::lit(config.lambda_cls) * nll + T::lit(config.lambda_pixel) * bce + T::lit(config.lambda_dice) * dice);
        }
    }
    cost
}

struct LayerTerms {
    cls: Var,
    pixel: Var,
    dice: Var,
}

fn layer_terms<T: Scalar>(g: &mut Graph<T>, class_logits: Var, mask_logits: Var, targets: &[SegmentTarget<T>], matching: &MatchResult, config: &TrainConfig) -> LayerTerms {
    let (k, classes) = g.shape(class_logits);
    let no_object = classes - 1;
    let mut target_of = vec![None; k];
    for &(q, t) in &matching.pairs {
        target_of[q] = Some(t);
    }
    let logp = g.log_softmax(class_logits);
    let picks: Vec<(usize, usize)> = (0..k).map(|q| (q, target_of[q].map_or(no_object, |t| targets[t].class_index))).collect();
    let weights: Vec<T> = (0..k).map(|q| if target_of[q].is_some() { T::one() } else { T::lit(config.no_object_weight) }).collect();
    let wsum = weights.iter().fold(T::zero(), |s, &w| s + w);
    let picked = g.pick(logp, &picks);
    let w = g.constant(Tensor::from_vec(k, 1, weights));
    let weighted = g.mul(picked, w);
    let s = g.sum_all(weighted);
    let cls = g.scale(s, -T::one() / wsum);
    if matching.pairs.is_empty() {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return LayerTerms { cls, pixel: zero, dice: zero };
    }
    let rows: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
    let mask = Tensor::from_rows(&matching.pairs.iter().map(|&(_, t)| targets[t].mask.data().to_vec()).collect::<Vec<_>>());
    let sel = g.gather_rows(mask_logits, &rows);
    let bce = g.bce_logits(sel, &mask);
    let pixel = g.mean_all(bce);
    let p = g.sigmoid(sel);
    let tv = g.constant(mask.clone());
    let inter = g.mul(p, tv);
    let inter = g.sum_rows(inter);
    let num = g.scale(inter, T::lit(2.0));
    let num = g.add_const(num, T::one());
    let psum = g.sum_rows(p);
    let tsum = Tensor::from_fn(mask.rows(), 1, |r, _| mask.row(r).iter().fold(T::one(), |s, &x| s + x));
    let tsum = g.constant(tsum);
    let den = g.add(psum, tsum);
    let ratio = g.div(num, den);
    let mean = g.mean_all(ratio);
    let neg = g.scale(mean, -T::one());
    let dice = g.add_const(neg, T::one());
    LayerTerms { cls, pixel, dice }
}

/// Build the loss for one image inside `g`. Returns the scalar total node and
/// its value breakdown.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[(Var, Var)],
    targets: &[SegmentTarget<T>],
    config: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let (final_cls, final_mask) = *layers.last().ok_or_else(|| Error::invalid("no decoder layers to supervise"))?;
    let positions = g.shape(final_mask).1;
    if let Some(t) = targets.iter().find(|t| t.mask.cols() != positions) {
        return Err(Error::invalid(format!("target of segment {} has {} cells, masks have {positions}", t.segment_id, t.mask.cols())));
    }
    let matching_for = |g: &Graph<T>, c: Var, m: Var| hungarian_match(&matching_cost(g.value(c), g.value(m), targets, config));
    let final_match = matching_for(g, final_cls, final_mask);
    let supervised: Vec<(Var, Var)> = if config.aux_supervision { layers.to_vec() } else { vec![(final_cls, final_mask)] };
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for (li, &(c, m)) in supervised.iter().enumerate() {
        let matching = if config.rematch_aux && li + 1 < supervised.len() { matching_for(g, c, m) } else { final_match.clone() };
        let terms = layer_terms(g, c, m, targets, &matching, config);
        let ll = LayerLoss { cls: g.scalar_value(terms.cls).as_f64(), pixel: g.scalar_value(terms.pixel).as_f64(), dice: g.scalar_value(terms.dice).as_f64() };
        for (name, v) in [("cls", ll.cls), ("pixel", ll.pixel), ("dice", ll.dice)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} loss of layer {li} is {v}")));
            }
        }
        let a = g.scale(terms.cls, T::lit(config.lambda_cls));
        let b = g.scale(terms.pixel, T::lit(config.lambda_pixel));
        let d = g.scale(terms.dice, T::lit(config.lambda_dice));
        let ab = g.add(a, b);
        let layer_total = g.add(ab, d);
        total = Some(match total {
            Some(t) => g.add(t, layer_total),
            None => layer_total,
        });
        breakdown.cls += ll.cls;
        breakdown.pixel += ll.pixel;
        breakdown.dice += ll.dice;
        breakdown.layers.push(ll);
    }
    let total = total.expect("at least one layer");
    breakdown.total = g.scalar_value(total).as_f64();
    Ok((total, breakdown))
}

/// Loss of fixed predictions: one `(class_logits [K, n+1], mask_logits [K, P])`
/// pair per decoder layer.
pub fn compute_loss<T: Scalar>(predictions: &[(Tensor<T>, Tensor<T>)], targets: &[SegmentTarget<T>], config: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let layers: Vec<(Var, Var)> = predictions.iter().map(|(c, m)| (g.constant(c.clone()), g.constant(m.clone()))).collect();
    Ok(loss_graph(&mut g, &layers, targets, config)?.1)
}

/// One training image with everything precomputed.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub image: Image,
    /// Frozen-backbone features; `None` runs the backbone in the graph.
    pub features: Option<FeatureGrid<T>>,
    pub members: BTreeSet<usize>,
    pub targets: Vec<SegmentTarget<T>>,
}

/// Category tables used during training.
#[derive(Debug, Clone)]
pub struct TrainTables<T> {
    /// Indexed by category id.
    pub concepts: CategoryEmbeddingTable<T>,
    /// Classification keys in `class_ids` order.
    pub classes: Tensor<T>,
    pub class_ids: Vec<usize>,
}

impl<T: Scalar> TrainTables<T> {
    pub fn new(concepts: CategoryEmbeddingTable<T>, class_ids: Vec<usize>) -> Result<Self> {
        let classes = concepts.subset(&class_ids)?.vectors;
        Ok(TrainTables { concepts, classes, class_ids })
    }
}

/// Build training items: cached features when the backbone is frozen,
/// members from `members_of`, targets at image resolution.
pub fn prepare_items<T: Scalar>(
    model: &Model<T>,
    scenes: &[(Image, PanopticSegmentation)],
    class_ids: &[usize],
    members_of: impl Fn(&PanopticSegmentation) -> BTreeSet<usize> + Sync,
) -> Result<Vec<TrainItem<T>>> {
    scenes
        .par_iter()
        .map(|(img, seg)| {
            let features = if model.config.freeze_backbone { Some(model.encode(img)?) } else { None };
            let targets = rasterize_targets(seg, 1, seg.height, seg.width, class_ids)?;
            Ok(TrainItem { image: img.clone(), features, members: members_of(seg), targets })
        })
        .collect()
}

/// Forward and loss for one item.
pub fn item_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    item: &TrainItem<T>,
    tables: &TrainTables<T>,
    config: &TrainConfig,
) -> Result<(Var, LossBreakdown, ImageOutputs)> {
    let features = match &item.features {
        Some(f) => Features::Cached(f),
        None => Features::Image(&item.image),
    };
    let req = ImageRequest { features, concept_table: &tables.concepts, members: &item.members, class_table: &tables.classes, weights: None };
    let out = model.forward(g, &req)?;
    let target_size = (item.image.height, item.image.width);
    let layers: Vec<(Var, Var)> = if (out.height, out.width) == target_size {
        out.layers.iter().map(|l| (l.class_logits, l.mask_logits)).collect()
    } else {
        let plan = Arc::new(ResizePlan::new((out.height, out.width), target_size));
        out.layers.iter().map(|l| (l.class_logits, g.resize(l.mask_logits, &plan))).collect()
    };
    let (total, breakdown) = loss_graph(g, &layers, &item.targets, config).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("{}: {m}", item.image.image_id)),
        other => other,
    })?;
    Ok((total, breakdown, out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub pixel: f64,
    pub dice: f64,
}

type GradList<T> = Vec<(ParamId, Tensor<T>)>;

/// Mean loss and summed, batch-averaged gradients over `batch`.
pub fn batch_gradients<T: Scalar>(model: &Model<T>, batch: &[&TrainItem<T>], tables: &TrainTables<T>, config: &TrainConfig) -> Result<(StepLog, GradList<T>)> {
    let results: Vec<Result<(LossBreakdown, GradList<T>)>> = batch
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let (total, breakdown, _) = item_loss(&mut g, model, item, tables, config)?;
            let grads = g.backward(total);
            Ok((breakdown, grads.params().map(|(id, t)| (id, t.clone())).collect()))
        })
        .collect();
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    let mut log = StepLog { step: 0, total: 0.0, cls: 0.0, pixel: 0.0, dice: 0.0 };
    for r in results {
        let (b, grads) = r?;
        log.total += b.total / batch.len() as f64;
        log.cls += b.cls / batch.len() as f64;
        log.pixel += b.pixel / batch.len() as f64;
        log.dice += b.dice / batch.len() as f64;
        for (id, t) in grads {
            let scaled = t.map(|v| v * inv);
            match &mut acc[id.0] {
                Some(a) => a.add_assign(&scaled),
                slot => *slot = Some(scaled),
            }
        }
    }
    let grads = acc.into_iter().enumerate().filter_map(|(i, t)| t.map(|t| (ParamId(i), t))).collect();
    Ok((log, grads))
}

/// Rescale every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<StepLog>,
}

/// Optimise `model` on `items`. The order of images is a seeded shuffle per
/// epoch, so runs with equal seeds are identical.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    items: &[TrainItem<T>],
    tables: &TrainTables<T>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if model.config.freeze_backbone != config.freeze_backbone {
        model.set_backbone_frozen(config.freeze_backbone);
    }
    if !config.freeze_backbone && items.iter().any(|i| i.features.is_some()) {
        return Err(Error::invalid("cached features cannot be used with a trainable backbone"));
    }
    let per_epoch = items.len().div_ceil(config.batch_size);
    let mut budget = config.epochs * per_epoch;
    if config.max_steps > 0 {
        budget = budget.min(config.max_steps);
    }
    let mut opt = AdamW::new(config.adamw(), model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(budget);
    let mut step = 0;
    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= budget {
                break 'outer;
            }
            let batch: Vec<&TrainItem<T>> = chunk.iter().map(|&i| &items[i]).collect();
            let (mut entry, mut grads) = batch_gradients(model, &batch, tables, config)?;
            if !entry.total.is_finite() {
                return Err(Error::Numerical(format!("total loss became {} at step {step}", entry.total)));
            }
            if config.grad_clip_norm > 0.0 {
                clip_grad_norm(&mut grads, config.grad_clip_norm);
            }
            opt.config.lr = config.lr_schedule.rate(config.lr, step, budget);
            opt.step(&mut model.store, &grads);
            entry.step = step;
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        if budget == 0 {
            break;
        }
    }
    Ok(TrainReport { steps: step, log })
}

pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,total,cls,pixel,dice").map_err(io)?;
    for s in log {
        writeln!(w, "{},{},{},{},{}", s.step, s.total, s.cls, s.pixel, s.dice).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::Segment;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn dice_closed_forms() {
        assert_eq!(dice_loss(&[1.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert!((dice_loss::<f64>(&[1.0; 4], &[0.0; 4]).unwrap() - 0.8).abs() < 1e-15);
        assert!(dice_loss(&[1.0; 4], &[0.0; 3]).is_err());
    }

    #[test]
    fn dice_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..20).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut st = 0.0;
        for i in 0..20 {
            inter += p[i] * t[i];
            sp += p[i];
            st += t[i];
        }
        assert!((dice_loss(&p, &t).unwrap() - (1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0))).abs() < 1e-9);
    }

    #[test]
    fn bce_closed_forms() {
        assert!((pixel_bce_loss(&[0.0; 6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap() - LN2).abs() < 1e-15);
        assert!(pixel_bce_loss(&[100.0, -100.0], &[1.0, 0.0]).unwrap() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let t: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let oracle: f64 = x.iter().zip(&t).map(|(&x, &t)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        }).sum::<f64>() / 10.0;
        assert!((pixel_bce_loss(&x, &t).unwrap() - oracle).abs() < 1e-9);
    }

    fn seg_2x4() -> PanopticSegmentation {
        let mut s = PanopticSegmentation::empty("t", 4, 4);
        s.id_map = vec![1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 1, 3, 1, 1, 1, 1];
        s.segments = vec![
            Segment { id: 1, category_id: 0, score: None },
            Segment { id: 2, category_id: 2, score: None },
            Segment { id: 3, category_id: 2, score: None },
        ];
        s
    }

    #[test]
    fn downsampling_uses_block_plurality() {
        let seg = seg_2x4();
        assert_eq!(downsample_ids(&seg, 2, 2, 2), vec![1, 2, 1, 1]);
        let t: Vec<SegmentTarget<f64>> = rasterize_targets(&seg, 2, 2, 2, &[0, 2]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].class_index, 1);
        assert_eq!(t[0].mask.data(), &[1.0, 0.0, 1.0, 1.0]);
        assert!(rasterize_targets::<f64>(&seg, 2, 2, 2, &[0]).is_err());
    }

    fn targets() -> Vec<SegmentTarget<f64>> {
        vec![
            SegmentTarget { segment_id: 1, category_id: 0, class_index: 0, mask: Tensor::from_f64(1, 4, &[1.0, 1.0, 0.0, 0.0]) },
            SegmentTarget { segment_id: 2, category_id: 1, class_index: 1, mask: Tensor::from_f64(1, 4, &[0.0, 0.0, 1.0, 1.0]) },
        ]
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let big = 60.0;
        let cls = Tensor::from_f64(3, 3, &[big, 0.0, 0.0, 0.0, big, 0.0, 0.0, 0.0, big]);
        let masks = Tensor::from_f64(3, 4, &[big, big, -big, -big, -big, -big, big, big, -big, -big, -big, -big]);
        let t = targets();
        let b = compute_loss(&[(cls, masks)], &t, &TrainConfig::default()).unwrap();
        assert!(b.cls < 1e-6 && b.pixel < 1e-6, "{b:?}");
        // dice with the +1 smoothing is exactly zero only for perfect masks
        assert!(b.dice < 1e-6, "{b:?}");
    }

    #[test]
    fn class_only_weights_reduce_to_class_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cls = Tensor::<f64>::randn(3, 3, 1.0, &mut rng);
        let masks = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let cfg = TrainConfig { lambda_pixel: 0.0, lambda_dice: 0.0, ..Default::default() };
        let b = compute_loss(&[(cls.clone(), masks.clone()), (cls, masks)], &targets(), &cfg).unwrap();
        assert_eq!(b.total, 2.0 * b.cls);
        assert_eq!(b.layers.len(), 2);
    }

    #[test]
    fn no_targets_supervise_everything_toward_no_object() {
        let cls = Tensor::<f64>::from_f64(2, 3, &[0.0; 6]);
        let masks = Tensor::zeros(2, 4);
        let b = compute_loss(&[(cls, masks)], &[], &TrainConfig::default()).unwrap();
        assert!((b.cls - 3f64.ln()).abs() < 1e-12);
        assert_eq!((b.pixel, b.dice), (0.0, 0.0));
    }

    #[test]
    fn loss_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[StepLog { step: 0, total: 1.5, cls: 0.5, pixel: 0.1, dice: 0.05 }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "step,total,cls,pixel,dice\n0,1.5,0.5,0.1,0.05\n");
    }
}
