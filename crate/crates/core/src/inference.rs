//! Test-time pipeline: concepts are mapped onto the vocabulary, classification
//! runs either over the full test vocabulary with confidence weights or over
//! the mapped concepts alone, and query outputs are merged into panoptic,
//! semantic and instance views. Also hosts the k-means feature clustering
//! used to inspect enhanced features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{sigmoid, Graph, ResizePlan};
use crate::concepts::{map_to_vocabulary, provide_concepts, ConceptSet, ConceptSource, MappedConceptSet};
use crate::data_synth::{write_png_indexed, Image, PanopticSegmentation, Segment, Vocabulary};
use crate::decoder::classify_weighted;
use crate::embedding::{CategoryEmbeddingTable, FeatureGrid, TextEncoderSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, GtInstance, InstancePrediction, MetricReport, SemanticMap};
use crate::model::{Features, ImageRequest, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Classify only against the categories the concepts map to.
    VocabularyFree,
    /// Classify against the whole test vocabulary, boosted by concept weights.
    #[default]
    OpenVocabulary,
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vocabulary-free" => Ok(InferenceMode::VocabularyFree),
            "open-vocabulary" => Ok(InferenceMode::OpenVocabulary),
            other => Err(Error::config("inference.mode", format!("unknown mode `{other}` (expected vocabulary-free or open-vocabulary)"))),
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::VocabularyFree => "vocabulary-free",
            InferenceMode::OpenVocabulary => "open-vocabulary",
        })
    }
}

/// How a concept confidence `c` turns into a class weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightVariant {
    /// Every weight 1.
    None,
    /// `e^c`.
    #[default]
    Exp,
    /// `1 + c`.
    Linear,
    /// `1 + c^2`.
    Quadratic,
    /// `1 + (e^c - 1) / (e - 1)`.
    NormalizedExp,
}

impl ReweightVariant {
    /// The four weighting formulas compared side by side by `--reweight all`.
    pub const COMPARED: [ReweightVariant; 4] = [ReweightVariant::Exp, ReweightVariant::Linear, ReweightVariant::Quadratic, ReweightVariant::NormalizedExp];

    pub fn weight(self, c: f64) -> f64 {
        match self {
            ReweightVariant::None => 1.0,
            ReweightVariant::Exp => c.exp(),
            ReweightVariant::Linear => 1.0 + c,
            ReweightVariant::Quadratic => 1.0 + c * c,
            ReweightVariant::NormalizedExp => 1.0 + c.exp_m1() / 1.0f64.exp_m1(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReweightVariant::None => "none",
            ReweightVariant::Exp => "exp",
            ReweightVariant::Linear => "linear",
            ReweightVariant::Quadratic => "quadratic",
            ReweightVariant::NormalizedExp => "normalized-exp",
        }
    }
}

impl FromStr for ReweightVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ReweightVariant::None, ReweightVariant::Exp, ReweightVariant::Linear, ReweightVariant::Quadratic, ReweightVariant::NormalizedExp]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("inference.reweight", format!("unknown reweight variant `{s}`")))
    }
}

impl fmt::Display for ReweightVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-class multipliers in `category_ids` order, plus a trailing 1.0 for
/// the no-object class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReweightVector {
    pub variant: ReweightVariant,
    pub category_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ReweightVector {
    pub fn ones(category_ids: &[usize]) -> Self {
        ReweightVector { variant: ReweightVariant::None, category_ids: category_ids.to_vec(), weights: vec![1.0; category_ids.len() + 1] }
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.weights.iter().map(|&w| T::lit(w)).collect()
    }
}

pub fn reweight_vector(mapped: &MappedConceptSet, test_ids: &[usize], variant: ReweightVariant) -> Result<ReweightVector> {
    let merged = mapped.merged();
    if let Some(stray) = merged.keys().find(|id| !test_ids.contains(id)) {
        return Err(Error::invalid(format!("mapped concept category {stray} is not in the test vocabulary")));
    }
    let mut weights: Vec<f64> = test_ids.iter().map(|id| merged.get(id).map_or(1.0, |&c| variant.weight(c))).collect();
    weights.push(1.0);
    Ok(ReweightVector { variant, category_ids: test_ids.to_vec(), weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub reweight: ReweightVariant,
    pub score_threshold: f64,
    pub overlap_threshold: f64,
    /// Minimum segment area in pixels.
    pub min_area: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { mode: InferenceMode::OpenVocabulary, reweight: ReweightVariant::Exp, score_threshold: 0.8, overlap_threshold: 0.8, min_area: 4 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("inference.score_threshold", self.score_threshold), ("inference.overlap_threshold", self.overlap_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryPrediction {
    /// `None` when the no-object class wins.
    pub category_id: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPredictions<T> {
    /// `[K, n+1]`, columns in `class_ids` order then no-object.
    pub probs: Tensor<T>,
    pub class_ids: Vec<usize>,
    pub queries: Vec<QueryPrediction>,
}

/// Weighted cosine classification: scores are multiplied by the weights
/// before the softmax, then each query takes its most probable class (lowest
/// column on ties).
pub fn predict_categories<T: Scalar>(
    mask_embeddings: &Tensor<T>,
    table: &CategoryEmbeddingTable<T>,
    class_ids: &[usize],
    no_object: &Tensor<T>,
    temperature: f64,
    weights: &ReweightVector,
) -> Result<CategoryPredictions<T>> {
    if table.is_empty() {
        return Err(Error::invalid("effective vocabulary is empty"));
    }
    if table.len() != class_ids.len() || weights.category_ids != class_ids {
        return Err(Error::invalid("class table, class ids and weights disagree"));
    }
    let w = weights.as_scalars::<T>();
    let probs = classify_weighted(mask_embeddings, table, no_object, temperature, Some(&w))?;
    let n = class_ids.len();
    let queries = (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            QueryPrediction { category_id: (best < n).then(|| class_ids[best]), score: row[best].as_f64() }
        })
        .collect();
    Ok(CategoryPredictions { probs, class_ids: class_ids.to_vec(), queries })
}

/// Bilinear resize of every row of `[K, h*w]` to `[K, H*W]`, sampling at
/// pixel centres (half-pixel offsets, edges clamped).
pub fn upsample<T: Scalar>(logits: &Tensor<T>, h: usize, w: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    if logits.cols() != h * w || h == 0 || w == 0 {
        return Err(Error::invalid(format!("mask of {} cells is not {h}x{w}", logits.cols())));
    }
    Ok(ResizePlan::new((h, w), (height, width)).apply(logits))
}

/// Merge query outputs into a non-overlapping panoptic map.
///
/// Queries survive if their top class is not no-object and its probability
/// reaches the score threshold. Each pixel goes to the surviving query with
/// the largest `score * sigmoid(mask)`, provided that sigmoid is at least 0.5.
/// A query keeps its pixels only if they are at least `overlap_threshold` of
/// its own above-0.5 area and at least `min_area`. Stuff queries of one
/// category share a segment.
pub fn panoptic_merge<T: Scalar>(
    image_id: &str,
    preds: &CategoryPredictions<T>,
    masks: &Tensor<T>,
    height: usize,
    width: usize,
    vocab: &Vocabulary,
    config: &InferenceConfig,
) -> Result<PanopticSegmentation> {
    let p = height * width;
    if masks.cols() != p || masks.rows() != preds.queries.len() {
        return Err(Error::invalid(format!("{}x{} masks for {} queries at {height}x{width}", masks.rows(), masks.cols(), preds.queries.len())));
    }
    if !masks.all_finite() || !preds.probs.all_finite() {
        return Err(Error::Numerical(format!("{image_id}: non-finite query outputs")));
    }
    let alive: Vec<(usize, usize, f64)> = preds
        .queries
        .iter()
        .enumerate()
        .filter_map(|(k, q)| q.category_id.filter(|_| q.score >= config.score_threshold).map(|c| (k, c, q.score)))
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; p];
    for (px, slot) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, &(k, _, score)) in alive.iter().enumerate() {
            let s = sigmoid(masks.get(k, px).as_f64());
            if s < 0.5 {
                continue;
            }
            let v = score * s;
            if best.is_none_or(|b| v > b.1) {
                best = Some((a, v));
            }
        }
        *slot = best.map(|b| b.0);
    }
    let mut out = PanopticSegmentation::empty(image_id, height, width);
    let mut stuff_ids: BTreeMap<usize, u32> = BTreeMap::new();
    let mut next = 1u32;
    for (a, &(k, cat, score)) in alive.iter().enumerate() {
        let own: Vec<usize> = (0..p).filter(|&px| owner[px] == Some(a)).collect();
        let full = (0..p).filter(|&px| sigmoid(masks.get(k, px).as_f64()) >= 0.5).count();
        if own.is_empty() || own.len() < config.min_area || (own.len() as f64) < config.overlap_threshold * full as f64 {
            continue;
        }
        let mean_sig = own.iter().map(|&px| sigmoid(masks.get(k, px).as_f64())).sum::<f64>() / own.len() as f64;
        let seg_score = score * mean_sig;
        let is_thing = vocab.get(cat).ok_or_else(|| Error::invalid(format!("predicted category {cat} outside the vocabulary")))?.is_thing;
        let id = if !is_thing && stuff_ids.contains_key(&cat) {
            let id = stuff_ids[&cat];
            if let Some(s) = out.segments.iter_mut().find(|s| s.id == id) {
                s.score = Some(s.score.unwrap_or(0.0).max(seg_score));
            }
            id
        } else {
            let id = next;
            next += 1;
            if !is_thing {
                stuff_ids.insert(cat, id);
            }
            out.segments.push(Segment { id, category_id: cat, score: Some(seg_score) });
            id
        };
        for px in own {
            out.id_map[px] = id;
        }
    }
    Ok(out)
}

pub fn to_semantic(panoptic: &PanopticSegmentation) -> SemanticMap {
    SemanticMap::from_panoptic(panoptic)
}

/// Thing segments as scored instance masks.
pub fn to_instances(panoptic: &PanopticSegmentation, vocab: &Vocabulary) -> Vec<InstancePrediction> {
    panoptic
        .segments
        .iter()
        .filter(|s| vocab.get(s.category_id).is_some_and(|c| c.is_thing))
        .map(|s| InstancePrediction {
            mask: panoptic.id_map.iter().map(|&v| v == s.id).collect(),
            category_id: s.category_id,
            score: s.score.unwrap_or(1.0).clamp(0.0, 1.0),
        })
        .filter(|i| i.mask.iter().any(|&b| b))
        .collect()
}

pub fn tensor_digest<T: Scalar>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    h.update((t.rows() as u64).to_le_bytes());
    h.update((t.cols() as u64).to_le_bytes());
    h.update(t.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared inputs for predicting on many images.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a, T> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
    /// Text embeddings of the whole vocabulary, indexed by category id.
    pub table: &'a CategoryEmbeddingTable<T>,
    /// Encoder used to embed concept labels before mapping.
    pub encoder: &'a TextEncoderSpec,
    pub config: &'a InferenceConfig,
}

#[derive(Debug, Clone)]
pub struct ImagePrediction<T> {
    pub panoptic: PanopticSegmentation,
    pub mapped: MappedConceptSet,
    pub members: BTreeSet<usize>,
    pub classes: CategoryPredictions<T>,
    /// Final-layer mask logits at image resolution, `[K, H*W]`.
    pub mask_logits: Tensor<T>,
}

impl<T: Scalar> Predictor<'_, T> {
    /// Run one image. `test_ids` is the open-vocabulary class list; it is
    /// never consulted in vocabulary-free mode.
    pub fn predict(&self, image: &Image, concepts: &ConceptSet, test_ids: &[usize]) -> Result<ImagePrediction<T>> {
        self.config.validate()?;
        let mapped = map_to_vocabulary(concepts, self.vocab, self.table, self.encoder)?;
        let found: Vec<usize> = mapped.category_ids();
        let (class_ids, members, weights) = match self.config.mode {
            InferenceMode::VocabularyFree => {
                if found.is_empty() {
                    return Err(Error::invalid(format!("{}: no concepts, so the vocabulary-free class set is empty", image.image_id)));
                }
                let w = ReweightVector::ones(&found);
                (found.clone(), found.iter().copied().collect::<BTreeSet<_>>(), w)
            }
            InferenceMode::OpenVocabulary => {
                let members: BTreeSet<usize> = if found.is_empty() { test_ids.iter().copied().collect() } else { found.iter().copied().collect() };
                let w = reweight_vector(&mapped, test_ids, self.config.reweight)?;
                (test_ids.to_vec(), members, w)
            }
        };
        let class_table = self.table.subset(&class_ids)?;
        let mut g = Graph::new();
        let req = ImageRequest { features: Features::Image(image), concept_table: self.table, members: &members, class_table: &class_table.vectors, weights: None };
        let out = self.model.forward(&mut g, &req)?;
        let last = out.layers.last().ok_or_else(|| Error::invalid("decoder produced no layers"))?;
        let embeddings = g.value(last.mask_embeddings).clone();
        let no_object = self.model.store.get(self.model.no_object).clone();
        let classes = predict_categories(&embeddings, &class_table, &class_ids, &no_object, self.model.temperature(), &weights)?;
        let mask_logits = upsample(g.value(last.mask_logits), out.height, out.width, image.height, image.width)?;
        let panoptic = panoptic_merge(&image.image_id, &classes, &mask_logits, image.height, image.width, self.vocab, self.config)?;
        Ok(ImagePrediction { panoptic, mapped, members, classes, mask_logits })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub reweight: ReweightVariant,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    /// Digest of every image's upsampled mask logits, in image order.
    pub mask_digest: String,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PanopticSegmentation>,
}

/// Predict every scene and score it against its annotation.
pub fn evaluate<T: Scalar>(predictor: &Predictor<'_, T>, scenes: &[(Image, PanopticSegmentation)], source: &ConceptSource, test_ids: &[usize]) -> Result<EvalOutcome> {
    let results: Vec<Result<(ImagePrediction<T>, String)>> = scenes
        .par_iter()
        .map(|(img, _)| {
            let concepts = provide_concepts(&img.image_id, source)?;
            let p = predictor.predict(img, &concepts, test_ids)?;
            let d = tensor_digest(&p.mask_logits);
            Ok((p, d))
        })
        .collect();
    let mut preds = Vec::with_capacity(scenes.len());
    let mut digest = Sha256::new();
    for r in results {
        let (p, d) = r?;
        digest.update(d.as_bytes());
        preds.push(p);
    }
    let vocab = predictor.vocab;
    let pq = metrics::panoptic_quality_dataset(preds.iter().map(|p| &p.panoptic).zip(scenes.iter().map(|s| &s.1)), Some(vocab))?;
    let pred_sem: Vec<SemanticMap> = preds.iter().map(|p| to_semantic(&p.panoptic)).collect();
    let gt_sem: Vec<SemanticMap> = scenes.iter().map(|s| SemanticMap::from_panoptic(&s.1)).collect();
    let miou = metrics::mean_iou_dataset(pred_sem.iter().zip(&gt_sem), vocab)?;
    let inst: Vec<Vec<InstancePrediction>> = preds.iter().map(|p| to_instances(&p.panoptic, vocab)).collect();
    let gts: Vec<Vec<GtInstance>> = scenes.iter().map(|s| metrics::gt_instances(&s.1, vocab)).collect();
    let map = metrics::instance_map(&inst, &gts)?;
    let found: Vec<BTreeSet<usize>> = preds.iter().map(|p| p.mapped.category_ids().into_iter().collect()).collect();
    let actual: Vec<BTreeSet<usize>> = scenes.iter().map(|s| s.1.categories_present().into_iter().collect()).collect();
    let concept_pr = metrics::concept_pr_report(scenes.iter().zip(found.iter().zip(&actual)).map(|(s, (f, a))| (s.0.image_id.as_str(), f, a)));
    let report = EvalReport {
        mode: predictor.config.mode,
        reweight: if predictor.config.mode == InferenceMode::VocabularyFree { ReweightVariant::None } else { predictor.config.reweight },
        metrics: MetricReport::assemble(&pq, &miou, &map, &concept_pr, vocab),
        seen_miou: miou.mean_over(&vocab.seen_ids()),
        unseen_miou: miou.mean_over(&vocab.unseen_ids()),
        mask_digest: digest.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok(EvalOutcome { report, predictions: preds.into_iter().map(|p| p.panoptic).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    pub height: usize,
    pub width: usize,
    /// Row-major cluster index per grid cell, numbered by first appearance.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let idx = match WeightedIndex::new(&d) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[idx].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..centroids.len() {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *l = j;
        inertia += d;
    }
    (labels, centroids, inertia)
}

/// Seeded k-means (k-means++ starts, best of several restarts) over the grid
/// cells.
pub fn cluster_features<T: Scalar>(grid: &FeatureGrid<T>, k: usize, seed: u64) -> Result<Clustering> {
    let n = grid.positions();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} positions")));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|r| grid.features.row(r).iter().map(|v| v.as_f64()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(&points, k, &mut rng);
        let run = lloyd(&points, init);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (labels, centroids, inertia) = best.expect("at least one restart");
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for &l in &labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    for j in 0..k {
        if !order.contains(&j) {
            order.push(j);
        }
    }
    let rank: Vec<usize> = (0..k).map(|j| order.iter().position(|&o| o == j).expect("complete order")).collect();
    Ok(Clustering {
        height: grid.height,
        width: grid.width,
        labels: labels.iter().map(|&l| rank[l]).collect(),
        centroids: order.iter().map(|&j| centroids[j].clone()).collect(),
        inertia,
    })
}

const CLUSTER_COLOURS: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Write clusterings next to each other in one indexed PNG (a one-cell black
/// gutter between panels; index 0 is the gutter) and their centroids as JSON.
pub fn write_clusterings(png: &Path, json: &Path, panels: &[(&str, &Clustering)]) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::invalid("no clusterings to write"));
    }
    let height = panels.iter().map(|p| p.1.height).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.1.width).sum::<usize>() + panels.len() - 1;
    let k = panels.iter().map(|p| p.1.centroids.len()).max().unwrap_or(0);
    if k > 254 {
        return Err(Error::invalid("at most 254 clusters fit an 8-bit palette"));
    }
    let mut idx = vec![0u8; height * width];
    let mut x0 = 0;
    for (_, c) in panels {
        for y in 0..c.height {
            for x in 0..c.width {
                idx[y * width + x0 + x] = (c.labels[y * c.width + x] + 1) as u8;
            }
        }
        x0 += c.width + 1;
    }
    let mut palette = vec![[0u8; 3]];
    palette.extend((0..k).map(|j| CLUSTER_COLOURS[j % CLUSTER_COLOURS.len()]));
    write_png_indexed(png, width, height, &idx, &palette)?;
    let table: BTreeMap<&str, &Clustering> = panels.iter().copied().collect();
    let text = serde_json::to_string_pretty(&table).map_err(|e| Error::parse(json, e))?;
    std::fs::write(json, text + "\n").map_err(|e| Error::io(json, e))
}
