//! Evaluation metrics: panoptic quality, mean IoU, COCO-style instance mAP and
//! concept-set precision/recall. Every quantity is accumulated as counts so
//! dataset-level numbers do not depend on image order.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data_synth::{PanopticSegmentation, Vocabulary};
use crate::error::{Error, Result};

/// Per-pixel category labels; `None` is void.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<usize>>,
}

impl SemanticMap {
    pub fn from_panoptic(p: &PanopticSegmentation) -> Self {
        let cat: BTreeMap<u32, usize> = p.segments.iter().map(|s| (s.id, s.category_id)).collect();
        let labels = p.id_map.iter().map(|&v| if v == 0 { None } else { cat.get(&v).copied() }).collect();
        SemanticMap { height: p.height, width: p.width, labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CategoryPq {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl CategoryPq {
    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn pq(&self) -> f64 {
        if self.is_empty() { 0.0 } else { self.iou_sum / self.denom() }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 }
    }

    pub fn rq(&self) -> f64 {
        if self.is_empty() { 0.0 } else { self.tp as f64 / self.denom() }
    }

    fn add(&mut self, o: &CategoryPq) {
        self.iou_sum += o.iou_sum;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Category-averaged PQ, SQ and RQ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub categories: usize,
}

impl PqSummary {
    fn over<'a>(cats: impl Iterator<Item = &'a CategoryPq>) -> Self {
        let mut s = PqSummary::default();
        for c in cats.filter(|c| !c.is_empty()) {
            s.pq += c.pq();
            s.sq += c.sq();
            s.rq += c.rq();
            s.categories += 1;
        }
        if s.categories > 0 {
            let n = s.categories as f64;
            s.pq /= n;
            s.sq /= n;
            s.rq /= n;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PQReport {
    pub per_category: BTreeMap<usize, CategoryPq>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub things: Option<PqSummary>,
    pub stuff: Option<PqSummary>,
}

impl PQReport {
    pub fn from_counts(per_category: BTreeMap<usize, CategoryPq>, vocab: Option<&Vocabulary>) -> Self {
        let all = PqSummary::over(per_category.values());
        let split = |thing: bool| {
            vocab.map(|v| PqSummary::over(per_category.iter().filter(|(id, _)| v.get(**id).is_some_and(|c| c.is_thing == thing)).map(|(_, c)| c)))
        };
        let (things, stuff) = (split(true), split(false));
        PQReport { pq: all.pq, sq: all.sq, rq: all.rq, things, stuff, per_category }
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("prediction is {}x{} but ground truth is {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Per-category TP/FP/FN counts and matched IoU sums for one image.
///
/// A pair matches when categories agree and IoU > 0.5, where the union leaves
/// out predicted pixels that fall on ground-truth void. Unmatched predictions
/// lying mostly on void are not counted as false positives.
pub fn pq_counts(pred: &PanopticSegmentation, gt: &PanopticSegmentation) -> Result<BTreeMap<usize, CategoryPq>> {
    check_dims((pred.height, pred.width), (gt.height, gt.width))?;
    pred.validate()?;
    gt.validate()?;
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.id_map.iter().zip(&gt.id_map) {
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let pcat: BTreeMap<u32, usize> = pred.segments.iter().map(|s| (s.id, s.category_id)).collect();
    let gcat: BTreeMap<u32, usize> = gt.segments.iter().map(|s| (s.id, s.category_id)).collect();
    let mut out: BTreeMap<usize, CategoryPq> = BTreeMap::new();
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    for (&(p, g), &n) in &inter {
        if g == 0 || pcat[&p] != gcat[&g] {
            continue;
        }
        let on_void = inter.get(&(p, 0)).copied().unwrap_or(0);
        let union = pred_area[&p] + gt_area[&g] - n - on_void;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            let c = out.entry(gcat[&g]).or_default();
            c.tp += 1;
            c.iou_sum += iou;
            matched_p.insert(p);
            matched_g.insert(g);
        }
    }
    for (&g, _) in gt_area.iter().filter(|(g, _)| !matched_g.contains(*g)) {
        out.entry(gcat[&g]).or_default().fn_ += 1;
    }
    for (&p, &area) in pred_area.iter().filter(|(p, _)| !matched_p.contains(*p)) {
        let on_void = inter.get(&(p, 0)).copied().unwrap_or(0);
        if on_void as f64 / area as f64 > 0.5 {
            continue;
        }
        out.entry(pcat[&p]).or_default().fp += 1;
    }
    Ok(out)
}

pub fn panoptic_quality(pred: &PanopticSegmentation, gt: &PanopticSegmentation) -> Result<PQReport> {
    Ok(PQReport::from_counts(pq_counts(pred, gt)?, None))
}

/// Dataset PQ: counts summed over all pairs before averaging.
pub fn panoptic_quality_dataset<'a>(
    pairs: impl IntoIterator<Item = (&'a PanopticSegmentation, &'a PanopticSegmentation)>,
    vocab: Option<&Vocabulary>,
) -> Result<PQReport> {
    let mut acc: BTreeMap<usize, CategoryPq> = BTreeMap::new();
    for (p, g) in pairs {
        for (cat, c) in pq_counts(p, g)? {
            acc.entry(cat).or_default().add(&c);
        }
    }
    Ok(PQReport::from_counts(acc, vocab))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MiouReport {
    /// Intersection and union pixel counts per category.
    pub counts: BTreeMap<usize, (usize, usize)>,
    pub per_category: BTreeMap<usize, f64>,
    pub miou: f64,
}

impl MiouReport {
    fn from_counts(counts: BTreeMap<usize, (usize, usize)>) -> Self {
        let per_category: BTreeMap<usize, f64> = counts.iter().filter(|(_, c)| c.1 > 0).map(|(&k, &(i, u))| (k, i as f64 / u as f64)).collect();
        let miou = if per_category.is_empty() { 0.0 } else { per_category.values().sum::<f64>() / per_category.len() as f64 };
        MiouReport { counts, per_category, miou }
    }

    /// Mean IoU over the listed categories that occur; `None` if none do.
    pub fn mean_over(&self, ids: &[usize]) -> Option<f64> {
        let v: Vec<f64> = ids.iter().filter_map(|i| self.per_category.get(i).copied()).collect();
        if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) }
    }
}

fn miou_counts(pred: &SemanticMap, gt: &SemanticMap, vocab: &Vocabulary, acc: &mut BTreeMap<usize, (usize, usize)>) -> Result<()> {
    check_dims((pred.height, pred.width), (gt.height, gt.width))?;
    if pred.labels.len() != gt.labels.len() || gt.labels.len() != gt.height * gt.width {
        return Err(Error::invalid("semantic map length does not match its dimensions"));
    }
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let Some(g) = g else { continue };
        for c in [Some(g), p].into_iter().flatten() {
            if vocab.get(c).is_none() {
                return Err(Error::invalid(format!("semantic label {c} is outside the vocabulary")));
            }
        }
        if p == Some(g) {
            let e = acc.entry(g).or_default();
            e.0 += 1;
            e.1 += 1;
        } else {
            acc.entry(g).or_default().1 += 1;
            if let Some(p) = p {
                acc.entry(p).or_default().1 += 1;
            }
        }
    }
    Ok(())
}

/// Per-category IoU over pixels labelled in the ground truth; ground-truth
/// void is ignored, predicted void counts against the ground-truth category.
pub fn mean_iou(pred: &SemanticMap, gt: &SemanticMap, vocab: &Vocabulary) -> Result<MiouReport> {
    mean_iou_dataset([(pred, gt)], vocab)
}

pub fn mean_iou_dataset<'a>(pairs: impl IntoIterator<Item = (&'a SemanticMap, &'a SemanticMap)>, vocab: &Vocabulary) -> Result<MiouReport> {
    let mut acc = BTreeMap::new();
    for (p, g) in pairs {
        miou_counts(p, g, vocab, &mut acc)?;
    }
    Ok(MiouReport::from_counts(acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Binary `H x W` mask.
    pub mask: Vec<bool>,
    pub category_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub mask: Vec<bool>,
    pub category_id: usize,
}

/// Thing segments of an annotation as instance masks.
pub fn gt_instances(seg: &PanopticSegmentation, vocab: &Vocabulary) -> Vec<GtInstance> {
    seg.segments
        .iter()
        .filter(|s| vocab.get(s.category_id).is_some_and(|c| c.is_thing))
        .map(|s| GtInstance { mask: seg.id_map.iter().map(|&v| v == s.id).collect(), category_id: s.category_id })
        .filter(|g| g.mask.iter().any(|&b| b))
        .collect()
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    if u == 0 { 0.0 } else { i as f64 / u as f64 }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MapReport {
    pub per_category: BTreeMap<usize, f64>,
    pub map: f64,
}

/// 101-point interpolated average precision of one ranked TP/FP list.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let thr = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < thr);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// COCO-style mask AP averaged over IoU thresholds 0.50:0.05:0.95 and then
/// over categories with at least one ground-truth instance. `preds[i]` and
/// `gts[i]` belong to the same image. Equal scores keep insertion order.
pub fn instance_map(preds: &[Vec<InstancePrediction>], gts: &[Vec<GtInstance>]) -> Result<MapReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} prediction lists for {} images", preds.len(), gts.len())));
    }
    let cats: BTreeSet<usize> = gts.iter().flatten().map(|g| g.category_id).collect();
    let mut per_category = BTreeMap::new();
    for &cat in &cats {
        let num_gt = gts.iter().flatten().filter(|g| g.category_id == cat).count();
        let mut ranked: Vec<(usize, &InstancePrediction)> = preds.iter().enumerate().flat_map(|(i, ps)| ps.iter().map(move |p| (i, p))).filter(|(_, p)| p.category_id == cat).collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let ious: Vec<Vec<f64>> = ranked
            .iter()
            .map(|(img, p)| gts[*img].iter().map(|g| if g.category_id == cat { mask_iou(&p.mask, &g.mask) } else { -1.0 }).collect())
            .collect();
        let mut ap_sum = 0.0;
        for t in 0..10 {
            let thr = (50 + 5 * t) as f64 / 100.0;
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let hits: Vec<bool> = ranked
                .iter()
                .zip(&ious)
                .map(|((img, _), row)| {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, &iou) in row.iter().enumerate() {
                        if taken[*img][j] || iou < thr {
                            continue;
                        }
                        if best.is_none_or(|b| iou > b.1) {
                            best = Some((j, iou));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            taken[*img][j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            ap_sum += average_precision(&hits, num_gt);
        }
        per_category.insert(cat, ap_sum / 10.0);
    }
    let map = if per_category.is_empty() { 0.0 } else { per_category.values().sum::<f64>() / per_category.len() as f64 };
    Ok(MapReport { per_category, map })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConceptPr {
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` when the ground truth is empty.
    pub recall: Option<f64>,
    pub hits: usize,
    pub predicted: usize,
    pub actual: usize,
}

pub fn concept_precision_recall(predicted: &BTreeSet<usize>, actual: &BTreeSet<usize>) -> ConceptPr {
    let hits = predicted.intersection(actual).count();
    ConceptPr {
        precision: (!predicted.is_empty()).then(|| hits as f64 / predicted.len() as f64),
        recall: (!actual.is_empty()).then(|| hits as f64 / actual.len() as f64),
        hits,
        predicted: predicted.len(),
        actual: actual.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptPRReport {
    pub per_image: BTreeMap<String, ConceptPr>,
    /// Pooled over images: total hits over total predicted / actual.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn concept_pr_report<'a>(items: impl IntoIterator<Item = (&'a str, &'a BTreeSet<usize>, &'a BTreeSet<usize>)>) -> ConceptPRReport {
    let mut per_image = BTreeMap::new();
    let (mut h, mut p, mut a) = (0, 0, 0);
    for (id, pred, gt) in items {
        let r = concept_precision_recall(pred, gt);
        h += r.hits;
        p += r.predicted;
        a += r.actual;
        per_image.insert(id.to_string(), r);
    }
    ConceptPRReport { per_image, precision: (p > 0).then(|| h as f64 / p as f64), recall: (a > 0).then(|| h as f64 / a as f64) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptPrSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub miou: f64,
    pub map: f64,
    pub concept_pr: ConceptPrSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub label: String,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
    pub ap: Option<f64>,
}

impl MetricReport {
    pub fn assemble(pq: &PQReport, miou: &MiouReport, map: &MapReport, concepts: &ConceptPRReport, vocab: &Vocabulary) -> Self {
        let per_category = vocab
            .categories()
            .iter()
            .map(|c| {
                let q = pq.per_category.get(&c.id).filter(|q| !q.is_empty());
                (
                    c.id.to_string(),
                    CategoryMetrics {
                        label: c.label.clone(),
                        pq: q.map(|q| q.pq()),
                        sq: q.map(|q| q.sq()),
                        rq: q.map(|q| q.rq()),
                        iou: miou.per_category.get(&c.id).copied(),
                        ap: map.per_category.get(&c.id).copied(),
                    },
                )
            })
            .collect();
        MetricReport {
            pq: pq.pq,
            sq: pq.sq,
            rq: pq.rq,
            per_category,
            miou: miou.miou,
            map: map.map,
            concept_pr: ConceptPrSummary { precision: concepts.precision, recall: concepts.recall },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{Category, Segment};

    fn seg(w: usize, h: usize, ids: &[u32], cats: &[(u32, usize)]) -> PanopticSegmentation {
        PanopticSegmentation {
            image_id: "x".into(),
            height: h,
            width: w,
            id_map: ids.to_vec(),
            segments: cats.iter().map(|&(id, category_id)| Segment { id, category_id, score: None }).collect(),
        }
    }

    fn vocab2() -> Vocabulary {
        Vocabulary::new(vec![
            Category { id: 0, label: "a".into(), is_thing: true, is_seen: true },
            Category { id: 1, label: "b".into(), is_thing: false, is_seen: true },
        ])
        .unwrap()
    }

    #[test]
    fn pq_single_pair_fixture() {
        let gt = seg(4, 2, &[1, 1, 1, 1, 1, 0, 0, 0], &[(1, 0)]);
        let pred = seg(4, 2, &[1, 1, 1, 0, 0, 0, 0, 0], &[(1, 0)]);
        let r = panoptic_quality(&pred, &gt).unwrap();
        assert!((r.pq - 0.6).abs() < 1e-12);
        assert!((r.sq - 0.6).abs() < 1e-12);
        assert_eq!(r.rq, 1.0);
        let same = panoptic_quality(&gt, &gt).unwrap();
        assert_eq!((same.pq, same.sq, same.rq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn wrong_category_is_fp_and_fn() {
        let gt = seg(2, 2, &[1; 4], &[(1, 0)]);
        let pred = seg(2, 2, &[1; 4], &[(1, 1)]);
        let r = pq_counts(&pred, &gt).unwrap();
        assert_eq!(r[&0], CategoryPq { iou_sum: 0.0, tp: 0, fp: 0, fn_: 1 });
        assert_eq!(r[&1], CategoryPq { iou_sum: 0.0, tp: 0, fp: 1, fn_: 0 });
        assert_eq!(PQReport::from_counts(r, None).pq, 0.0);
    }

    #[test]
    fn miou_fixture_and_exclusion() {
        let pred = SemanticMap { height: 1, width: 4, labels: vec![Some(0); 4] };
        let gt = SemanticMap { height: 1, width: 4, labels: vec![Some(0), Some(0), Some(1), Some(1)] };
        let r = mean_iou(&pred, &gt, &vocab2()).unwrap();
        assert!((r.miou - 0.25).abs() < 1e-12);
        let only_a = SemanticMap { height: 1, width: 4, labels: vec![Some(0); 4] };
        assert_eq!(mean_iou(&only_a, &only_a, &vocab2()).unwrap().per_category.len(), 1);
        let small = SemanticMap { height: 1, width: 3, labels: vec![None; 3] };
        assert!(mean_iou(&small, &gt, &vocab2()).is_err());
    }

    #[test]
    fn map_trivial_cases() {
        let g = GtInstance { mask: vec![true, true, false, false], category_id: 0 };
        let exact = InstancePrediction { mask: g.mask.clone(), category_id: 0, score: 0.3 };
        assert!((instance_map(&[vec![exact]], &[vec![g.clone()]]).unwrap().map - 1.0).abs() < 1e-12);
        assert_eq!(instance_map(&[vec![]], &[vec![g]]).unwrap().map, 0.0);
    }

    #[test]
    fn concept_pr_sets() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        let r = concept_precision_recall(&s(&[1, 2]), &s(&[1, 3]));
        assert_eq!((r.precision, r.recall), (Some(0.5), Some(0.5)));
        let r = concept_precision_recall(&s(&[]), &s(&[1]));
        assert_eq!((r.precision, r.recall), (None, Some(0.0)));
        let r = concept_precision_recall(&s(&[4]), &s(&[4]));
        assert_eq!((r.precision, r.recall), (Some(1.0), Some(1.0)));
    }
}
