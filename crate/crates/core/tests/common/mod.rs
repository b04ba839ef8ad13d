//! Independent reference implementations used by the integration tests.
//! They work on plain pixel sets and nested loops and share no code with the
//! library beyond its data types.

#![allow(dead_code)]

use std::collections::BTreeSet;

use conseg::data_synth::{Category, PanopticSegmentation, Segment, Vocabulary};
use rand::Rng;

/// Four categories: two things, two stuff.
pub fn small_vocab() -> Vocabulary {
    let cat = |id, label: &str, is_thing| Category { id, label: label.into(), is_thing, is_seen: true };
    Vocabulary::new(vec![cat(0, "disc", true), cat(1, "block", true), cat(2, "sky", false), cat(3, "grass", false)]).unwrap()
}

pub fn panoptic(h: usize, w: usize, ids: Vec<u32>, cats: &[(u32, usize)]) -> PanopticSegmentation {
    PanopticSegmentation {
        image_id: "p".into(),
        height: h,
        width: w,
        id_map: ids,
        segments: cats.iter().map(|&(id, category_id)| Segment { id, category_id, score: None }).collect(),
    }
}

/// A random annotation with at most three segments and some void.
pub fn random_panoptic<R: Rng>(rng: &mut R, h: usize, w: usize, ncat: usize) -> PanopticSegmentation {
    let n = rng.random_range(1..=3u32);
    let ids = (0..h * w).map(|_| if rng.random::<f64>() < 0.15 { 0 } else { rng.random_range(1..=n) }).collect();
    let cats: Vec<(u32, usize)> = (1..=n).map(|i| (i, rng.random_range(0..ncat))).collect();
    panoptic(h, w, ids, &cats)
}

/// A noisy copy of `gt`: pixels are relabelled with probability `flip` and
/// categories are kept with probability 0.7.
pub fn perturbed<R: Rng>(rng: &mut R, gt: &PanopticSegmentation, flip: f64, ncat: usize) -> PanopticSegmentation {
    let n = gt.segments.len() as u32;
    let ids = gt.id_map.iter().map(|&v| if rng.random::<f64>() < flip { rng.random_range(0..=n) } else { v }).collect();
    let cats: Vec<(u32, usize)> = gt.segments.iter().map(|s| (s.id, if rng.random::<f64>() < 0.7 { s.category_id } else { rng.random_range(0..ncat) })).collect();
    panoptic(gt.height, gt.width, ids, &cats)
}

fn pixels(p: &PanopticSegmentation, id: u32) -> BTreeSet<usize> {
    p.id_map.iter().enumerate().filter(|(_, &v)| v == id).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PqCounts {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Returns per-category counts (indexed by category id) and the mean PQ, SQ,
/// RQ over categories with any TP, FP or FN.
pub fn brute_pq(pred: &PanopticSegmentation, gt: &PanopticSegmentation, ncat: usize) -> (Vec<PqCounts>, f64, f64, f64) {
    let void = pixels(gt, 0);
    let pred_segs: Vec<(u32, usize, BTreeSet<usize>)> =
        pred.segments.iter().map(|s| (s.id, s.category_id, pixels(pred, s.id))).filter(|s| !s.2.is_empty()).collect();
    let gt_segs: Vec<(u32, usize, BTreeSet<usize>)> =
        gt.segments.iter().map(|s| (s.id, s.category_id, pixels(gt, s.id))).filter(|s| !s.2.is_empty()).collect();
    let mut counts = vec![PqCounts::default(); ncat];
    let mut pred_hit = vec![false; pred_segs.len()];
    let mut gt_hit = vec![false; gt_segs.len()];
    let mut order: Vec<(usize, usize)> = Vec::new();
    for i in 0..pred_segs.len() {
        for j in 0..gt_segs.len() {
            order.push((i, j));
        }
    }
    order.sort_by_key(|&(i, j)| (pred_segs[i].0, gt_segs[j].0));
    for (i, j) in order {
        let (p, g) = (&pred_segs[i], &gt_segs[j]);
        if p.1 != g.1 {
            continue;
        }
        let inter = p.2.intersection(&g.2).count();
        if inter == 0 {
            continue;
        }
        let on_void = p.2.intersection(&void).count();
        let union = p.2.union(&g.2).count() - on_void;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            counts[g.1].tp += 1;
            counts[g.1].iou_sum += iou;
            pred_hit[i] = true;
            gt_hit[j] = true;
        }
    }
    for (j, g) in gt_segs.iter().enumerate() {
        if !gt_hit[j] {
            counts[g.1].fn_ += 1;
        }
    }
    for (i, p) in pred_segs.iter().enumerate() {
        if !pred_hit[i] && (p.2.intersection(&void).count() as f64) <= 0.5 * p.2.len() as f64 {
            counts[p.1].fp += 1;
        }
    }
    let (mut pq, mut sq, mut rq, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in &counts {
        if c.tp + c.fp + c.fn_ == 0 {
            continue;
        }
        let den = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
        pq += c.iou_sum / den;
        sq += if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
        rq += c.tp as f64 / den;
        n += 1;
    }
    if n > 0 {
        (counts, pq / n as f64, sq / n as f64, rq / n as f64)
    } else {
        (counts, 0.0, 0.0, 0.0)
    }
}

/// Category label per pixel, `None` for void.
pub fn labels(p: &PanopticSegmentation) -> Vec<Option<usize>> {
    p.id_map.iter().map(|&v| p.segments.iter().find(|s| s.id == v && v != 0).map(|s| s.category_id)).collect()
}

/// IoU per category over pixels labelled in the ground truth, and their mean
/// over categories with a non-empty union.
pub fn brute_miou(pred: &[Option<usize>], gt: &[Option<usize>], ncat: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = vec![None; ncat];
    for (c, slot) in per.iter_mut().enumerate() {
        let labelled: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].is_some()).collect();
        let inter = labelled.iter().filter(|&&i| gt[i] == Some(c) && pred[i] == Some(c)).count();
        let union = labelled.iter().filter(|&&i| gt[i] == Some(c) || pred[i] == Some(c)).count();
        if union > 0 {
            *slot = Some(inter as f64 / union as f64);
        }
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Minimum total cost over every injective assignment of `min(K, T)` pairs,
/// summed in ascending row order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let k = cost.len();
    let t = if k == 0 { 0 } else { cost[0].len() };
    let size = k.min(t);
    let mut best = f64::INFINITY;
    let mut used_rows = vec![false; k];
    let mut used_cols = vec![false; t];
    fn rec(cost: &[Vec<f64>], row: usize, left: usize, acc: f64, used_rows: &mut [bool], used_cols: &mut [bool], best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if row == cost.len() || cost.len() - row < left {
            return;
        }
        rec(cost, row + 1, left, acc, used_rows, used_cols, best);
        for c in 0..used_cols.len() {
            if !used_cols[c] {
                used_cols[c] = true;
                used_rows[row] = true;
                rec(cost, row + 1, left - 1, acc + cost[row][c], used_rows, used_cols, best);
                used_cols[c] = false;
                used_rows[row] = false;
            }
        }
    }
    rec(cost, 0, size, 0.0, &mut used_rows, &mut used_cols, &mut best);
    if size == 0 {
        0.0
    } else {
        best
    }
}
