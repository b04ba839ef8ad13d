mod common;

use conseg::concepts::{aggregate_confidence, map_to_vocabulary, Concept, ConceptSet};
use conseg::data_synth::Vocabulary;
use conseg::embedding::{encode_text, CategoryEmbeddingTable, TextEncoderSpec};
use conseg::metrics::{instance_map, mean_iou, panoptic_quality, GtInstance, InstancePrediction, SemanticMap};
use conseg::tensor::Tensor;
use conseg::training::hungarian_match;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, void: bool) -> conseg::data_synth::PanopticSegmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = common::random_panoptic(&mut rng, 1 + (seed % 8) as usize, 1 + (seed / 8 % 8) as usize, 4);
    if !void {
        for v in &mut p.id_map {
            *v = (*v).max(1);
        }
    }
    p
}

proptest! {
    #[test]
    fn pq_of_a_segmentation_with_itself_is_one(seed in any::<u64>()) {
        let gt = scene(seed, true);
        let r = panoptic_quality(&gt, &gt).unwrap();
        if r.per_category.values().any(|c| c.tp + c.fn_ > 0) {
            prop_assert_eq!(r.pq, 1.0);
            prop_assert!(r.per_category.values().all(|c| c.fp == 0 && c.fn_ == 0));
        }
    }

    #[test]
    fn pq_is_symmetric_without_void(a in any::<u64>(), b in any::<u64>()) {
        let x = scene(a, false);
        let mut y = scene(b, false);
        y.height = x.height;
        y.width = x.width;
        y.id_map = (0..x.id_map.len()).map(|i| y.id_map.get(i).copied().unwrap_or(1)).collect();
        let (xy, yx) = (panoptic_quality(&x, &y).unwrap(), panoptic_quality(&y, &x).unwrap());
        prop_assert!((xy.pq - yx.pq).abs() < 1e-12 && (xy.rq - yx.rq).abs() < 1e-12);
    }

    #[test]
    fn miou_is_a_fraction(a in any::<u64>(), flip in 0.0f64..1.0) {
        let gt = scene(a, true);
        let mut rng = ChaCha8Rng::seed_from_u64(a ^ 7);
        let pred = common::perturbed(&mut rng, &gt, flip, 4);
        let r = mean_iou(&SemanticMap::from_panoptic(&pred), &SemanticMap::from_panoptic(&gt), &common::small_vocab()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert!(r.per_category.values().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ground_truth_as_predictions_scores_full_map(sizes in prop::collection::vec(1usize..6, 1..4)) {
        let total: usize = sizes.iter().sum();
        let mut start = 0;
        let gts: Vec<GtInstance> = sizes
            .iter()
            .map(|&n| {
                let mask = (0..total).map(|i| i >= start && i < start + n).collect();
                start += n;
                GtInstance { mask, category_id: 0 }
            })
            .collect();
        let preds: Vec<InstancePrediction> =
            gts.iter().enumerate().map(|(i, g)| InstancePrediction { mask: g.mask.clone(), category_id: 0, score: 1.0 - i as f64 * 0.1 }).collect();
        let map = instance_map(&[preds.clone()], &[gts.clone()]).unwrap().map;
        prop_assert!((map - 1.0).abs() < 1e-12);
        // A low-scoring false positive appended after every hit leaves AP unchanged.
        let mut extra = preds;
        extra.push(InstancePrediction { mask: vec![true; total], category_id: 0, score: 0.01 });
        let with_fp = instance_map(&[extra], &[gts]).unwrap().map;
        prop_assert!((with_fp - map).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_optimal(k in 0usize..6, t in 0usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..t).map(|_| rng.random::<f64>()).collect()).collect();
        let tensor = Tensor::<f64>::from_fn(k, t, |r, c| cost[r][c]);
        let m = hungarian_match(&tensor);
        prop_assert_eq!(m.total_cost(&tensor), common::brute_assignment(&cost));
        prop_assert_eq!(m.pairs.len() + m.unmatched_queries.len(), k);
    }

    #[test]
    fn confidence_is_the_mean(probs in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let c = aggregate_confidence(&probs).unwrap();
        let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(c >= lo - 1e-15 && c <= hi + 1e-15);
        prop_assert!((c - probs.iter().sum::<f64>() / probs.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn vocabulary_labels_map_to_themselves(seed in any::<u64>(), pick in prop::collection::btree_set(0usize..9, 1..9)) {
        let vocab = Vocabulary::demo();
        let spec = TextEncoderSpec::synthetic(32, seed);
        let table: CategoryEmbeddingTable<f64> = encode_text(&vocab.labels(), &spec).unwrap();
        let labels = vocab.labels();
        let concepts = pick.iter().map(|&i| Concept { label: labels[i].to_uppercase(), confidence: 0.5, token_probs: None }).collect();
        let set = ConceptSet::new("x", concepts, "p").unwrap();
        let mapped = map_to_vocabulary(&set, &vocab, &table, &spec).unwrap();
        let ids: Vec<usize> = mapped.entries.iter().map(|e| e.target_category_id).collect();
        prop_assert_eq!(ids, pick.iter().copied().collect::<Vec<_>>());
        prop_assert!(mapped.entries.iter().all(|e| (e.similarity - 1.0).abs() < 1e-9));
    }
}
