//! Property tests over the public API.

use mocolab::backbone::BackboneConfig;
use mocolab::eval::{evaluate, BootstrapOptions};
use mocolab::{
    auroc, cca_similarity, enqueue_dequeue, infonce_loss, split, subsample_labeled, top_subspace, MoCoState, Model,
    PredictionSet, SubsampleSpec,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn small_model(embed: usize) -> Model {
    let config = BackboneConfig {
        widths: vec![2, 2, 2, 2, 2],
        embed_dim: embed,
        ..BackboneConfig::tiny(1)
    };
    Model::random(&config, 0).unwrap()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_index(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (val, test) = (a * (1.0 - b) / 2.0, b * (1.0 - a) / 2.0);
        let s = split(n, [1.0 - val - test, val, test], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, s.fractions, seed).unwrap().test, s.test);
    }

    #[test]
    fn subsample_is_a_floor_sized_subset(n in 1usize..400, fraction in 0.001f64..1.0, seed in any::<u64>(), rep in 0u32..5) {
        let train: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let spec = SubsampleSpec { fraction, seed, replicate_index: rep };
        let sub = subsample_labeled(&train, &spec).unwrap();
        prop_assert_eq!(sub.len(), (fraction * n as f64 + 1e-9).floor() as usize);
        prop_assert!(sub.iter().all(|i| train.contains(i)));
        let mut dedup = sub.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), sub.len());
        prop_assert_eq!(subsample_labeled(&train, &spec).unwrap(), sub);
    }

    #[test]
    fn auroc_is_rank_based(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..80)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(s.to_owned())).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, y)| u8::from(*y)).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auroc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp()).collect();
        prop_assert_eq!(auroc(&squashed, &labels).unwrap(), a);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn infonce_is_non_negative_and_at_most_uniform_plus_spread(
        raw in prop::collection::vec(-1.0f64..1.0, 4 * 6),
        tau in 0.05f64..1.0,
    ) {
        let d = 4;
        let q = &raw[..d];
        let k = &raw[d..2 * d];
        let queue = &raw[2 * d..];
        let loss = infonce_loss(q, k, queue, d, tau).unwrap();
        let norms = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let spread = 2.0 * norms(q) * raw[d..].chunks(d).map(norms).fold(0.0, f64::max) / tau;
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= (5.0f64).ln() + spread + 1e-9);
    }

    #[test]
    fn queue_matches_a_ring_buffer(batches in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 2 * 4), 1..12)) {
        let mut state = MoCoState::new(small_model(4), 8, 3);
        let mut oracle: Vec<Vec<f32>> = (0..8).map(|i| state.queue_row(i).to_vec()).collect();
        let mut ptr = 0;
        for raw in &batches {
            let keys: Vec<Vec<f32>> = raw.chunks(4).map(unit).collect();
            enqueue_dequeue(&mut state, &keys).unwrap();
            for key in &keys {
                oracle[ptr] = key.clone();
                ptr = (ptr + 1) % 8;
            }
        }
        for (i, row) in oracle.iter().enumerate() {
            prop_assert_eq!(state.queue_row(i), row.as_slice());
        }
    }

    #[test]
    fn svcca_is_symmetric_and_bounded(seed in any::<u64>(), cols in 2usize..10) {
        let mut x = seed | 1;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = DMatrix::from_fn(60, cols, |_, _| next());
        let b = DMatrix::from_fn(60, cols, |_, _| next());
        let (sa, sb) = (top_subspace(&a, 0.9).unwrap(), top_subspace(&b, 0.9).unwrap());
        let ab = cca_similarity(&sa, &sb).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - cca_similarity(&sb, &sa).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_interval_brackets_its_median() {
    let labels: Vec<u8> = (0..300).map(|i| u8::from((i * 7 + i / 3) % 4 == 0)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| f64::from(y) + (i % 7) as f64 / 5.0)
        .collect();
    let p = PredictionSet::new(scores, labels, 3, "d", "r").unwrap();
    let r = evaluate(&p, &BootstrapOptions::default()).unwrap();
    assert!(r.q_low <= r.median && r.median <= r.q_high);
    assert_eq!(r.values.len() + r.skipped, 500);
    assert_eq!(evaluate(&p, &BootstrapOptions::default()).unwrap(), r);
}
