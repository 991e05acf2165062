//! Analytic gradients against central finite differences on micro-models.

mod common;

use blockdec::model::tiny::FreezeMask;
use blockdec::model::{train_step, Partition, TrainBatch};
use common::gradcheck::{as_pairs, batch, micro, numeric_grad, rel_err, worst_rel_err, REL_TOL};

#[test]
fn micro_model_is_small() {
    assert!(micro(3, 0).num_parameters() <= 2000, "{}", micro(3, 0).num_parameters());
}

#[test]
fn analytic_matches_finite_differences_every_head() {
    let data = batch();
    let pairs = as_pairs(&data);
    for k in [1, 3] {
        let m = micro(k, 7 + k as u64);
        for head in 0..k {
            let (_, analytic) = m.loss_and_grad(&pairs, head).unwrap();
            let numeric = numeric_grad(&m, &pairs, head);
            for part in Partition::ALL {
                let range = m.partition_range(part);
                let worst = range.clone().map(|i| rel_err(analytic[i], numeric[i])).fold(0.0, f64::max);
                assert!(worst <= REL_TOL, "k={k} head={head} {part:?}: max rel err {worst:e}");
                assert!(range.clone().any(|i| analytic[i] != 0.0), "{part:?} received no gradient");
            }
        }
    }
}

fn masks() -> Vec<FreezeMask> {
    vec![
        FreezeMask { base: true, head_extension: false, vocab_projection: false },
        FreezeMask { base: false, head_extension: true, vocab_projection: false },
        FreezeMask { base: false, head_extension: false, vocab_projection: true },
        FreezeMask { base: true, head_extension: false, vocab_projection: true },
    ]
}

#[test]
fn frozen_partitions_get_zero_gradient_and_the_rest_match() {
    let data = batch();
    let pairs = as_pairs(&data);
    let m = micro(3, 21);
    for mask in masks() {
        for head in 0..3 {
            let worst = worst_rel_err(&m, &pairs, head, mask).unwrap();
            assert!(worst <= REL_TOL, "{mask:?} head={head}: max rel err {worst:e}");
            let (loss, _) = m.loss_and_grad_masked(&pairs, head, mask).unwrap();
            assert_eq!(loss, m.sub_loss(&pairs, head).unwrap());
        }
    }
}

#[test]
fn train_step_leaves_frozen_partitions_bit_identical() {
    let data = batch();
    for mask in masks() {
        let mut m = micro(3, 4);
        m.set_freeze_mask(mask);
        let before = m.clone();
        for head in 0..3 {
            let b = TrainBatch {
                inputs: data.iter().map(|p| p.0.clone()).collect(),
                targets: data.iter().map(|p| p.1.clone()).collect(),
                sampled_head: head,
            };
            train_step(&mut m, &b, 0.5).unwrap();
        }
        for part in Partition::ALL {
            let same = before.partition(part).iter().zip(m.partition(part)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert_eq!(same, mask.is_frozen(part), "{mask:?} {part:?}");
        }
    }
}
