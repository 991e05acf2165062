//! Central finite differences, independent of the backward pass.
#![allow(dead_code)]

use blockdec::model::tiny::FreezeMask;
use blockdec::model::{ModelConfig, Partition, TinyBlockModel};
use blockdec::TokenId;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// V=5, width 4, two layers: well under 2000 parameters for k <= 3.
pub fn micro(k_heads: usize, seed: u64) -> TinyBlockModel {
    TinyBlockModel::new(ModelConfig {
        vocab_size: 5,
        d_model: 4,
        d_hidden: 4,
        num_layers: 2,
        attn_heads: 2,
        k_heads,
        max_context: 9,
        seed,
    })
    .unwrap()
}

pub fn batch() -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    vec![(vec![1, 3, 2], vec![2, 3, 1, 4]), (vec![0, 4], vec![4, 0, 4])]
}

pub fn as_pairs(b: &[(Vec<TokenId>, Vec<TokenId>)]) -> Vec<(&[TokenId], &[TokenId])> {
    b.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect()
}

pub fn numeric_grad(model: &TinyBlockModel, pairs: &[(&[TokenId], &[TokenId])], head: usize) -> Vec<f64> {
    let mut p = model.parameters().to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = model.loss_with(&p, pairs, head).unwrap();
            p[i] = orig - STEP;
            let down = model.loss_with(&p, pairs, head).unwrap();
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error over the unfrozen partitions, after checking that
/// frozen partitions get exactly zero and unfrozen ones get some gradient.
pub fn worst_rel_err(
    model: &TinyBlockModel,
    pairs: &[(&[TokenId], &[TokenId])],
    head: usize,
    mask: FreezeMask,
) -> Result<f64, String> {
    let (_, analytic) = model.loss_and_grad_masked(pairs, head, mask).map_err(|e| e.to_string())?;
    let numeric = numeric_grad(model, pairs, head);
    let mut worst = 0.0f64;
    for part in Partition::ALL {
        let range = model.partition_range(part);
        if mask.is_frozen(part) {
            if range.clone().any(|i| analytic[i] != 0.0) {
                return Err(format!("{part:?} is frozen but has gradient"));
            }
            continue;
        }
        if range.clone().all(|i| analytic[i] == 0.0) {
            return Err(format!("{part:?} received no gradient"));
        }
        worst = range.map(|i| rel_err(analytic[i], numeric[i])).fold(worst, f64::max);
    }
    Ok(worst)
}
