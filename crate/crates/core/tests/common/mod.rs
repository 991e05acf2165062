//! Shared test helpers: independent oracles and an invocation-counting model.
#![allow(dead_code)]

pub mod gradcheck;

use std::sync::atomic::{AtomicUsize, Ordering};

use blockdec::model::synthetic::SyntheticModel;
use blockdec::{BlockScores, DecodeResult, ModelError, ScoringModel, TokenId};
use rand::Rng;

/// Index of the largest value; the lowest index wins ties.
pub fn oracle_argmax(dist: &[f64]) -> TokenId {
    let mut best = 0;
    for i in 1..dist.len() {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Brute-force greedy decode straight from the synthetic model's base table.
pub fn greedy_oracle(model: &SyntheticModel, input: &[TokenId], max_len: usize, eos: Option<TokenId>) -> Vec<TokenId> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = oracle_argmax(&model.base_dist(input, &out));
        out.push(t);
        if Some(t) == eos {
            break;
        }
    }
    out
}

/// Check the per-decode accounting identities. `calls_per_iteration` is
/// `Some(2)` for the standard variant; `None` means the combined variant.
pub fn assert_accounting(r: &DecodeResult, k: usize, standard: bool) {
    assert_eq!(r.accepted_sizes.iter().sum::<usize>(), r.output.len(), "sizes must sum to output length");
    assert_eq!(r.iterations, r.accepted_sizes.len());
    assert!(r.accepted_sizes.iter().all(|&n| (1..=k).contains(&n)), "{:?}", r.accepted_sizes);
    if standard {
        assert_eq!(r.model_invocations, 2 * r.iterations);
    } else {
        assert_eq!(r.model_invocations, r.iterations + 1);
    }
}

/// Wraps a model and counts every scoring call.
pub struct CountingModel<M> {
    pub inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<M: ScoringModel> ScoringModel for CountingModel<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn num_heads(&self) -> usize {
        self.inner.num_heads()
    }

    fn score_grid(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_grid(input, prefix, candidates)
    }

    fn score_base(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_base(input, prefix, candidates)
    }
}

pub fn random_tokens<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}

/// A random log-probability distribution over `vocab` tokens.
pub fn random_dist<R: Rng>(rng: &mut R, vocab: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}
