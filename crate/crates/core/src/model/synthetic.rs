//! Deterministic synthetic scoring models for tests and benchmarks.
//!
//! Distributions are derived from a hash of `(seed, head, input, prefix)`,
//! so the same conditioning context always yields the same distribution and
//! nothing is stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax, BlockScores, ModelError, ScoringModel};
use crate::criteria::argmax;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Random categorical tables; each proposal head agrees with the base
    /// model's greedy continuation with probability `agreement`.
    RandomTable,
    /// Every head's argmax is the base model's greedy continuation.
    PerfectProposals,
    /// Heads past the first never agree with the greedy continuation.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub heads: usize,
    pub seed: u64,
    pub kind: SyntheticKind,
    pub agreement: f64,
    /// Quantize logits to three levels so argmax ties are common.
    pub coarse: bool,
}

impl SyntheticSpec {
    pub fn new(vocab_size: usize, heads: usize, seed: u64, kind: SyntheticKind) -> Self {
        Self { vocab_size, heads, seed, kind, agreement: 0.7, coarse: false }
    }

    #[must_use]
    pub fn with_agreement(mut self, agreement: f64) -> Self {
        self.agreement = agreement;
        self
    }

    #[must_use]
    pub fn with_coarse_logits(mut self) -> Self {
        self.coarse = true;
        self
    }
}

pub fn make_synthetic_model(spec: SyntheticSpec) -> SyntheticModel {
    assert!(spec.vocab_size >= 2, "synthetic model needs at least two tokens");
    assert!(spec.heads >= 1, "synthetic model needs at least one head");
    SyntheticModel { spec }
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticSpec,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn context_hash(seed: u64, head: usize, input: &[TokenId], prefix: &[TokenId]) -> u64 {
    let mut h = splitmix(seed ^ 0x5EED);
    let mut mix = |v: u64| h = splitmix(h ^ v);
    mix(head as u64);
    mix(input.len() as u64);
    input.iter().for_each(|&t| mix(u64::from(t)));
    mix(u64::MAX);
    prefix.iter().for_each(|&t| mix(u64::from(t)));
    h
}

impl SyntheticModel {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn raw_logits(&self, head: usize, input: &[TokenId], prefix: &[TokenId]) -> (Vec<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(context_hash(self.spec.seed, head, input, prefix));
        let logits = (0..self.spec.vocab_size)
            .map(|_| if self.spec.coarse { f64::from(rng.gen_range(0..3u8)) } else { rng.gen_range(-3.0..3.0) })
            .collect();
        (logits, rng)
    }

    /// Base-model distribution after `prefix`.
    pub fn base_dist(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let (mut logits, _) = self.raw_logits(0, input, prefix);
        log_softmax(&mut logits);
        logits
    }

    /// The next `steps` tokens of the base model's greedy continuation.
    fn greedy_continuation(&self, input: &[TokenId], prefix: &[TokenId], steps: usize) -> Vec<TokenId> {
        let mut ctx = prefix.to_vec();
        for _ in 0..steps {
            let next = argmax(&self.base_dist(input, &ctx));
            ctx.push(next);
        }
        ctx.split_off(prefix.len())
    }

    fn head_dist(&self, head: usize, input: &[TokenId], prefix: &[TokenId], continuation: &[TokenId]) -> Vec<f64> {
        if head == 0 {
            return self.base_dist(input, prefix);
        }
        let (mut logits, mut rng) = self.raw_logits(head, input, prefix);
        let target = continuation[head];
        let steer = match self.spec.kind {
            SyntheticKind::PerfectProposals => Some(target),
            SyntheticKind::Adversarial => Some((target + 1) % self.spec.vocab_size as TokenId),
            SyntheticKind::RandomTable => (rng.gen::<f64>() < self.spec.agreement).then_some(target),
        };
        if let Some(t) = steer {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logits[t as usize] = max + 1.0;
        }
        log_softmax(&mut logits);
        logits
    }
}

impl ScoringModel for SyntheticModel {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn num_heads(&self) -> usize {
        self.spec.heads
    }

    fn score_grid(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError> {
        let v = self.spec.vocab_size;
        if let Some(&t) = input.iter().chain(prefix).chain(candidates).find(|&&t| t as usize >= v) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
        }
        let mut rows = Vec::with_capacity(candidates.len() + 1);
        let mut ctx = prefix.to_vec();
        for offset in 0..=candidates.len() {
            if offset > 0 {
                ctx.push(candidates[offset - 1]);
            }
            let continuation =
                if self.spec.heads > 1 { self.greedy_continuation(input, &ctx, self.spec.heads) } else { Vec::new() };
            rows.push((0..self.spec.heads).map(|h| self.head_dist(h, input, &ctx, &continuation)).collect());
        }
        BlockScores::from_rows(prefix.len(), rows)
    }

    fn score_base(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let v = self.spec.vocab_size;
        if let Some(&t) = input.iter().chain(prefix).chain(candidates).find(|&&t| t as usize >= v) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
        }
        let mut ctx = prefix.to_vec();
        let mut rows = vec![self.base_dist(input, &ctx)];
        for &c in candidates {
            ctx.push(c);
            rows.push(self.base_dist(input, &ctx));
        }
        Ok(rows)
    }
}

/// Every head at every position puts its mode on one fixed token.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    vocab_size: usize,
    heads: usize,
    dist: Vec<f64>,
}

impl ConstantModel {
    pub fn new(vocab_size: usize, heads: usize, token: TokenId) -> Self {
        assert!((token as usize) < vocab_size);
        let mut dist: Vec<f64> = (0..vocab_size).map(|t| if t == token as usize { 2.0 } else { 0.0 }).collect();
        log_softmax(&mut dist);
        Self { vocab_size, heads, dist }
    }
}

impl ScoringModel for ConstantModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn num_heads(&self) -> usize {
        self.heads
    }

    fn score_grid(
        &self,
        _input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError> {
        let rows = candidates.len() + 1;
        let data = self.dist.repeat(rows * self.heads);
        BlockScores::from_flat(prefix.len(), rows, self.heads, self.vocab_size, data)
    }
}
