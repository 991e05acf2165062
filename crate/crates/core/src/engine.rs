//! Greedy and blockwise parallel decoding.
//!
//! Three decoders share one [`DecodeConfig`] and report a [`DecodeResult`]
//! with exact iteration and invocation counts:
//!
//! - [`greedy_decode`]: one token per model call.
//! - [`blockwise_decode`]: predict `k` tokens with the proposal heads, verify
//!   them with the base model in one batched call, accept the longest
//!   acceptable prefix. Two calls per iteration.
//! - [`blockwise_decode_combined`]: the verify call of iteration `t` also
//!   yields the proposals of iteration `t + 1`, so after one initial call
//!   each iteration costs a single call.
//!
//! Under the exact criterion both blockwise decoders reproduce the greedy
//! output token for token.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{apply_min_block, argmax, AcceptanceCriterion, CriterionError, TokenSpace};
use crate::model::{ModelError, ScoringModel};
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error("model contract violated: {0}")]
    Model(#[from] ModelError),
    #[error("contract error: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Number of tokens proposed per iteration (`k`).
    pub block_size: usize,
    pub max_len: usize,
    pub criterion: AcceptanceCriterion,
    /// `None` decodes exactly `max_len` tokens.
    pub eos: Option<TokenId>,
    pub token_space: TokenSpace,
}

impl DecodeConfig {
    pub fn new(block_size: usize, max_len: usize) -> Self {
        Self {
            block_size,
            max_len,
            criterion: AcceptanceCriterion::exact(),
            eos: None,
            token_space: TokenSpace::Categorical,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        Self::new(1, max_len)
    }

    #[must_use]
    pub fn with_criterion(mut self, criterion: AcceptanceCriterion) -> Self {
        self.criterion = criterion;
        self
    }

    #[must_use]
    pub fn with_eos(mut self, eos: Option<TokenId>) -> Self {
        self.eos = eos;
        self
    }

    #[must_use]
    pub fn with_token_space(mut self, space: TokenSpace) -> Self {
        self.token_space = space;
        self
    }

    pub fn min_block(&self) -> usize {
        self.criterion.min_block
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.block_size == 0 {
            return Err(DecodeError::Config("block size must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(DecodeError::Config("max_len must be >= 1".into()));
        }
        self.criterion.validate(self.token_space)?;
        if self.min_block() > self.block_size {
            return Err(DecodeError::Config(format!(
                "min_block {} exceeds block size {}",
                self.min_block(),
                self.block_size
            )));
        }
        Ok(())
    }

    fn validate_for(&self, model: &(impl ScoringModel + ?Sized)) -> Result<(), DecodeError> {
        self.validate()?;
        if model.num_heads() < self.block_size {
            return Err(DecodeError::Config(format!(
                "model has {} heads, block size {} requested",
                model.num_heads(),
                self.block_size
            )));
        }
        if let Some(eos) = self.eos {
            if eos as usize >= model.vocab_size() {
                return Err(DecodeError::Config(format!("eos {eos} outside vocabulary")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub output: Vec<TokenId>,
    /// Tokens accepted per iteration.
    pub accepted_sizes: Vec<usize>,
    pub iterations: usize,
    pub model_invocations: usize,
    pub wall_clock_ns: u64,
    pub matched_greedy: Option<bool>,
}

impl DecodeResult {
    pub fn mean_accepted_block_size(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.accepted_sizes.iter().sum::<usize>() as f64 / self.iterations as f64
    }
}

/// Accumulates the decode state shared by all three variants.
struct Decoding<'a> {
    config: &'a DecodeConfig,
    vocab: usize,
    output: Vec<TokenId>,
    accepted_sizes: Vec<usize>,
    invocations: usize,
    done: bool,
    started: Instant,
}

impl<'a> Decoding<'a> {
    fn new(config: &'a DecodeConfig, vocab: usize) -> Self {
        Self {
            config,
            vocab,
            output: Vec::with_capacity(config.max_len),
            accepted_sizes: Vec::new(),
            invocations: 0,
            done: false,
            started: Instant::now(),
        }
    }

    fn remaining(&self) -> usize {
        self.config.max_len - self.output.len()
    }

    fn running(&self) -> bool {
        !self.done && self.remaining() > 0
    }

    /// Append the first `n` proposals, truncating after the first EOS.
    fn accept(&mut self, proposals: &[TokenId], n: usize) {
        let mut block = &proposals[..n];
        if let Some(eos) = self.config.eos {
            if let Some(pos) = block.iter().position(|&t| t == eos) {
                block = &block[..=pos];
                self.done = true;
            }
        }
        self.output.extend_from_slice(block);
        self.accepted_sizes.push(block.len());
    }

    /// Verified length with the minimum-block floor and length cap applied.
    fn settle(&self, k_hat: usize, width: usize) -> usize {
        apply_min_block(k_hat, self.config.min_block(), width, self.remaining()).min(width)
    }

    fn finish(self) -> DecodeResult {
        DecodeResult {
            iterations: self.accepted_sizes.len(),
            output: self.output,
            accepted_sizes: self.accepted_sizes,
            model_invocations: self.invocations,
            wall_clock_ns: self.started.elapsed().as_nanos() as u64,
            matched_greedy: None,
        }
    }

    fn check_rows(&self, rows: &[Vec<f64>], expected: usize) -> Result<(), DecodeError> {
        if rows.len() != expected {
            return Err(ModelError::RowCount { expected, got: rows.len() }.into());
        }
        for (row, dist) in rows.iter().enumerate() {
            check_dist(dist, self.vocab, row, 0)?;
        }
        Ok(())
    }
}

fn check_dist(dist: &[f64], vocab: usize, row: usize, head: usize) -> Result<(), ModelError> {
    if dist.len() != vocab {
        return Err(ModelError::WrongArity { expected: vocab, got: dist.len() });
    }
    if let Some(token) = dist.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { row, head, token });
    }
    Ok(())
}

/// Greedy decoding with the base model: one call, one token per iteration.
pub fn greedy_decode<M: ScoringModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    config.validate()?;
    let mut state = Decoding::new(config, model.vocab_size());
    while state.running() {
        let rows = model.score_base(input, &state.output, &[])?;
        state.invocations += 1;
        state.check_rows(&rows, 1)?;
        let next = argmax(&rows[0]);
        state.accept(&[next], 1);
    }
    Ok(state.finish())
}

/// Predict substep: the argmax of each of the first `k` heads after `prefix`,
/// from a single model call.
pub fn predict_block<M: ScoringModel + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    input: &[TokenId],
    k: usize,
) -> Result<Vec<TokenId>, DecodeError> {
    if k == 0 {
        return Err(DecodeError::Config("block size must be >= 1".into()));
    }
    if model.num_heads() < k {
        return Err(DecodeError::Config(format!("model has {} heads, block size {k} requested", model.num_heads())));
    }
    let grid = model.score_grid(input, prefix, &[])?;
    grid.check(model.vocab_size())?;
    if grid.rows() != 1 || grid.heads() < k {
        return Err(ModelError::RowCount { expected: 1, got: grid.rows() }.into());
    }
    Ok((0..k).map(|h| argmax(grid.dist(0, h))).collect())
}

/// Verify substep: the number of leading proposals the criterion accepts,
/// where `base_scores[i]` conditions on the prefix plus `proposals[..i]`.
pub fn verify_block<D: AsRef<[f64]>>(
    base_scores: &[D],
    proposals: &[TokenId],
    criterion: &AcceptanceCriterion,
    space: TokenSpace,
) -> Result<usize, DecodeError> {
    if proposals.is_empty() {
        return Err(DecodeError::Contract("verify called with no proposals".into()));
    }
    if base_scores.len() < proposals.len() {
        return Err(DecodeError::Contract(format!(
            "{} proposals but only {} base distributions",
            proposals.len(),
            base_scores.len()
        )));
    }
    for (i, (dist, &proposal)) in base_scores.iter().zip(proposals).enumerate() {
        if !criterion.accepts(proposal, dist.as_ref(), space)? {
            return Ok(i);
        }
    }
    Ok(proposals.len())
}

fn ensure_progress(k_hat: usize) -> Result<(), DecodeError> {
    if k_hat == 0 {
        return Err(DecodeError::Contract(
            "base model rejected its own argmax; scoring is inconsistent across calls".into(),
        ));
    }
    Ok(())
}

/// Blockwise parallel decoding with separate predict and verify calls.
pub fn blockwise_decode<M: ScoringModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    config.validate_for(model)?;
    let k = config.block_size;
    let mut state = Decoding::new(config, model.vocab_size());
    while state.running() {
        let proposals = predict_block(model, &state.output, input, k)?;
        state.invocations += 1;

        let width = k.min(state.remaining());
        let proposals = &proposals[..width];
        let base = model.score_base(input, &state.output, &proposals[..width - 1])?;
        state.invocations += 1;
        state.check_rows(&base, width)?;

        let k_hat = verify_block(&base, proposals, &config.criterion, config.token_space)?;
        ensure_progress(k_hat)?;
        let n = state.settle(k_hat, width);
        state.accept(proposals, n);
    }
    Ok(state.finish())
}

/// Blockwise parallel decoding with a combined scoring and proposal model.
///
/// One initial call produces the first proposals; afterwards every call
/// verifies the current proposals and, from the grid row at the accepted
/// length, yields the next ones.
pub fn blockwise_decode_combined<M: ScoringModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    config.validate_for(model)?;
    if !model.supports_grid() {
        return Err(DecodeError::Config("combined decoding needs a model that scores full grids".into()));
    }
    let k = config.block_size;
    let mut state = Decoding::new(config, model.vocab_size());
    let mut proposals = predict_block(model, &[], input, k)?;
    state.invocations += 1;

    while state.running() {
        let width = k.min(state.remaining());
        let grid = model.score_grid(input, &state.output, &proposals[..width])?;
        state.invocations += 1;
        grid.check(model.vocab_size())?;
        if grid.rows() != width + 1 || grid.heads() < k {
            return Err(ModelError::RowCount { expected: width + 1, got: grid.rows() }.into());
        }

        let base = grid.base_rows();
        let k_hat = verify_block(&base[..width], &proposals[..width], &config.criterion, config.token_space)?;
        ensure_progress(k_hat)?;
        let n = state.settle(k_hat, width);
        state.accept(&proposals, n);

        // Row `n` conditions on exactly the tokens just accepted.
        proposals = (0..k).map(|h| argmax(grid.dist(n, h))).collect();
    }
    Ok(state.finish())
}
