//! Scoring-model contract plus the models that implement it.
//!
//! A model exposes `num_heads` next-token heads. Head 0 is the base scoring
//! model whose greedy output defines correctness; head `i` predicts the token
//! `i + 1` positions past the end of the conditioning prefix. One call to
//! [`ScoringModel::score_grid`] is one model invocation, no matter how many
//! rows and heads it returns.

pub mod checkpoint;
pub mod distill;
pub mod synthetic;
pub mod tiny;
pub mod train;

use thiserror::Error;

use crate::TokenId;

pub use synthetic::{make_synthetic_model, ConstantModel, SyntheticKind, SyntheticModel, SyntheticSpec};
pub use tiny::{ModelConfig, Partition, TinyBlockModel};
pub use train::{train_step, TrainBatch};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("distribution has {got} entries, vocabulary has {expected}")]
    WrongArity { expected: usize, got: usize },
    #[error("non-finite log-probability at row {row}, head {head}, token {token}")]
    NonFinite { row: usize, head: usize, token: usize },
    #[error("context of {needed} positions exceeds model maximum {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("model does not score candidate continuations in one grid call")]
    GridUnsupported,
    #[error("grid has {got} rows, expected {expected}")]
    RowCount { expected: usize, got: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("{0}")]
    Invalid(String),
}

/// Log-probability grid from one invocation.
///
/// Row `r` conditions on `prefix ++ candidates[..r]`; within a row, head `h`
/// (0-based, head 0 = base model) is the distribution of the token `h + 1`
/// positions further on. Stored flat as `rows x heads x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    base_len: usize,
    rows: usize,
    heads: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl BlockScores {
    pub fn from_flat(
        base_len: usize,
        rows: usize,
        heads: usize,
        vocab: usize,
        data: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if data.len() != rows * heads * vocab {
            return Err(ModelError::Invalid(format!(
                "grid data has {} entries, expected {rows}x{heads}x{vocab}",
                data.len()
            )));
        }
        Ok(Self { base_len, rows, heads, vocab, data })
    }

    /// Build from `rows[r][h]` distributions. All rows must carry the same
    /// number of heads and all distributions the same length.
    pub fn from_rows(base_len: usize, rows: Vec<Vec<Vec<f64>>>) -> Result<Self, ModelError> {
        let n_rows = rows.len();
        let heads = rows.first().map_or(0, Vec::len);
        let vocab = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * heads * vocab);
        for row in rows {
            if row.len() != heads {
                return Err(ModelError::Invalid("ragged head count across rows".into()));
            }
            for dist in row {
                if dist.len() != vocab {
                    return Err(ModelError::WrongArity { expected: vocab, got: dist.len() });
                }
                data.extend(dist);
            }
        }
        Ok(Self { base_len, rows: n_rows, heads, vocab, data })
    }

    /// Prefix length `j` the grid was computed at.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dist(&self, row: usize, head: usize) -> &[f64] {
        assert!(row < self.rows && head < self.heads, "grid index ({row}, {head}) out of bounds");
        let start = (row * self.heads + head) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    /// Base-model distributions, one per row.
    pub fn base_rows(&self) -> Vec<&[f64]> {
        (0..self.rows).map(|r| self.dist(r, 0)).collect()
    }

    /// Arity and finiteness check against the expected vocabulary.
    pub fn check(&self, vocab: usize) -> Result<(), ModelError> {
        if self.vocab != vocab {
            return Err(ModelError::WrongArity { expected: vocab, got: self.vocab });
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let token = pos % self.vocab;
            let head = (pos / self.vocab) % self.heads;
            let row = pos / (self.vocab * self.heads);
            return Err(ModelError::NonFinite { row, head, token });
        }
        Ok(())
    }
}

/// A (possibly multi-head) autoregressive scoring model.
///
/// Implementations must be safe for concurrent read-only scoring.
pub trait ScoringModel: Sync {
    fn vocab_size(&self) -> usize;

    fn num_heads(&self) -> usize;

    /// Score all heads at every offset `0..=candidates.len()` in one pass.
    fn score_grid(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError>;

    /// Base-model distributions at every offset `0..=candidates.len()`, in
    /// one pass. Models may override this to skip the proposal heads.
    fn score_base(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let grid = self.score_grid(input, prefix, candidates)?;
        Ok(grid.base_rows().into_iter().map(<[f64]>::to_vec).collect())
    }

    /// Whether `score_grid` accepts non-empty candidate lists, i.e. whether
    /// this is a combined scoring and proposal model.
    fn supports_grid(&self) -> bool {
        true
    }
}

impl<M: ScoringModel + ?Sized> ScoringModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn num_heads(&self) -> usize {
        (**self).num_heads()
    }
    fn score_grid(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError> {
        (**self).score_grid(input, prefix, candidates)
    }
    fn score_base(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        (**self).score_base(input, prefix, candidates)
    }
    fn supports_grid(&self) -> bool {
        (**self).supports_grid()
    }
}

/// In-place log-softmax.
pub fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in logits.iter_mut() {
        *v -= lse;
    }
}
