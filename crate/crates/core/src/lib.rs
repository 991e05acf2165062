//! Blockwise parallel decoding for autoregressive sequence models.
//!
//! - [`engine`]: greedy, blockwise, and combined blockwise decoders.
//! - [`criteria`]: exact, top-k and distance acceptance plus the minimum
//!   block size floor.
//! - [`model`]: the scoring-model contract, synthetic models, and a small
//!   trainable k-head transformer with checkpoints and distillation.
//! - [`bench`]: corpora, benchmark runs and reports.

pub mod bench;
pub mod cli;
pub mod criteria;
pub mod engine;
pub mod model;

/// Token id in `0..vocab_size`.
pub type TokenId = u32;

/// An (input, target) sequence pair.
pub type SequencePair = (Vec<TokenId>, Vec<TokenId>);

pub use criteria::{AcceptanceCriterion, CriterionKind, TokenSpace};
pub use engine::{
    blockwise_decode, blockwise_decode_combined, greedy_decode, predict_block, verify_block, DecodeConfig, DecodeError,
    DecodeResult,
};
pub use model::{BlockScores, ModelError, ScoringModel};
