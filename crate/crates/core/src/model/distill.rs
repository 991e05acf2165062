//! Sequence-level distillation: replace training targets with a teacher
//! model's greedy decodes.

use super::ScoringModel;
use crate::engine::{greedy_decode, DecodeConfig, DecodeError};
use crate::{SequencePair, TokenId};

/// Pair each input with the teacher's greedy output under `config`.
/// Errors carry the index of the failing input.
pub fn distill_corpus<M: ScoringModel + ?Sized>(
    teacher: &M,
    inputs: &[Vec<TokenId>],
    config: &DecodeConfig,
) -> Result<Vec<SequencePair>, (usize, DecodeError)> {
    let greedy = DecodeConfig { block_size: 1, criterion: Default::default(), ..*config };
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| greedy_decode(teacher, x, &greedy).map(|r| (x.clone(), r.output)).map_err(|e| (i, e)))
        .collect()
}
