//! Per-position acceptance predicates for the verify substep.
//!
//! A criterion decides whether a proposed token is acceptable given the base
//! model's log-probability distribution at that position. The exact
//! criterion reproduces greedy decoding; top-k and distance criteria trade
//! fidelity for longer accepted blocks. Every criterion also carries a
//! minimum block size that forces at least `min_block` tokens per iteration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CriterionError {
    #[error("distance criterion requires an intensity-valued vocabulary")]
    NotIntensityValued,
    #[error("top_k criterion needs k >= 1")]
    ZeroTopK,
    #[error("min_block must be >= 1")]
    ZeroMinBlock,
    #[error("proposal {proposal} outside vocabulary of size {vocab}")]
    ProposalOutOfRange { proposal: TokenId, vocab: usize },
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("cannot parse criterion `{input}`: {reason}")]
    Parse { input: String, reason: String },
}

/// How token ids relate to each other. Only intensity vocabularies carry a
/// metric, so only they admit the distance criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TokenSpace {
    #[default]
    Categorical,
    /// Token ids `0..levels` are intensities; ids at or above `levels` are
    /// control tokens compared by equality only.
    Intensity { levels: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionKind {
    Exact,
    TopK { k: usize },
    Distance { eps: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceCriterion {
    pub kind: CriterionKind,
    pub min_block: usize,
}

impl Default for AcceptanceCriterion {
    fn default() -> Self {
        Self::exact()
    }
}

impl AcceptanceCriterion {
    pub fn exact() -> Self {
        Self { kind: CriterionKind::Exact, min_block: 1 }
    }

    pub fn top_k(k: usize) -> Self {
        Self { kind: CriterionKind::TopK { k }, min_block: 1 }
    }

    pub fn distance(eps: u32) -> Self {
        Self { kind: CriterionKind::Distance { eps }, min_block: 1 }
    }

    #[must_use]
    pub fn with_min_block(mut self, min_block: usize) -> Self {
        self.min_block = min_block;
        self
    }

    /// True when the criterion can only accept the base model's argmax, so
    /// decoding under it is greedy-equivalent.
    pub fn is_exact(&self) -> bool {
        let kind_exact = match self.kind {
            CriterionKind::Exact => true,
            CriterionKind::TopK { k } => k == 1,
            CriterionKind::Distance { eps } => eps == 0,
        };
        kind_exact && self.min_block == 1
    }

    pub fn validate(&self, space: TokenSpace) -> Result<(), CriterionError> {
        if self.min_block == 0 {
            return Err(CriterionError::ZeroMinBlock);
        }
        match self.kind {
            CriterionKind::TopK { k: 0 } => Err(CriterionError::ZeroTopK),
            CriterionKind::Distance { .. } if space == TokenSpace::Categorical => {
                Err(CriterionError::NotIntensityValued)
            }
            _ => Ok(()),
        }
    }

    /// Decide whether `proposal` is acceptable against `base_dist`, a
    /// log-probability distribution over the vocabulary.
    pub fn accepts(&self, proposal: TokenId, base_dist: &[f64], space: TokenSpace) -> Result<bool, CriterionError> {
        if base_dist.is_empty() {
            return Err(CriterionError::EmptyDistribution);
        }
        if proposal as usize >= base_dist.len() {
            return Err(CriterionError::ProposalOutOfRange { proposal, vocab: base_dist.len() });
        }
        Ok(match self.kind {
            CriterionKind::Exact => proposal == argmax(base_dist),
            CriterionKind::TopK { k } => {
                if k == 0 {
                    return Err(CriterionError::ZeroTopK);
                }
                rank_of(proposal, base_dist) < k
            }
            CriterionKind::Distance { eps } => {
                let TokenSpace::Intensity { levels } = space else {
                    return Err(CriterionError::NotIntensityValued);
                };
                let best = argmax(base_dist);
                if proposal < levels && best < levels {
                    proposal.abs_diff(best) <= eps
                } else {
                    proposal == best
                }
            }
        })
    }
}

/// Index of the largest entry; the lowest token id wins ties.
pub fn argmax(dist: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate().skip(1) {
        if v > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Zero-based position of `token` when the vocabulary is ordered by
/// descending score, then ascending token id.
pub fn rank_of(token: TokenId, dist: &[f64]) -> usize {
    let t = token as usize;
    let score = dist[t];
    dist.iter().enumerate().filter(|&(i, &v)| v > score || (v == score && i < t)).count()
}

/// Minimum-block floor: accept at least `min(min_block, remaining)` tokens.
/// Forced tokens past the verified prefix come from the proposals as-is.
pub fn apply_min_block(k_hat: usize, min_block: usize, k: usize, remaining: usize) -> usize {
    debug_assert!(k_hat <= k);
    k_hat.max(min_block.min(remaining))
}

impl fmt::Display for AcceptanceCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CriterionKind::Exact => write!(f, "kind=exact")?,
            CriterionKind::TopK { k } => write!(f, "kind=top_k,k={k}")?,
            CriterionKind::Distance { eps } => write!(f, "kind=distance,eps={eps}")?,
        }
        if self.min_block != 1 {
            write!(f, ",min_block={}", self.min_block)?;
        }
        Ok(())
    }
}

/// Grammar: comma-separated `key=value` pairs. `kind` is one of `exact`,
/// `top_k` (with `k`), `distance` (with `eps`); `min_block` is optional.
/// A bare kind name such as `exact` is also accepted.
impl FromStr for AcceptanceCriterion {
    type Err = CriterionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fail = |reason: &str| CriterionError::Parse { input: s.to_string(), reason: reason.into() };
        let mut kind = None;
        let mut k = None;
        let mut eps = None;
        let mut min_block = 1usize;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = match part.split_once('=') {
                Some((key, value)) => (key.trim(), value.trim()),
                None => ("kind", part),
            };
            let int = |v: &str| v.parse::<u64>().map_err(|_| fail(&format!("`{v}` is not a non-negative integer")));
            match key {
                "kind" => kind = Some(value.to_string()),
                "k" => k = Some(int(value)? as usize),
                "eps" => eps = Some(int(value)? as u32),
                "min_block" => min_block = int(value)? as usize,
                other => return Err(fail(&format!("unknown key `{other}`"))),
            }
        }
        let kind = match kind.as_deref() {
            Some("exact") => {
                if k.is_some() || eps.is_some() {
                    return Err(fail("exact takes no k or eps"));
                }
                CriterionKind::Exact
            }
            Some("top_k") => {
                if eps.is_some() {
                    return Err(fail("top_k takes no eps"));
                }
                CriterionKind::TopK { k: k.ok_or_else(|| fail("top_k requires k"))? }
            }
            Some("distance") => {
                if k.is_some() {
                    return Err(fail("distance takes no k"));
                }
                CriterionKind::Distance { eps: eps.ok_or_else(|| fail("distance requires eps"))? }
            }
            Some(other) => return Err(fail(&format!("unknown kind `{other}`"))),
            None => return Err(fail("missing kind")),
        };
        let criterion = AcceptanceCriterion { kind, min_block };
        if min_block == 0 {
            return Err(CriterionError::ZeroMinBlock);
        }
        if let CriterionKind::TopK { k: 0 } = kind {
            return Err(CriterionError::ZeroTopK);
        }
        Ok(criterion)
    }
}
