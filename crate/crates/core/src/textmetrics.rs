//! Stealthiness measurements for rewritten descriptions.
//!
//! A rewrite is *stealthy* when it stays inside a token edit budget relative to
//! the original description and keeps the embedding similarity above a floor.
//! Both checks are done here, outside of whatever produced the rewrite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, EmbeddingProvider};

/// Slack added before flooring `delta * tokens`, so that products such as
/// `0.57 * 100` don't lose a whole token to binary rounding.
const BUDGET_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StealthError {
    #[error("original description is empty")]
    EmptyOriginal,
    #[error("similarity embedding failed: {0}")]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("delta must be in (0, 1], got {0}")]
    Delta(f64),
    #[error("sigma_min must be in [-1, 1], got {0}")]
    SigmaMin(f64),
    #[error("max_attempts must be at least 1")]
    MaxAttempts,
}

/// Edit budget and similarity floor a rewrite has to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealthPolicy {
    /// Fraction of the original's tokens that may be edited.
    pub delta: f64,
    /// Minimum cosine similarity between original and rewrite.
    pub sigma_min: f64,
    /// Rewrite attempts before an item is given up on.
    pub max_attempts: u32,
}

impl Default for StealthPolicy {
    fn default() -> Self {
        Self {
            delta: 0.10,
            sigma_min: 0.80,
            max_attempts: 5,
        }
    }
}

impl StealthPolicy {
    /// Checks the field ranges. `delta = 0` is not a valid policy; callers
    /// that want an infeasible budget on purpose use [`Self::new_unchecked`].
    pub fn new(delta: f64, sigma_min: f64, max_attempts: u32) -> Result<Self, PolicyError> {
        let policy = Self::new_unchecked(delta, sigma_min, max_attempts);
        policy.validate()?;
        Ok(policy)
    }

    pub fn new_unchecked(delta: f64, sigma_min: f64, max_attempts: u32) -> Self {
        Self {
            delta,
            sigma_min,
            max_attempts,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(PolicyError::Delta(self.delta));
        }
        if !(-1.0..=1.0).contains(&self.sigma_min) {
            return Err(PolicyError::SigmaMin(self.sigma_min));
        }
        if self.max_attempts == 0 {
            return Err(PolicyError::MaxAttempts);
        }
        Ok(())
    }

    /// Largest edit count allowed for an original of `token_count` tokens.
    pub fn edit_budget(&self, token_count: usize) -> usize {
        let raw = self.delta * token_count as f64 + BUDGET_EPSILON;
        if raw <= 0.0 {
            0
        } else {
            raw.floor() as usize
        }
    }
}

/// Outcome of [`check_stealth`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealthVerdict {
    pub edit_count: usize,
    pub edit_ratio: f64,
    pub similarity: f64,
    pub accepted: bool,
}

/// Lowercases, splits on Unicode whitespace and trims non-alphanumeric
/// characters from both ends of every word. Words that are all punctuation
/// disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let core = word.trim_matches(|c: char| !c.is_alphanumeric());
            (!core.is_empty()).then(|| core.to_lowercase())
        })
        .collect()
}

/// Levenshtein distance over token sequences with unit costs.
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // Two rolling rows over b.
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ta != tb);
            let delete = prev[j + 1] + 1;
            let insert = curr[j] + 1;
            curr[j + 1] = substitute.min(delete).min(insert);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Cosine similarity of the two texts' embeddings. Byte-identical inputs
/// return 1.0 without touching the embedder.
pub fn semantic_similarity(a: &str, b: &str, embedder: &dyn EmbeddingProvider) -> Result<f64, EmbeddingError> {
    if a == b {
        return Ok(1.0);
    }
    let vectors = embedder.embed_batch(&[a, b])?;
    match vectors.as_slice() {
        [va, vb] => Ok(cosine(va, vb)),
        other => Err(EmbeddingError::BatchSize {
            expected: 2,
            got: other.len(),
        }),
    }
}

/// Measures `candidate` against `original` and applies the policy.
pub fn check_stealth(
    original: &str,
    candidate: &str,
    policy: &StealthPolicy,
    embedder: &dyn EmbeddingProvider,
) -> Result<StealthVerdict, StealthError> {
    let original_tokens = tokenize(original);
    if original_tokens.is_empty() {
        return Err(StealthError::EmptyOriginal);
    }
    let candidate_tokens = tokenize(candidate);
    let edit_count = token_edit_distance(&original_tokens, &candidate_tokens);
    let similarity = semantic_similarity(original, candidate, embedder)?;
    Ok(verdict_from_parts(
        edit_count,
        original_tokens.len(),
        similarity,
        policy,
    ))
}

pub(crate) fn verdict_from_parts(
    edit_count: usize,
    original_len: usize,
    similarity: f64,
    policy: &StealthPolicy,
) -> StealthVerdict {
    let accepted = edit_count <= policy.edit_budget(original_len) && similarity >= policy.sigma_min;
    StealthVerdict {
        edit_count,
        edit_ratio: edit_count as f64 / original_len.max(1) as f64,
        similarity,
        accepted,
    }
}
