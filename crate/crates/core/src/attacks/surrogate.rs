//! Deterministic in-process stand-in for a completion model.
//!
//! The surrogate ignores the rendered prompt and works from the structured
//! task attached to every [`CompletionRequest`], so its output is a pure
//! function of `(task, seed)`.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lexicon::{DEMOTE_LEXICON, PROMOTE_LEXICON};
use super::{CompletionRequest, RewriteClient, RewriteTask};
use crate::clients::ClientError;
use crate::corpus::synthetic::capitalize;
use crate::corpus::Goal;

/// Prefix used by the summarisation mode.
pub const SUMMARY_PREFIX: &str = "User favourites: ";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Faithful,
    /// Substitutes `ceil(fraction * tokens)` words regardless of the budget.
    OverBudget(f64),
}

#[derive(Debug, Clone)]
pub struct SurrogateRewriter {
    mode: Mode,
    id: String,
}

impl Default for SurrogateRewriter {
    fn default() -> Self {
        Self::new()
    }
}

impl SurrogateRewriter {
    /// Stays within the budget it is given.
    pub fn new() -> Self {
        Self {
            mode: Mode::Faithful,
            id: "surrogate-v1".into(),
        }
    }

    /// Ignores the budget and rewrites `fraction` of the words every time.
    pub fn over_budget(fraction: f64) -> Self {
        Self {
            mode: Mode::OverBudget(fraction),
            id: format!("surrogate-over-budget-{fraction}"),
        }
    }

    fn edits_for(&self, budget: usize, original: &str) -> usize {
        match self.mode {
            Mode::Faithful => budget,
            Mode::OverBudget(f) => (f * word_slots(original).len() as f64).ceil() as usize,
        }
    }
}

impl RewriteClient for SurrogateRewriter {
    fn client_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let out = match &request.task {
            RewriteTask::Emotional { original, goal, budget } => {
                substitute_lexicon(original, lexicon(*goal), self.edits_for(*budget, original), &mut rng)
            }
            RewriteTask::Neighbor {
                original,
                neighbors,
                budget,
                ..
            } => match self.mode {
                Mode::Faithful => splice_neighbor(original, neighbors, *budget),
                Mode::OverBudget(_) => {
                    let n = self.edits_for(*budget, original);
                    substitute_lexicon(original, PROMOTE_LEXICON, n, &mut rng)
                }
            },
            RewriteTask::Chain {
                original,
                neighbors,
                goal,
                budget,
            } => {
                let total = self.edits_for(*budget, original);
                let emotive = total.div_ceil(2);
                let spliced = total - emotive;
                let first = substitute_lexicon(original, lexicon(*goal), emotive, &mut rng);
                splice_neighbor(&first, neighbors, spliced)
            }
            RewriteTask::Summarize { titles } => format!("{SUMMARY_PREFIX}{}", titles.join("; ")),
            RewriteTask::Rerank { candidate_ids, k } => {
                candidate_ids.iter().take(*k).cloned().collect::<Vec<_>>().join("\n")
            }
        };
        Ok(out)
    }
}

fn lexicon(goal: Goal) -> &'static [&'static str] {
    match goal {
        Goal::Promote => PROMOTE_LEXICON,
        Goal::Demote => DEMOTE_LEXICON,
    }
}

/// A whitespace word split into leading punctuation, core and trailing
/// punctuation. Only words with a non-empty core count as tokens.
struct Word<'a> {
    lead: &'a str,
    core: &'a str,
    trail: &'a str,
}

fn split_word(word: &str) -> Word<'_> {
    let start = word
        .char_indices()
        .find(|(_, c)| c.is_alphanumeric())
        .map(|(i, _)| i)
        .unwrap_or(word.len());
    let end = word
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(start);
    Word {
        lead: &word[..start],
        core: &word[start..end.max(start)],
        trail: &word[end.max(start)..],
    }
}

fn word_slots(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .enumerate()
        .filter(|(_, w)| !split_word(w).core.is_empty())
        .map(|(i, _)| i)
        .collect()
}

/// Replaces `count` distinct words at seeded positions with lexicon words
/// that differ from what they replace.
pub(crate) fn substitute_lexicon(text: &str, lexicon: &[&str], count: usize, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let slots = word_slots(text);
    let count = count.min(slots.len());
    if count == 0 {
        return text.to_string();
    }
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, slots.len(), count)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    positions.sort_unstable();
    let mut used: Vec<&str> = Vec::new();
    for pos in positions {
        let parts = split_word(&words[pos]);
        let current = parts.core.to_lowercase();
        let fresh: Vec<&str> = lexicon
            .iter()
            .copied()
            .filter(|w| *w != current && !used.contains(w))
            .collect();
        let pool: Vec<&str> = if fresh.is_empty() {
            lexicon.iter().copied().filter(|w| *w != current).collect()
        } else {
            fresh
        };
        let Some(choice) = pool.choose(rng).copied() else {
            continue;
        };
        used.push(choice);
        let starts_upper = parts.core.chars().next().is_some_and(char::is_uppercase);
        let replacement = if starts_upper {
            capitalize(choice)
        } else {
            choice.to_string()
        };
        words[pos] = format!("{}{}{}", parts.lead, replacement, parts.trail);
    }
    words.join(" ")
}

/// Inserts the first clause of the first usable neighbor, cut to `max_words`
/// words, as its own sentence after the target's first sentence.
pub(crate) fn splice_neighbor(text: &str, neighbors: &[super::NeighborText], max_words: usize) -> String {
    if max_words == 0 {
        return text.to_string();
    }
    let Some(source) = neighbors.iter().find(|n| !word_slots(&n.description).is_empty()) else {
        return text.to_string();
    };
    let clause: Vec<&str> = first_clause(&source.description)
        .into_iter()
        .map(|w| split_word(w).core)
        .filter(|c| !c.is_empty())
        .take(max_words)
        .collect();
    if clause.is_empty() {
        return text.to_string();
    }
    let sentence = format!("{}.", capitalize(&clause.join(" ")));
    let mut words: Vec<&str> = text.split_whitespace().collect();
    let insert_at = words
        .iter()
        .position(|w| w.ends_with(['.', '!', '?']))
        .map(|i| i + 1)
        .unwrap_or(words.len());
    words.insert(insert_at, &sentence);
    words.join(" ")
}

fn first_clause(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        out.push(w);
        if w.ends_with([',', ';', ':', '.', '!', '?']) {
            break;
        }
    }
    out
}
