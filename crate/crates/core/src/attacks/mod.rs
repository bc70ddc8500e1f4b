//! Description rewriting attacks and the constraint loop around them.
//!
//! Candidates come from a [`RewriteClient`] (remote model or the
//! [`SurrogateRewriter`]) and are then measured with
//! [`check_stealth`](crate::textmetrics::check_stealth). Only a candidate that
//! passes the policy ever replaces a description.

pub mod lexicon;
mod surrogate;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use surrogate::{SurrogateRewriter, SUMMARY_PREFIX};

use crate::clients::ClientError;
use crate::corpus::{Goal, Item, ItemCatalog, Segment, SegmentMap, TargetSet};
use crate::embedding::{EmbeddingError, EmbeddingProvider, VectorIndex};
use crate::prompts::{render, Template};
use crate::textmetrics::{check_stealth, tokenize, StealthError, StealthPolicy, StealthVerdict};
use crate::util::derive_seed;

/// Minimum description length (tokens) for the emotional and chain attacks.
pub const MIN_ATTACK_TOKENS: usize = 5;
/// Words of each neighbor description shown to the model.
pub const NEIGHBOR_SNIPPET_WORDS: usize = 20;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("item `{item_id}` has {tokens} tokens; attacks need at least {MIN_ATTACK_TOKENS}")]
    DescriptionTooShort { item_id: String, tokens: usize },
    #[error("item `{0}` has no neighbor with a usable description")]
    NoUsableNeighbors(String),
    #[error("{segment} segment has {available} candidate neighbors, {requested} required")]
    SegmentTooSmall {
        segment: Segment,
        available: usize,
        requested: usize,
    },
    #[error("item `{0}` is not in the catalog, index or segment map")]
    UnknownItem(String),
    #[error("rewrite client failed for `{item_id}`: {source}")]
    Client {
        item_id: String,
        #[source]
        source: ClientError,
    },
    #[error("stealth check failed for `{item_id}`: {source}")]
    Stealth {
        item_id: String,
        #[source]
        source: StealthError,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Emotional,
    Neighbor,
    Chain,
}

pub const ALL_KINDS: [AttackKind; 3] = [AttackKind::Emotional, AttackKind::Neighbor, AttackKind::Chain];

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Emotional => "emotional",
            AttackKind::Neighbor => "neighbor",
            AttackKind::Chain => "chain",
        }
    }

    pub fn uses_neighbors(self) -> bool {
        !matches!(self, AttackKind::Emotional)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub goal: Goal,
    pub n_neighbors: usize,
    pub policy: StealthPolicy,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, goal: Goal) -> Self {
        Self {
            kind,
            goal,
            n_neighbors: 5,
            policy: StealthPolicy::default(),
            seed: 0,
        }
    }
}

/// A neighbor as shown to the rewriter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborText {
    pub item_id: String,
    pub title: String,
    pub description: String,
}

/// Structured form of what a prompt asks for. Remote clients only send the
/// rendered prompt; the surrogate works from this.
#[derive(Debug, Clone, PartialEq)]
pub enum RewriteTask {
    Emotional {
        original: String,
        goal: Goal,
        budget: usize,
    },
    Neighbor {
        original: String,
        /// Most similar first.
        neighbors: Vec<NeighborText>,
        goal: Goal,
        budget: usize,
    },
    Chain {
        original: String,
        neighbors: Vec<NeighborText>,
        goal: Goal,
        budget: usize,
    },
    Summarize {
        titles: Vec<String>,
    },
    Rerank {
        candidate_ids: Vec<String>,
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub task: RewriteTask,
    pub seed: u64,
}

/// Text completion backend.
pub trait RewriteClient: Send + Sync {
    fn client_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError>;
}

/// Per-attempt parameters for one rewrite call.
#[derive(Debug, Clone, Default)]
pub struct AttemptContext {
    pub seed: u64,
    pub attempt: u32,
    /// Why the previous candidate was rejected, fed back into the prompt.
    pub feedback: Option<String>,
}

impl AttemptContext {
    fn feedback_block(&self) -> String {
        match &self.feedback {
            Some(f) => format!("\nAttempt {}: {}\n", self.attempt, f),
            None => String::new(),
        }
    }
}

/// Result of attacking one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub item_id: String,
    pub kind: AttackKind,
    pub goal: Goal,
    pub original: String,
    /// The accepted candidate, or for a rejected item the candidate with the
    /// highest similarity. Rejected candidates are never applied.
    pub rewritten: String,
    pub verdict: StealthVerdict,
    pub attempts: u32,
    pub neighbor_ids: Vec<String>,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// What an attack needs besides the item itself.
#[derive(Clone, Copy)]
pub struct AttackDeps<'a> {
    pub client: &'a dyn RewriteClient,
    pub embedder: &'a dyn EmbeddingProvider,
    pub catalog: &'a ItemCatalog,
    pub segments: &'a SegmentMap,
    /// Index over the clean catalog, used to find neighbors.
    pub index: &'a VectorIndex,
}

/// The `n` items of the target's opposite segment whose stored embeddings
/// are closest to the target's, most similar first, ties by id.
pub fn select_neighbors(
    target_id: &str,
    segments: &SegmentMap,
    index: &VectorIndex,
    n: usize,
) -> Result<Vec<String>, AttackError> {
    let segment = segments
        .get(target_id)
        .ok_or_else(|| AttackError::UnknownItem(target_id.to_string()))?;
    let opposite = segment.opposite();
    let available = segments.count(opposite);
    if available < n {
        return Err(AttackError::SegmentTooSmall {
            segment: opposite,
            available,
            requested: n,
        });
    }
    let query = index
        .vector(target_id)
        .ok_or_else(|| AttackError::UnknownItem(target_id.to_string()))?;
    let top = index.retrieve_top_n_where(&query, n, |id| segments.get(id) == Some(opposite))?;
    if top.len() < n {
        return Err(AttackError::SegmentTooSmall {
            segment: opposite,
            available: top.len(),
            requested: n,
        });
    }
    Ok(top.into_iter().map(|s| s.item_id).collect())
}

fn snippet(text: &str, words: usize) -> String {
    text.split_whitespace().take(words).collect::<Vec<_>>().join(" ")
}

fn usable_neighbors(item: &Item, neighbors: &[&Item]) -> Result<Vec<NeighborText>, AttackError> {
    let usable: Vec<NeighborText> = neighbors
        .iter()
        .filter(|n| !tokenize(&n.description).is_empty())
        .map(|n| NeighborText {
            item_id: n.item_id.clone(),
            title: n.title.clone(),
            description: n.description.clone(),
        })
        .collect();
    if usable.is_empty() {
        return Err(AttackError::NoUsableNeighbors(item.item_id.clone()));
    }
    Ok(usable)
}

fn neighbor_block(neighbors: &[NeighborText]) -> String {
    neighbors
        .iter()
        .map(|n| format!("- {}: {}", n.title, snippet(&n.description, NEIGHBOR_SNIPPET_WORDS)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn goal_direction(goal: Goal) -> &'static str {
    match goal {
        Goal::Promote => "is more appealing to fans of those popular movies",
        Goal::Demote => "inherits the weaker, less appealing connotations of those niche movies",
    }
}

fn neighbor_segment_label(goal: Goal) -> &'static str {
    match goal {
        Goal::Promote => "popular (short-head)",
        Goal::Demote => "unpopular (long-tail)",
    }
}

fn ensure_min_tokens(item: &Item) -> Result<usize, AttackError> {
    let tokens = tokenize(&item.description).len();
    if tokens < MIN_ATTACK_TOKENS {
        return Err(AttackError::DescriptionTooShort {
            item_id: item.item_id.clone(),
            tokens,
        });
    }
    Ok(tokens)
}

fn call(client: &dyn RewriteClient, item: &Item, request: CompletionRequest) -> Result<String, AttackError> {
    client.complete(&request).map_err(|source| AttackError::Client {
        item_id: item.item_id.clone(),
        source,
    })
}

/// Renders the emotional prompt for `goal`. Split out so `--dry-run` can
/// write prompts without calling a client.
pub fn emotional_request(
    item: &Item,
    goal: Goal,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<CompletionRequest, AttackError> {
    let tokens = ensure_min_tokens(item)?;
    let budget = policy.edit_budget(tokens);
    let template = match goal {
        Goal::Promote => Template::EmotionalPromote,
        Goal::Demote => Template::EmotionalDemote,
    };
    let prompt = render(
        template.text(),
        &[
            ("title", &item.title),
            ("description", &item.description),
            ("token_count", &tokens.to_string()),
            ("budget", &budget.to_string()),
            ("feedback", &ctx.feedback_block()),
        ],
    );
    Ok(CompletionRequest {
        prompt,
        task: RewriteTask::Emotional {
            original: item.description.clone(),
            goal,
            budget,
        },
        seed: ctx.seed,
    })
}

pub fn emotional_rewrite(
    item: &Item,
    goal: Goal,
    client: &dyn RewriteClient,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<String, AttackError> {
    let request = emotional_request(item, goal, policy, ctx)?;
    call(client, item, request)
}

pub fn neighbor_request(
    item: &Item,
    neighbors: &[&Item],
    goal: Goal,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<CompletionRequest, AttackError> {
    let usable = usable_neighbors(item, neighbors)?;
    let tokens = tokenize(&item.description).len();
    let budget = policy.edit_budget(tokens);
    let prompt = render(
        Template::Neighbor.text(),
        &[
            ("title", &item.title),
            ("description", &item.description),
            ("token_count", &tokens.to_string()),
            ("budget", &budget.to_string()),
            ("neighbors", &neighbor_block(&usable)),
            ("neighbor_segment", neighbor_segment_label(goal)),
            ("goal_direction", goal_direction(goal)),
            ("feedback", &ctx.feedback_block()),
        ],
    );
    Ok(CompletionRequest {
        prompt,
        task: RewriteTask::Neighbor {
            original: item.description.clone(),
            neighbors: usable,
            goal,
            budget,
        },
        seed: ctx.seed,
    })
}

pub fn neighbor_rewrite(
    item: &Item,
    neighbors: &[&Item],
    goal: Goal,
    client: &dyn RewriteClient,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<String, AttackError> {
    let request = neighbor_request(item, neighbors, goal, policy, ctx)?;
    call(client, item, request)
}

pub fn chain_request(
    item: &Item,
    neighbors: &[&Item],
    goal: Goal,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<CompletionRequest, AttackError> {
    let tokens = ensure_min_tokens(item)?;
    let usable = usable_neighbors(item, neighbors)?;
    let budget = policy.edit_budget(tokens);
    let (sentiment, examples) = match goal {
        Goal::Promote => ("positive", "\"exhilarating\", \"uplifting\""),
        Goal::Demote => ("negative", "\"lackluster\", \"tedious\""),
    };
    let prompt = render(
        Template::Chain.text(),
        &[
            ("title", &item.title),
            ("description", &item.description),
            ("token_count", &tokens.to_string()),
            ("budget", &budget.to_string()),
            ("neighbors", &neighbor_block(&usable)),
            ("neighbor_segment", neighbor_segment_label(goal)),
            ("goal_direction", goal_direction(goal)),
            ("sentiment", sentiment),
            ("lexicon_examples", examples),
            ("feedback", &ctx.feedback_block()),
        ],
    );
    Ok(CompletionRequest {
        prompt,
        task: RewriteTask::Chain {
            original: item.description.clone(),
            neighbors: usable,
            goal,
            budget,
        },
        seed: ctx.seed,
    })
}

pub fn chain_rewrite(
    item: &Item,
    neighbors: &[&Item],
    goal: Goal,
    client: &dyn RewriteClient,
    policy: &StealthPolicy,
    ctx: &AttemptContext,
) -> Result<String, AttackError> {
    let request = chain_request(item, neighbors, goal, policy, ctx)?;
    call(client, item, request)
}

/// Builds the request the configured attack would send on a given attempt.
pub fn attack_request(
    item: &Item,
    config: &AttackConfig,
    neighbors: &[&Item],
    ctx: &AttemptContext,
) -> Result<CompletionRequest, AttackError> {
    match config.kind {
        AttackKind::Emotional => emotional_request(item, config.goal, &config.policy, ctx),
        AttackKind::Neighbor => neighbor_request(item, neighbors, config.goal, &config.policy, ctx),
        AttackKind::Chain => chain_request(item, neighbors, config.goal, &config.policy, ctx),
    }
}

/// Neighbor items for `item_id` under `config` (empty for emotional).
pub fn neighbors_for(item_id: &str, config: &AttackConfig, deps: &AttackDeps<'_>) -> Result<Vec<String>, AttackError> {
    if config.kind.uses_neighbors() {
        select_neighbors(item_id, deps.segments, deps.index, config.n_neighbors)
    } else {
        Ok(Vec::new())
    }
}

fn rejection_feedback(verdict: &StealthVerdict, budget: usize, policy: &StealthPolicy, no_op: bool) -> String {
    if no_op {
        return "the previous answer repeated the original unchanged; make the requested edits.".into();
    }
    format!(
        "the previous answer was rejected: it changed {} words (limit {}) and had similarity {:.3} (minimum {:.2}). Stay within both limits.",
        verdict.edit_count, budget, verdict.similarity, policy.sigma_min
    )
}

/// Generate-then-verify loop for one target.
///
/// Up to `policy.max_attempts` candidates are requested; the first one that
/// passes [`check_stealth`] and actually changes the tokens is accepted. When
/// all attempts fail, the record keeps the highest-similarity candidate for
/// inspection and `accepted` is false.
pub fn poison_item(item: &Item, config: &AttackConfig, deps: &AttackDeps<'_>) -> Result<RewriteRecord, AttackError> {
    let neighbor_ids = neighbors_for(&item.item_id, config, deps)?;
    let neighbor_items: Vec<&Item> = neighbor_ids
        .iter()
        .map(|id| deps.catalog.get(id).ok_or_else(|| AttackError::UnknownItem(id.clone())))
        .collect::<Result<_, _>>()?;
    let original_tokens = tokenize(&item.description);
    let budget = config.policy.edit_budget(original_tokens.len());
    let max_attempts = config.policy.max_attempts.max(1);

    let mut best: Option<(String, StealthVerdict, bool)> = None;
    let mut feedback = None;
    for attempt in 1..=max_attempts {
        let ctx = AttemptContext {
            seed: derive_seed(config.seed, &item.item_id, u64::from(attempt)),
            attempt,
            feedback: feedback.take(),
        };
        let request = attack_request(item, config, &neighbor_items, &ctx)?;
        let candidate = call(deps.client, item, request)?.trim().to_string();
        let verdict =
            check_stealth(&item.description, &candidate, &config.policy, deps.embedder).map_err(|source| {
                AttackError::Stealth {
                    item_id: item.item_id.clone(),
                    source,
                }
            })?;
        let no_op = tokenize(&candidate) == original_tokens;
        if verdict.accepted && !no_op {
            return Ok(RewriteRecord {
                item_id: item.item_id.clone(),
                kind: config.kind,
                goal: config.goal,
                original: item.description.clone(),
                rewritten: candidate,
                verdict,
                attempts: attempt,
                neighbor_ids,
                accepted: true,
                note: None,
            });
        }
        feedback = Some(rejection_feedback(&verdict, budget, &config.policy, no_op));
        if best.as_ref().is_none_or(|(_, b, _)| verdict.similarity > b.similarity) {
            best = Some((candidate, verdict, no_op));
        }
    }
    let (rewritten, verdict, no_op) = best.expect("at least one attempt ran");
    let note = if no_op {
        "no candidate changed the description".to_string()
    } else {
        format!("rejected after {max_attempts} attempts; original retained")
    };
    Ok(RewriteRecord {
        item_id: item.item_id.clone(),
        kind: config.kind,
        goal: config.goal,
        original: item.description.clone(),
        rewritten,
        verdict,
        attempts: max_attempts,
        neighbor_ids,
        accepted: false,
        note: Some(note),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct PoisonOutcome {
    /// Copy of the input catalog with accepted rewrites applied.
    pub catalog: ItemCatalog,
    /// One record per target that produced candidates, sorted by item id.
    pub records: Vec<RewriteRecord>,
    /// Targets that failed with a hard error, sorted by item id.
    pub failures: Vec<ItemFailure>,
}

impl PoisonOutcome {
    pub fn accepted(&self) -> impl Iterator<Item = &RewriteRecord> {
        self.records.iter().filter(|r| r.accepted)
    }
}

/// Attacks every target independently (in parallel) and applies accepted
/// rewrites to a copy of the catalog. The input catalog is not modified.
pub fn poison_catalog(
    catalog: &ItemCatalog,
    targets: &TargetSet,
    config: &AttackConfig,
    deps: &AttackDeps<'_>,
) -> PoisonOutcome {
    let results: Vec<(String, Result<RewriteRecord, AttackError>)> = targets
        .item_ids
        .par_iter()
        .map(|id| {
            let result = match catalog.get(id) {
                Some(item) => poison_item(item, config, deps),
                None => Err(AttackError::UnknownItem(id.clone())),
            };
            (id.clone(), result)
        })
        .collect();
    let mut poisoned = catalog.clone();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (item_id, result) in results {
        match result {
            Ok(record) => {
                if record.accepted {
                    poisoned.set_description(&record.item_id, record.rewritten.clone());
                }
                records.push(record);
            }
            Err(e) => failures.push(ItemFailure {
                item_id,
                error: e.to_string(),
            }),
        }
    }
    PoisonOutcome {
        catalog: poisoned,
        records,
        failures,
    }
}
