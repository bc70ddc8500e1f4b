//! Two-stage recommender (retrieve top-N, re-rank to top-k) and the
//! baseline-versus-attacked experiment around it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attacks::{
    poison_catalog, AttackConfig, AttackDeps, AttackKind, CompletionRequest, ItemFailure, RewriteClient, RewriteRecord,
    RewriteTask,
};
use crate::clients::ClientError;
use crate::corpus::{Goal, InteractionLog, ItemCatalog, SegmentMap, TargetSet};
use crate::embedding::{cosine, EmbeddingError, EmbeddingProvider, EmbeddingVector, ScoredItem, VectorIndex};
use crate::profiles::{build_profiles, ProfileError, ProfileMethod, ProfileOptions, UserProfile};
use crate::prompts::{render, Template};
use crate::util::{derive_seed, from_jsonl, to_jsonl, write_atomic};

/// Words of each candidate description shown to a remote re-ranker.
pub const RERANK_SNIPPET_WORDS: usize = 30;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("index was built with `{index}` but queries use `{query}`")]
    ProviderMismatch { index: String, query: String },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("run {run_id}, user {user_id}: re-ranker output had no valid candidate ids after {attempts} attempt(s)")]
    UnparseableRerank {
        run_id: String,
        user_id: String,
        attempts: u32,
    },
    #[error("run {run_id}, user {user_id}: re-ranker failed: {source}")]
    RerankClient {
        run_id: String,
        user_id: String,
        #[source]
        source: ClientError,
    },
    #[error("{goal}/{kind} attack failed for {} item(s): {}", failures.len(), summarize_failures(failures))]
    Attack {
        goal: Goal,
        kind: AttackKind,
        failures: Vec<ItemFailure>,
    },
    #[error("no test users: every user is train-only")]
    NoTestUsers,
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn summarize_failures(failures: &[ItemFailure]) -> String {
    failures
        .iter()
        .take(3)
        .map(|f| format!("{} ({})", f.item_id, f.error))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    Remote,
    EmbeddingFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_retrieval: usize,
    pub k_rec: usize,
    /// Profile builders to evaluate; each gets its own recommendation stage.
    pub profile_methods: Vec<ProfileMethod>,
    pub reranker: RerankerKind,
    /// Test interactions rated at least this are relevant.
    pub relevance_threshold: f64,
    pub top_m: usize,
    pub fallback_to_manual: bool,
    pub rerank_attempts: u32,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_retrieval: 50,
            k_rec: 20,
            profile_methods: vec![ProfileMethod::Manual, ProfileMethod::LlmSummarized],
            reranker: RerankerKind::EmbeddingFallback,
            relevance_threshold: 3.5,
            top_m: crate::profiles::DEFAULT_TOP_M,
            fallback_to_manual: false,
            rerank_attempts: 3,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.n_retrieval == 0 {
            return fail("n_retrieval must be at least 1".into());
        }
        if self.k_rec == 0 {
            return fail("k_rec must be at least 1".into());
        }
        if self.k_rec > self.n_retrieval {
            return fail(format!(
                "k_rec ({}) must not exceed n_retrieval ({})",
                self.k_rec, self.n_retrieval
            ));
        }
        if self.profile_methods.is_empty() {
            return fail("profile_methods must not be empty".into());
        }
        if !self.relevance_threshold.is_finite() {
            return fail("relevance_threshold must be finite".into());
        }
        if self.top_m == 0 {
            return fail("top_m must be at least 1".into());
        }
        if self.rerank_attempts == 0 {
            return fail("rerank_attempts must be at least 1".into());
        }
        Ok(())
    }

    /// Profile whose lists feed the retrieval-stage report row.
    pub fn retrieval_method(&self) -> ProfileMethod {
        if self.profile_methods.contains(&ProfileMethod::Manual) {
            ProfileMethod::Manual
        } else {
            self.profile_methods[0]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieval,
    Recommendation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Retrieval => "retrieval",
            Stage::Recommendation => "recommendation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub stage: Stage,
    pub entries: Vec<ScoredItem>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.item_id.as_str()).collect()
    }

    /// 1-based position of `item_id`, if listed.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.item_id == item_id).map(|p| p + 1)
    }
}

/// Retrieval for an already-embedded profile. Items in `exclude` (the user's
/// training items) are filtered before truncation to `n`.
pub fn retrieve_for_vector(
    user_id: &str,
    profile_vector: &EmbeddingVector,
    index: &VectorIndex,
    exclude: &HashSet<&str>,
    n: usize,
) -> Result<RankedList, PipelineError> {
    let entries = index.retrieve_top_n_where(profile_vector, n, |id| !exclude.contains(id))?;
    Ok(RankedList {
        user_id: user_id.to_string(),
        stage: Stage::Retrieval,
        entries,
    })
}

/// Embeds the profile with `embedder` and retrieves the top `n` unseen items.
pub fn run_retrieval(
    profile: &UserProfile,
    embedder: &dyn EmbeddingProvider,
    index: &VectorIndex,
    exclude: &HashSet<&str>,
    n: usize,
) -> Result<RankedList, PipelineError> {
    check_provider(embedder, index)?;
    let vector = embedder.embed(&profile.text)?;
    retrieve_for_vector(&profile.user_id, &vector, index, exclude, n)
}

fn check_provider(embedder: &dyn EmbeddingProvider, index: &VectorIndex) -> Result<(), PipelineError> {
    if embedder.provider_id() != index.provider_id() {
        return Err(PipelineError::ProviderMismatch {
            index: index.provider_id().to_string(),
            query: embedder.provider_id().to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
pub enum Reranker<'a> {
    /// Cosine between profile and item rows, descending, ties by id.
    EmbeddingFallback,
    Remote {
        client: &'a dyn RewriteClient,
        attempts: u32,
    },
}

/// What a re-ranker can look at.
#[derive(Clone, Copy)]
pub struct RerankContext<'a> {
    pub run_id: &'a str,
    pub catalog: &'a ItemCatalog,
    pub index: &'a VectorIndex,
    pub seed: u64,
}

/// The re-rank prompt for one user.
pub fn rerank_request(
    profile: &UserProfile,
    candidates: &RankedList,
    k: usize,
    catalog: &ItemCatalog,
    seed: u64,
    attempt: u32,
) -> CompletionRequest {
    let lines: Vec<String> = candidates
        .entries
        .iter()
        .map(|e| match catalog.get(&e.item_id) {
            Some(item) => format!(
                "{} | {} | {}",
                item.item_id,
                item.title,
                item.description
                    .split_whitespace()
                    .take(RERANK_SNIPPET_WORDS)
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
            None => e.item_id.clone(),
        })
        .collect();
    let feedback = if attempt > 1 {
        "\nYour previous answer contained no ids from the list. Use the ids exactly as written.\n"
    } else {
        ""
    };
    CompletionRequest {
        prompt: render(
            Template::Rerank.text(),
            &[
                ("profile", &profile.text),
                ("candidates", &lines.join("\n")),
                ("k", &k.to_string()),
                ("feedback", feedback),
            ],
        ),
        task: RewriteTask::Rerank {
            candidate_ids: candidates.entries.iter().map(|e| e.item_id.clone()).collect(),
            k,
        },
        seed: derive_seed(seed, &profile.user_id, u64::from(attempt)),
    }
}

/// Valid candidate ids from a model answer, in answer order, without
/// duplicates. Accepts bullets, numbering, quotes and `id | title` lines.
pub fn parse_rerank_output(output: &str, candidates: &[&str]) -> Vec<String> {
    let known: HashSet<&str> = candidates.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in output.lines() {
        let mut s = line.trim();
        s = s.trim_start_matches(['-', '*', '•', ' ']);
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 && s[digits..].starts_with(['.', ')']) {
            s = &s[digits + 1..];
        }
        let s = s
            .split('|')
            .next()
            .unwrap_or("")
            .trim()
            .trim_matches(['`', '"', '\'', ' ']);
        if known.contains(s) && seen.insert(s.to_string()) {
            out.push(s.to_string());
        }
    }
    out
}

/// Pads a parsed answer with the missing candidates in retrieval order and
/// truncates to `k`.
pub fn repair_ranking(parsed: Vec<String>, candidates: &[&str], k: usize) -> Vec<String> {
    let mut out = parsed;
    let present: HashSet<String> = out.iter().cloned().collect();
    out.extend(
        candidates
            .iter()
            .filter(|c| !present.contains(**c))
            .map(|c| c.to_string()),
    );
    out.truncate(k);
    out
}

pub fn rerank(
    profile: &UserProfile,
    profile_vector: &EmbeddingVector,
    candidates: &RankedList,
    k: usize,
    reranker: &Reranker<'_>,
    ctx: &RerankContext<'_>,
) -> Result<RankedList, PipelineError> {
    let entries = match reranker {
        Reranker::EmbeddingFallback => {
            let mut scored: Vec<ScoredItem> = candidates
                .entries
                .iter()
                .map(|e| ScoredItem {
                    score: ctx.index.vector(&e.item_id).map_or(0.0, |v| cosine(profile_vector, &v)),
                    item_id: e.item_id.clone(),
                })
                .collect();
            scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id)));
            scored.truncate(k);
            scored
        }
        Reranker::Remote { client, attempts } => {
            if candidates.entries.is_empty() {
                Vec::new()
            } else {
                let ids = candidates.ids();
                let mut parsed = Vec::new();
                for attempt in 1..=*attempts {
                    let request = rerank_request(profile, candidates, k, ctx.catalog, ctx.seed, attempt);
                    let output = client
                        .complete(&request)
                        .map_err(|source| PipelineError::RerankClient {
                            run_id: ctx.run_id.to_string(),
                            user_id: profile.user_id.clone(),
                            source,
                        })?;
                    parsed = parse_rerank_output(&output, &ids);
                    if !parsed.is_empty() {
                        break;
                    }
                    tracing::warn!(user = %profile.user_id, attempt, "re-ranker answer had no valid ids");
                }
                if parsed.is_empty() {
                    return Err(PipelineError::UnparseableRerank {
                        run_id: ctx.run_id.to_string(),
                        user_id: profile.user_id.clone(),
                        attempts: *attempts,
                    });
                }
                repair_ranking(parsed, &ids, k)
                    .into_iter()
                    .enumerate()
                    .map(|(pos, item_id)| ScoredItem {
                        item_id,
                        score: 1.0 / (pos as f64 + 1.0),
                    })
                    .collect()
            }
        }
    };
    Ok(RankedList {
        user_id: profile.user_id.clone(),
        stage: Stage::Recommendation,
        entries,
    })
}

/// Retrieval and recommendation lists for every test user, ordered by user.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLists {
    pub retrieval: Vec<RankedList>,
    pub rec: Vec<RankedList>,
}

impl StageLists {
    pub fn stage(&self, stage: Stage) -> &[RankedList] {
        match stage {
            Stage::Retrieval => &self.retrieval,
            Stage::Recommendation => &self.rec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackedRun {
    pub goal: Goal,
    pub kind: AttackKind,
    pub records: Vec<RewriteRecord>,
    pub lists: BTreeMap<ProfileMethod, StageLists>,
}

/// Everything needed to re-execute a run. Timing is the only field that
/// varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub crate_version: String,
    pub embedding_provider: String,
    pub completion_client: String,
    pub seeds: BTreeMap<String, u64>,
    pub prompt_hashes: BTreeMap<String, String>,
    pub lexicon_version: String,
    pub manual_template_version: String,
    pub request_parameters: Value,
    pub elapsed_ms: u64,
}

/// Index of a persisted run, so it can be loaded back for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    run_id: String,
    pipeline: PipelineConfig,
    users: Vec<String>,
    relevant: BTreeMap<String, BTreeSet<String>>,
    runs: Vec<(Goal, AttackKind)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub run_id: String,
    /// Effective configuration, as given by the caller.
    pub config: Value,
    pub pipeline: PipelineConfig,
    pub users: Vec<String>,
    /// Relevant held-out items per test user.
    pub relevant: BTreeMap<String, BTreeSet<String>>,
    pub profiles: BTreeMap<ProfileMethod, Vec<UserProfile>>,
    pub targets: BTreeMap<Goal, TargetSet>,
    pub baseline: BTreeMap<ProfileMethod, StageLists>,
    pub attacked: Vec<AttackedRun>,
    pub meta: RunMeta,
}

fn artifact_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let bytes = to_jsonl(rows).map_err(|e| artifact_err(path, e))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| artifact_err(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| artifact_err(path, e))?;
    from_jsonl(&text).map_err(|e| artifact_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| artifact_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| artifact_err(path, e))
}

fn write_lists(dir: &Path, lists: &StageLists) -> Result<(), PipelineError> {
    write_jsonl(&dir.join("retrieval.jsonl"), &lists.retrieval)?;
    write_jsonl(&dir.join("rec.jsonl"), &lists.rec)
}

fn read_lists(dir: &Path) -> Result<StageLists, PipelineError> {
    Ok(StageLists {
        retrieval: read_jsonl(&dir.join("retrieval.jsonl"))?,
        rec: read_jsonl(&dir.join("rec.jsonl"))?,
    })
}

impl ExperimentResult {
    pub fn attacked_run(&self, goal: Goal, kind: AttackKind) -> Option<&AttackedRun> {
        self.attacked.iter().find(|r| r.goal == goal && r.kind == kind)
    }

    /// All rewrite records, ordered by goal, kind, then item id.
    pub fn all_records(&self) -> Vec<&RewriteRecord> {
        let mut runs: Vec<&AttackedRun> = self.attacked.iter().collect();
        runs.sort_by_key(|r| (r.goal, r.kind));
        runs.iter().flat_map(|r| r.records.iter()).collect()
    }

    /// Writes the run as a directory:
    ///
    /// ```text
    /// config.json  run_meta.json  manifest.json  targets.json  rewrites.jsonl
    /// profiles/<method>.jsonl
    /// baseline/<method>/{retrieval,rec}.jsonl
    /// attacked/<goal>/<kind>/rewrites.jsonl
    /// attacked/<goal>/<kind>/<method>/{retrieval,rec}.jsonl
    /// ```
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("run_meta.json"), &self.meta)?;
        let manifest = Manifest {
            run_id: self.run_id.clone(),
            pipeline: self.pipeline.clone(),
            users: self.users.clone(),
            relevant: self.relevant.clone(),
            runs: self.attacked.iter().map(|r| (r.goal, r.kind)).collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        let targets: Vec<&TargetSet> = self.targets.values().collect();
        write_json(&dir.join("targets.json"), &targets)?;
        let all: Vec<&RewriteRecord> = self.all_records();
        write_jsonl(&dir.join("rewrites.jsonl"), &all)?;
        for (method, profiles) in &self.profiles {
            write_jsonl(&dir.join("profiles").join(format!("{method}.jsonl")), profiles)?;
        }
        for (method, lists) in &self.baseline {
            write_lists(&dir.join("baseline").join(method.as_str()), lists)?;
        }
        for run in &self.attacked {
            let run_dir = dir.join("attacked").join(run.goal.as_str()).join(run.kind.as_str());
            write_jsonl(&run_dir.join("rewrites.jsonl"), &run.records)?;
            for (method, lists) in &run.lists {
                write_lists(&run_dir.join(method.as_str()), lists)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let config: Value = read_json(&dir.join("config.json"))?;
        let meta: RunMeta = read_json(&dir.join("run_meta.json"))?;
        let targets: Vec<TargetSet> = read_json(&dir.join("targets.json"))?;
        let mut profiles = BTreeMap::new();
        let mut baseline = BTreeMap::new();
        for &method in &manifest.pipeline.profile_methods {
            profiles.insert(
                method,
                read_jsonl(&dir.join("profiles").join(format!("{method}.jsonl")))?,
            );
            baseline.insert(method, read_lists(&dir.join("baseline").join(method.as_str()))?);
        }
        let mut attacked = Vec::new();
        for &(goal, kind) in &manifest.runs {
            let run_dir = dir.join("attacked").join(goal.as_str()).join(kind.as_str());
            let mut lists = BTreeMap::new();
            for &method in &manifest.pipeline.profile_methods {
                lists.insert(method, read_lists(&run_dir.join(method.as_str()))?);
            }
            attacked.push(AttackedRun {
                goal,
                kind,
                records: read_jsonl(&run_dir.join("rewrites.jsonl"))?,
                lists,
            });
        }
        Ok(Self {
            run_id: manifest.run_id,
            config,
            pipeline: manifest.pipeline,
            users: manifest.users,
            relevant: manifest.relevant,
            profiles,
            targets: targets.into_iter().map(|t| (t.goal, t)).collect(),
            baseline,
            attacked,
            meta,
        })
    }
}

/// Corpus artifacts an experiment runs on.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub catalog: &'a ItemCatalog,
    pub train: &'a InteractionLog,
    pub test: &'a InteractionLog,
    pub segments: &'a SegmentMap,
}

#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    /// Used for attacks, LLM profiles and remote re-ranking.
    pub completion: &'a dyn RewriteClient,
    pub request_parameters: &'a Value,
}

/// One goal's targets and the attacks to try on them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub targets: TargetSet,
    pub kinds: Vec<AttackKind>,
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub run_id: String,
    pub config: Value,
    pub pipeline: PipelineConfig,
    /// Template for every attack; `kind` and `goal` are set per run.
    pub attack: AttackConfig,
    pub scenarios: Vec<Scenario>,
}

/// Users with at least one training and one test interaction, ascending.
pub fn test_users<'a>(train: &'a InteractionLog, test: &'a InteractionLog) -> Vec<&'a str> {
    let with_train = train.users();
    test.users().into_iter().filter(|u| with_train.contains(u)).collect()
}

pub fn relevant_sets(test: &InteractionLog, users: &[&str], threshold: f64) -> BTreeMap<String, BTreeSet<String>> {
    users
        .iter()
        .map(|u| {
            let rel = test
                .for_user(u)
                .filter(|r| r.rating >= threshold)
                .map(|r| r.item_id.clone())
                .collect();
            (u.to_string(), rel)
        })
        .collect()
}

struct Prepared<'a> {
    users: Vec<&'a str>,
    seen: BTreeMap<&'a str, HashSet<&'a str>>,
    profiles: BTreeMap<ProfileMethod, Vec<UserProfile>>,
    vectors: BTreeMap<ProfileMethod, Vec<EmbeddingVector>>,
}

fn run_lists(
    prep: &Prepared<'_>,
    index: &VectorIndex,
    catalog: &ItemCatalog,
    plan: &ExperimentPlan,
    services: &Services<'_>,
) -> Result<BTreeMap<ProfileMethod, StageLists>, PipelineError> {
    let cfg = &plan.pipeline;
    let reranker = match cfg.reranker {
        RerankerKind::EmbeddingFallback => Reranker::EmbeddingFallback,
        RerankerKind::Remote => Reranker::Remote {
            client: services.completion,
            attempts: cfg.rerank_attempts,
        },
    };
    let ctx = RerankContext {
        run_id: &plan.run_id,
        catalog,
        index,
        seed: cfg.seed,
    };
    let mut out = BTreeMap::new();
    for (method, profiles) in &prep.profiles {
        let vectors = &prep.vectors[method];
        let pairs: Vec<(RankedList, RankedList)> = profiles
            .par_iter()
            .zip(vectors.par_iter())
            .map(|(profile, vector)| {
                let seen = &prep.seen[profile.user_id.as_str()];
                let retrieval = retrieve_for_vector(&profile.user_id, vector, index, seen, cfg.n_retrieval)?;
                let rec = rerank(profile, vector, &retrieval, cfg.k_rec, &reranker, &ctx)?;
                Ok((retrieval, rec))
            })
            .collect::<Result<_, PipelineError>>()?;
        let (retrieval, rec) = pairs.into_iter().unzip();
        out.insert(*method, StageLists { retrieval, rec });
    }
    Ok(out)
}

/// Baseline run on the clean catalog, then one poisoned run per scenario and
/// attack kind. Profiles are built once on clean data and reused. When
/// `checkpoint` is given the result so far is saved there after every stage,
/// so a failure leaves the completed parts on disk.
pub fn run_experiment(
    data: &ExperimentData<'_>,
    plan: &ExperimentPlan,
    services: &Services<'_>,
    checkpoint: Option<&Path>,
) -> Result<ExperimentResult, PipelineError> {
    let started = std::time::Instant::now();
    plan.pipeline.validate()?;
    let users = test_users(data.train, data.test);
    if users.is_empty() {
        return Err(PipelineError::NoTestUsers);
    }
    let mut seen: BTreeMap<&str, HashSet<&str>> = users.iter().map(|u| (*u, HashSet::new())).collect();
    for row in data.train.iter() {
        if let Some(set) = seen.get_mut(row.user_id.as_str()) {
            set.insert(row.item_id.as_str());
        }
    }

    let clean_index = VectorIndex::build(data.catalog, services.embedder)?;
    check_provider(services.embedder, &clean_index)?;

    let options = ProfileOptions {
        top_m: plan.pipeline.top_m,
        fallback_to_manual: plan.pipeline.fallback_to_manual,
        seed: plan.pipeline.seed,
    };
    let mut profiles = BTreeMap::new();
    let mut vectors = BTreeMap::new();
    for &method in &plan.pipeline.profile_methods {
        let built = build_profiles(
            &users,
            method,
            data.train,
            data.test,
            data.catalog,
            Some(services.completion),
            &options,
        )?;
        let list: Vec<UserProfile> = built.into_values().collect();
        let texts: Vec<&str> = list.iter().map(|p| p.text.as_str()).collect();
        vectors.insert(method, services.embedder.embed_batch(&texts)?);
        profiles.insert(method, list);
    }
    let prep = Prepared {
        users,
        seen,
        profiles,
        vectors,
    };

    let mut seeds = BTreeMap::new();
    seeds.insert("attack".to_string(), plan.attack.seed);
    seeds.insert("pipeline".to_string(), plan.pipeline.seed);
    for s in &plan.scenarios {
        seeds.insert(format!("targets.{}", s.targets.goal), s.targets.seed);
    }
    let mut result = ExperimentResult {
        run_id: plan.run_id.clone(),
        config: plan.config.clone(),
        pipeline: plan.pipeline.clone(),
        users: prep.users.iter().map(|u| u.to_string()).collect(),
        relevant: relevant_sets(data.test, &prep.users, plan.pipeline.relevance_threshold),
        profiles: prep.profiles.clone(),
        targets: plan
            .scenarios
            .iter()
            .map(|s| (s.targets.goal, s.targets.clone()))
            .collect(),
        baseline: BTreeMap::new(),
        attacked: Vec::new(),
        meta: RunMeta {
            run_id: plan.run_id.clone(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            embedding_provider: services.embedder.provider_id().to_string(),
            completion_client: services.completion.client_id().to_string(),
            seeds,
            prompt_hashes: crate::prompts::template_hashes(),
            lexicon_version: crate::attacks::lexicon::LEXICON_VERSION.to_string(),
            manual_template_version: crate::profiles::MANUAL_TEMPLATE_VERSION.to_string(),
            request_parameters: services.request_parameters.clone(),
            elapsed_ms: 0,
        },
    };
    let save = |r: &ExperimentResult| -> Result<(), PipelineError> {
        match checkpoint {
            Some(dir) => r.save(dir),
            None => Ok(()),
        }
    };

    tracing::info!(users = prep.users.len(), "baseline run");
    result.baseline = run_lists(&prep, &clean_index, data.catalog, plan, services)?;
    save(&result)?;

    let deps = AttackDeps {
        client: services.completion,
        embedder: services.embedder,
        catalog: data.catalog,
        segments: data.segments,
        index: &clean_index,
    };
    for scenario in &plan.scenarios {
        for &kind in &scenario.kinds {
            let goal = scenario.targets.goal;
            tracing::info!(%goal, %kind, targets = scenario.targets.len(), "attacked run");
            let config = AttackConfig {
                kind,
                goal,
                ..plan.attack
            };
            let outcome = poison_catalog(data.catalog, &scenario.targets, &config, &deps);
            if !outcome.failures.is_empty() {
                result.attacked.push(AttackedRun {
                    goal,
                    kind,
                    records: outcome.records,
                    lists: BTreeMap::new(),
                });
                result.meta.elapsed_ms = started.elapsed().as_millis() as u64;
                if let Some(dir) = checkpoint {
                    let run = result.attacked.last().expect("just pushed");
                    let run_dir = dir.join("attacked").join(goal.as_str()).join(kind.as_str());
                    write_jsonl(&run_dir.join("rewrites.jsonl"), &run.records)?;
                    write_jsonl(&run_dir.join("failures.jsonl"), &outcome.failures)?;
                }
                return Err(PipelineError::Attack {
                    goal,
                    kind,
                    failures: outcome.failures,
                });
            }
            let index = VectorIndex::build(&outcome.catalog, services.embedder)?;
            let lists = run_lists(&prep, &index, &outcome.catalog, plan, services)?;
            result.attacked.push(AttackedRun {
                goal,
                kind,
                records: outcome.records,
                lists,
            });
            save(&result)?;
        }
    }
    result.meta.elapsed_ms = started.elapsed().as_millis() as u64;
    save(&result)?;
    Ok(result)
}
