//! Experiment file schema (TOML). Every section is optional and falls back to
//! the defaults below; unknown keys are rejected. See `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, AttackKind, ALL_KINDS};
use crate::clients::ServiceConfig;
use crate::corpus::{select_targets, CorpusError, Goal, ItemCatalog, SegmentMap, TargetSet};
use crate::embedding::DEFAULT_MOCK_DIM;
use crate::pipeline::{ExperimentPlan, PipelineConfig, RerankerKind, Scenario};
use crate::profiles::ProfileMethod;
use crate::textmetrics::StealthPolicy;
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub items: PathBuf,
    pub interactions: PathBuf,
    pub workdir: PathBuf,
    /// Response cache for remote services; defaults to `<workdir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            items: "data/items.csv".into(),
            interactions: "data/interactions.csv".into(),
            workdir: "runs/default".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSection {
    pub head_fraction: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self { head_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

/// `kind`: one attack or `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindChoice {
    Emotional,
    Neighbor,
    Chain,
    All,
}

impl KindChoice {
    pub fn kinds(self) -> Vec<AttackKind> {
        match self {
            KindChoice::Emotional => vec![AttackKind::Emotional],
            KindChoice::Neighbor => vec![AttackKind::Neighbor],
            KindChoice::Chain => vec![AttackKind::Chain],
            KindChoice::All => ALL_KINDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalChoice {
    Promote,
    Demote,
    Both,
}

impl GoalChoice {
    pub fn goals(self) -> Vec<Goal> {
        match self {
            GoalChoice::Promote => vec![Goal::Promote],
            GoalChoice::Demote => vec![Goal::Demote],
            GoalChoice::Both => vec![Goal::Promote, Goal::Demote],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: KindChoice,
    pub goal: GoalChoice,
    pub n_neighbors: usize,
    pub delta: f64,
    pub sigma_min: f64,
    pub max_attempts: u32,
    /// Targets per goal; 0 runs the identity attack.
    pub target_count: usize,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let policy = StealthPolicy::default();
        Self {
            kind: KindChoice::All,
            goal: GoalChoice::Both,
            n_neighbors: 5,
            delta: policy.delta,
            sigma_min: policy.sigma_min,
            max_attempts: policy.max_attempts,
            target_count: 10,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileChoice {
    Manual,
    Llm,
    Both,
}

impl ProfileChoice {
    pub fn methods(self) -> Vec<ProfileMethod> {
        match self {
            ProfileChoice::Manual => vec![ProfileMethod::Manual],
            ProfileChoice::Llm => vec![ProfileMethod::LlmSummarized],
            ProfileChoice::Both => vec![ProfileMethod::Manual, ProfileMethod::LlmSummarized],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderChoice {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionChoice {
    Surrogate,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub n_retrieval: usize,
    pub k_rec: usize,
    pub profile_method: ProfileChoice,
    pub reranker: RerankerKind,
    pub embedder: EmbedderChoice,
    pub completion: CompletionChoice,
    pub mock_dim: usize,
    pub relevance_threshold: f64,
    pub top_m: usize,
    pub fallback_to_manual: bool,
    pub rerank_attempts: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            n_retrieval: p.n_retrieval,
            k_rec: p.k_rec,
            profile_method: ProfileChoice::Both,
            reranker: p.reranker,
            embedder: EmbedderChoice::Mock,
            completion: CompletionChoice::Surrogate,
            mock_dim: DEFAULT_MOCK_DIM,
            relevance_threshold: p.relevance_threshold,
            top_m: p.top_m,
            fallback_to_manual: p.fallback_to_manual,
            rerank_attempts: p.rerank_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServicesSection {
    /// Required when `pipeline.embedder = "remote"`.
    pub embedding: Option<ServiceConfig>,
    /// Required when `pipeline.completion = "remote"` or `pipeline.reranker = "remote"`.
    pub completion: Option<ServiceConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub paths: PathsSection,
    pub segmentation: SegmentationSection,
    pub split: SplitSection,
    pub attack: AttackSection,
    pub pipeline: PipelineSection,
    pub services: ServicesSection,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut spec = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.items);
        join(&mut self.paths.interactions);
        join(&mut self.paths.workdir);
        if let Some(c) = self.paths.cache_dir.as_mut() {
            join(c);
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.paths.workdir.join("cache"))
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let fraction = |name: &str, v: f64, errs: &mut Vec<String>| {
            if !(v > 0.0 && v < 1.0) {
                errs.push(format!("{name} must be strictly between 0 and 1, got {v}"));
            }
        };
        fraction("segmentation.head_fraction", self.segmentation.head_fraction, &mut errs);
        fraction("split.train_fraction", self.split.train_fraction, &mut errs);
        let a = &self.attack;
        if a.n_neighbors == 0 {
            errs.push("attack.n_neighbors must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&a.delta) {
            errs.push(format!("attack.delta must be in [0, 1], got {}", a.delta));
        }
        if !(0.0..=1.0).contains(&a.sigma_min) {
            errs.push(format!("attack.sigma_min must be in [0, 1], got {}", a.sigma_min));
        }
        if a.max_attempts == 0 {
            errs.push("attack.max_attempts must be at least 1".into());
        }
        let p = &self.pipeline;
        if p.n_retrieval == 0 {
            errs.push("pipeline.n_retrieval must be at least 1".into());
        }
        if p.k_rec == 0 {
            errs.push("pipeline.k_rec must be at least 1".into());
        }
        if p.k_rec > p.n_retrieval {
            errs.push(format!(
                "pipeline.k_rec ({}) must not exceed pipeline.n_retrieval ({})",
                p.k_rec, p.n_retrieval
            ));
        }
        if p.mock_dim == 0 {
            errs.push("pipeline.mock_dim must be at least 1".into());
        }
        if p.top_m == 0 {
            errs.push("pipeline.top_m must be at least 1".into());
        }
        if p.rerank_attempts == 0 {
            errs.push("pipeline.rerank_attempts must be at least 1".into());
        }
        if !p.relevance_threshold.is_finite() {
            errs.push("pipeline.relevance_threshold must be finite".into());
        }
        let needs_embedding = p.embedder == EmbedderChoice::Remote;
        let needs_completion = p.completion == CompletionChoice::Remote || p.reranker == RerankerKind::Remote;
        match (&self.services.embedding, needs_embedding) {
            (None, true) => errs.push("services.embedding is required when pipeline.embedder = \"remote\"".into()),
            (Some(s), _) => {
                if let Err(e) = s.validate() {
                    errs.push(format!("services.embedding: {e}"));
                }
            }
            _ => {}
        }
        match (&self.services.completion, needs_completion) {
            (None, true) => errs.push(
                "services.completion is required when pipeline.completion or pipeline.reranker is \"remote\"".into(),
            ),
            (Some(s), _) => {
                if let Err(e) = s.validate() {
                    errs.push(format!("services.completion: {e}"));
                }
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn policy(&self) -> StealthPolicy {
        StealthPolicy::new_unchecked(self.attack.delta, self.attack.sigma_min, self.attack.max_attempts)
    }

    /// Attack template; `kind` and `goal` are overwritten per run.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Chain,
            goal: Goal::Promote,
            n_neighbors: self.attack.n_neighbors,
            policy: self.policy(),
            seed: self.attack.seed,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            n_retrieval: p.n_retrieval,
            k_rec: p.k_rec,
            profile_methods: p.profile_method.methods(),
            reranker: p.reranker,
            relevance_threshold: p.relevance_threshold,
            top_m: p.top_m,
            fallback_to_manual: p.fallback_to_manual,
            rerank_attempts: p.rerank_attempts,
            seed: self.attack.seed,
        }
    }

    /// Picks targets for every configured goal and assembles the run plan.
    pub fn plan(&self, catalog: &ItemCatalog, segments: &SegmentMap) -> Result<ExperimentPlan, CorpusError> {
        let a = &self.attack;
        let scenarios = a
            .goal
            .goals()
            .into_iter()
            .map(|goal| {
                let targets = if a.target_count == 0 {
                    TargetSet::none(goal, a.seed)
                } else {
                    select_targets(catalog, segments, goal, a.target_count, a.seed)?
                };
                Ok(Scenario {
                    targets,
                    kinds: a.kind.kinds(),
                })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(ExperimentPlan {
            run_id: self.run_id(),
            config: self.effective_json(),
            pipeline: self.pipeline_config(),
            attack: self.attack_config(),
            scenarios,
        })
    }

    /// The configuration as it will run, overrides applied.
    pub fn effective_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("spec always serializes")
    }

    /// Content hash of the fields that determine results (paths excluded).
    pub fn run_id(&self) -> String {
        let mut v = self.effective_json();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let digest = sha256_hex(serde_json::to_string(&v).expect("JSON values serialize").as_bytes());
        digest[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec always serializes to TOML")
    }
}
