//! Test-bench for provider-side textual poisoning of a two-stage
//! (embedding retrieval + re-ranking) recommender.
//!
//! The crate is organised the way an experiment flows:
//!
//! * [`corpus`] loads items and interactions, segments items by popularity,
//!   splits interactions temporally and picks attack targets.
//! * [`textmetrics`] measures how much a rewrite changed a description
//!   (token edit distance, embedding similarity) and decides whether it is
//!   stealthy enough.
//! * [`embedding`] provides embedders and the exact cosine index.
//! * [`profiles`] renders user profile text that seeds retrieval.
//! * [`attacks`] rewrites target descriptions (emotional, neighbor, chain)
//!   under a generate-then-verify loop.
//! * [`pipeline`] runs retrieval and re-ranking for every test user, before
//!   and after poisoning.
//! * [`eval`] turns runs into rank, exposure, Recall and nDCG reports.
//! * [`clients`] talks to remote embedding and completion services through a
//!   content-addressed response cache.
//! * [`config`] is the experiment file schema shared with the CLI.

pub mod attacks;
pub mod clients;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod pipeline;
pub mod profiles;
pub mod prompts;
pub mod textmetrics;

mod util;

pub use attacks::{AttackConfig, AttackKind, RewriteClient, RewriteRecord, SurrogateRewriter};
pub use corpus::{Goal, Interaction, InteractionLog, Item, ItemCatalog, Segment, SegmentMap, TargetSet};
pub use embedding::{EmbeddingProvider, EmbeddingVector, MockEmbedder, ScoredItem, VectorIndex};
pub use pipeline::{ExperimentResult, PipelineConfig, RankedList, Stage};
pub use textmetrics::{StealthPolicy, StealthVerdict};
