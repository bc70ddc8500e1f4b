//! Frozen expectations. Files under `fixtures/golden` either come from an
//! independent scripted oracle (rankings, neighbors, mass share, re-rank
//! repair) or were generated once by this crate and frozen (targets,
//! rewrite records, the report table). Set `RAGPOISON_BLESS=1` to rewrite
//! the frozen ones after an intentional change.

mod common;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use ragpoison_core::attacks::{poison_item, select_neighbors, AttackDeps};
use ragpoison_core::clients::{RemoteClient, ResponseCache, ServiceConfig};
use ragpoison_core::config::{ExperimentSpec, KindChoice};
use ragpoison_core::corpus::synthetic::{SyntheticCorpus, SyntheticSpec};
use ragpoison_core::corpus::{ingest_corpus, segment_by_popularity, select_targets, temporal_split, Segment};
use ragpoison_core::eval::build_report;
use ragpoison_core::pipeline::{
    rerank, retrieve_for_vector, run_experiment, ExperimentData, RerankContext, Reranker, Services,
};
use ragpoison_core::profiles::{build_llm_profile, build_manual_profile};
use ragpoison_core::{
    AttackConfig, AttackKind, EmbeddingProvider, Goal, InteractionLog, ItemCatalog, MockEmbedder, SurrogateRewriter,
    VectorIndex,
};

use common::{FakeServer, Reply};

const SCORE_TOLERANCE: f64 = 1e-6;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn read_json(name: &str) -> Value {
    let path = golden_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("golden file is JSON")
}

/// Compares against a file produced by this crate, rewriting it when
/// blessing.
fn assert_frozen(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("RAGPOISON_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with RAGPOISON_BLESS=1 to create it", path.display()));
    assert_eq!(actual, expected, "{name} drifted from the frozen copy");
}

fn fixture_corpus() -> (ItemCatalog, InteractionLog) {
    let dir = golden_dir();
    let (catalog, log, report) = ingest_corpus(&dir.join("items.csv"), &dir.join("interactions.csv")).unwrap();
    assert!(report.rejections.is_empty());
    (catalog, log)
}

fn assert_ranking(actual: &[(String, f64)], expected: &Value) {
    let expected = expected.as_array().unwrap();
    assert_eq!(actual.len(), expected.len());
    for (pos, ((id, score), want)) in actual.iter().zip(expected).enumerate() {
        assert_eq!(id, want["item_id"].as_str().unwrap(), "position {pos}");
        let want_score = want["score"].as_f64().unwrap();
        assert!(
            (score - want_score).abs() < SCORE_TOLERANCE,
            "position {pos}: {score} vs {want_score}"
        );
    }
}

#[test]
fn synthetic_short_head_holds_most_interactions() {
    let corpus = SyntheticCorpus::generate(&SyntheticSpec::default());
    let segments = segment_by_popularity(&corpus.catalog, 0.2).unwrap();
    let head: HashSet<&str> = segments.members(Segment::ShortHead).into_iter().collect();
    let total: u64 = corpus.catalog.items().map(|i| i.interaction_count).sum();
    let in_head: u64 = corpus
        .catalog
        .items()
        .filter(|i| head.contains(i.item_id.as_str()))
        .map(|i| i.interaction_count)
        .sum();
    let share = in_head as f64 / total as f64;

    let oracle = read_json("synthetic_mass.json");
    assert_eq!(corpus.catalog.len() as u64, oracle["items"].as_u64().unwrap());
    assert_eq!(total, oracle["interactions"].as_u64().unwrap());
    assert_eq!(head.len() as u64, oracle["short_head_size"].as_u64().unwrap());
    assert!((share - oracle["short_head_mass"].as_f64().unwrap()).abs() < 1e-12);
    assert!(share >= 0.60, "short head holds {share}");
}

#[test]
fn seed_seven_targets_are_frozen() {
    let corpus = SyntheticCorpus::generate(&SyntheticSpec::default());
    let segments = segment_by_popularity(&corpus.catalog, 0.2).unwrap();
    let targets = select_targets(&corpus.catalog, &segments, Goal::Promote, 10, 7).unwrap();
    assert!(targets
        .item_ids
        .iter()
        .all(|id| segments.get(id) == Some(Segment::LongTail)));
    let text = serde_json::to_string_pretty(&targets).unwrap() + "\n";
    assert_frozen("targets_seed7.json", &text);
}

#[test]
fn twenty_item_ranking_matches_exhaustive_scan() {
    let (catalog, _) = fixture_corpus();
    assert_eq!(catalog.len(), 20);
    let embedder = MockEmbedder::default();
    let index = VectorIndex::build(&catalog, &embedder).unwrap();
    let golden = read_json("ranking20.json");
    let query = embedder.embed(golden["query"].as_str().unwrap()).unwrap();
    let got: Vec<(String, f64)> = index
        .retrieve_top_n(&query, 20)
        .unwrap()
        .into_iter()
        .map(|s| (s.item_id, s.score))
        .collect();
    assert_ranking(&got, &golden["ranking"]);
}

#[test]
fn neighbors_of_t42_match_exhaustive_scan() {
    let (catalog, _) = fixture_corpus();
    let segments = segment_by_popularity(&catalog, 0.2).unwrap();
    let golden = read_json("neighbors_t42.json");
    let head: Vec<&str> = golden["short_head"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(segments.members(Segment::ShortHead), head);
    assert_eq!(segments.get("t42"), Some(Segment::LongTail));

    let index = VectorIndex::build(&catalog, &MockEmbedder::default()).unwrap();
    let got = select_neighbors("t42", &segments, &index, 3).unwrap();
    let want: Vec<String> = serde_json::from_value(golden["neighbors"].clone()).unwrap();
    assert_eq!(got, want);
}

struct SyntheticUser {
    corpus: SyntheticCorpus,
    train: InteractionLog,
    index: VectorIndex,
    embedder: MockEmbedder,
}

fn synthetic_user() -> SyntheticUser {
    let corpus = SyntheticCorpus::generate(&SyntheticSpec::default());
    let (train, _) = temporal_split(&corpus.log, 0.8).unwrap();
    let embedder = MockEmbedder::default();
    let index = VectorIndex::build(&corpus.catalog, &embedder).unwrap();
    SyntheticUser {
        corpus,
        train,
        index,
        embedder,
    }
}

#[test]
fn top_fifty_for_fixture_user_matches_exhaustive_scan() {
    let s = synthetic_user();
    let golden = read_json("top50.json");
    let user = golden["user_id"].as_str().unwrap();
    let profile = build_manual_profile(user, &s.train, &s.corpus.catalog, 3).unwrap();
    assert_eq!(profile.text, golden["profile"].as_str().unwrap());

    let seen: HashSet<&str> = s.train.for_user(user).map(|r| r.item_id.as_str()).collect();
    let vector = s.embedder.embed(&profile.text).unwrap();
    let list = retrieve_for_vector(user, &vector, &s.index, &seen, 50).unwrap();
    let got: Vec<(String, f64)> = list.entries.into_iter().map(|e| (e.item_id, e.score)).collect();
    assert_ranking(&got, &golden["ranking"]);
}

fn service(url: &str) -> ServiceConfig {
    ServiceConfig {
        base_url: url.to_string(),
        backoff_base_ms: 1,
        timeout_ms: 5_000,
        ..ServiceConfig::default()
    }
}

#[test]
fn recorded_rerank_answer_replays_to_golden_top_twenty() {
    let s = synthetic_user();
    let golden = read_json("rerank_top20.json");
    let user = golden["user_id"].as_str().unwrap();
    let profile = build_manual_profile(user, &s.train, &s.corpus.catalog, 3).unwrap();
    let seen: HashSet<&str> = s.train.for_user(user).map(|r| r.item_id.as_str()).collect();
    let vector = s.embedder.embed(&profile.text).unwrap();
    let candidates = retrieve_for_vector(user, &vector, &s.index, &seen, 50).unwrap();

    let server = FakeServer::start(vec![Reply::json(&read_json("rerank_response.json"))]);
    let cache = tempfile::tempdir().unwrap();
    let client = RemoteClient::new(service(&server.url), ResponseCache::new(cache.path()), false).unwrap();
    let ctx = RerankContext {
        run_id: "golden",
        catalog: &s.corpus.catalog,
        index: &s.index,
        seed: 42,
    };
    let reranker = Reranker::Remote {
        client: &client,
        attempts: 2,
    };
    let list = rerank(&profile, &vector, &candidates, 20, &reranker, &ctx).unwrap();
    let want: Vec<String> = serde_json::from_value(golden["ranking"].clone()).unwrap();
    assert_eq!(list.ids(), want);
    assert_eq!(server.requests().len(), 1);

    // Replaying from the cache alone gives the same list.
    let offline = RemoteClient::new(service(&server.url), ResponseCache::new(cache.path()), true).unwrap();
    let replayed = rerank(
        &profile,
        &vector,
        &candidates,
        20,
        &Reranker::Remote {
            client: &offline,
            attempts: 2,
        },
        &ctx,
    )
    .unwrap();
    assert_eq!(replayed, list);
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn recorded_summary_replays_to_profile_body() {
    let s = synthetic_user();
    let body = "  Enjoys slow-burning horror with a sense of humour, and hopeful space stories.\n";
    let server = FakeServer::start(vec![Reply::json(&json!({ "text": body }))]);
    let cache = tempfile::tempdir().unwrap();
    let client = RemoteClient::new(service(&server.url), ResponseCache::new(cache.path()), false).unwrap();
    let profile = build_llm_profile("u000", &s.train, &s.corpus.catalog, 3, &client, 42).unwrap();
    assert_eq!(profile.text, body.trim());
    assert_eq!(server.requests()[0].path, "/rewrite");
}

#[test]
fn rewrite_record_for_t42_is_frozen() {
    let (catalog, _) = fixture_corpus();
    let segments = segment_by_popularity(&catalog, 0.2).unwrap();
    let embedder = MockEmbedder::default();
    let index = VectorIndex::build(&catalog, &embedder).unwrap();
    let client = SurrogateRewriter::new();
    let deps = AttackDeps {
        client: &client,
        embedder: &embedder,
        catalog: &catalog,
        segments: &segments,
        index: &index,
    };
    let mut lines = String::new();
    for kind in [AttackKind::Emotional, AttackKind::Neighbor, AttackKind::Chain] {
        let config = AttackConfig {
            n_neighbors: 3,
            seed: 7,
            ..AttackConfig::new(kind, Goal::Promote)
        };
        let record = poison_item(catalog.get("t42").unwrap(), &config, &deps).unwrap();
        assert!(record.accepted);
        if kind.uses_neighbors() {
            assert_eq!(record.neighbor_ids, ["t33", "t43", "t39"]);
        }
        lines.push_str(&serde_json::to_string(&record).unwrap());
        lines.push('\n');
    }
    assert_frozen("rewrite_records_t42.jsonl", &lines);
}

fn fixture_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.attack.kind = KindChoice::All;
    spec.attack.target_count = 3;
    spec.attack.n_neighbors = 3;
    spec.pipeline.n_retrieval = 10;
    spec.pipeline.k_rec = 5;
    spec
}

fn run_fixture(spec: &ExperimentSpec) -> ragpoison_core::ExperimentResult {
    let (catalog, log) = fixture_corpus();
    let segments = segment_by_popularity(&catalog, spec.segmentation.head_fraction).unwrap();
    let (train, test) = temporal_split(&log, spec.split.train_fraction).unwrap();
    let plan = spec.plan(&catalog, &segments).unwrap();
    let embedder = MockEmbedder::new(spec.pipeline.mock_dim);
    let completion = SurrogateRewriter::new();
    let params = Value::Null;
    let services = Services {
        embedder: &embedder,
        completion: &completion,
        request_parameters: &params,
    };
    let data = ExperimentData {
        catalog: &catalog,
        train: &train,
        test: &test,
        segments: &segments,
    };
    run_experiment(&data, &plan, &services, None).unwrap()
}

#[test]
fn surrogate_run_produces_golden_rewrites_and_table() {
    let result = run_fixture(&fixture_spec());
    let dir = tempfile::tempdir().unwrap();
    result.save(dir.path()).unwrap();
    let rewrites = std::fs::read_to_string(dir.path().join("rewrites.jsonl")).unwrap();
    assert_eq!(rewrites.lines().count(), 2 * 3 * 3);
    assert_frozen("rewrites.jsonl", &rewrites);
    assert_frozen("table.txt", &build_report(&result).table_text());
}

#[test]
fn zero_budget_rejects_every_rewrite() {
    let mut spec = fixture_spec();
    spec.attack.delta = 0.0;
    let result = run_fixture(&spec);
    let records = result.all_records();
    assert_eq!(records.len(), 18);
    assert!(records
        .iter()
        .all(|r| !r.accepted && r.attempts == spec.attack.max_attempts));
    for run in &result.attacked {
        for (method, lists) in &run.lists {
            assert_eq!(lists, &result.baseline[method]);
        }
    }
    let report = build_report(&result);
    assert!(report.rewrites.iter().all(|r| r.accepted == 0));
}
