//! `ragpoison`: operator entry point for poisoning experiments.
//!
//! Every subcommand reads one experiment file, applies flag overrides,
//! validates everything up front and then writes into its own directory
//! under the workdir. Exit codes: 0 success, 1 runtime failure, 2 invalid
//! configuration or an output that already exists without `--force`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ragpoison_core::attacks::{
    attack_request, neighbors_for, poison_catalog, AttackDeps, AttemptContext, CompletionRequest,
};
use ragpoison_core::clients::{ClientError, RemoteClient, ResponseCache, ServiceConfig};
use ragpoison_core::config::{CompletionChoice, EmbedderChoice, ExperimentSpec};
use ragpoison_core::corpus::synthetic::{SyntheticCorpus, SyntheticSpec};
use ragpoison_core::corpus::{ingest_corpus, segment_by_popularity, temporal_split, LoadReport, Segment, SegmentMap};
use ragpoison_core::eval::build_report;
use ragpoison_core::pipeline::{run_experiment, ExperimentData, ExperimentPlan, RerankerKind, Services};
use ragpoison_core::{
    EmbeddingProvider, ExperimentResult, InteractionLog, ItemCatalog, MockEmbedder, RewriteClient, RewriteRecord,
    SurrogateRewriter, VectorIndex,
};

#[derive(Parser)]
#[command(
    name = "ragpoison",
    version,
    about = "Textual poisoning test-bench for retrieval + re-rank recommenders"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment file (TOML). Without it every setting takes its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `attack.seed`, which also seeds target selection and re-ranking.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Serve remote calls from the response cache only.
    #[arg(long, global = true)]
    offline: bool,
    /// Replace outputs left by an earlier invocation.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus, writing the load report.
    Ingest,
    /// Split items into short head and long tail, pick targets and build the clean index.
    Segment,
    /// Poison the targets only and summarise the rewrites.
    Attack {
        /// Render every attack prompt to files instead of calling any client.
        #[arg(long)]
        dry_run: bool,
    },
    /// Baseline and attacked runs, then the report; prints the table.
    Run,
    /// Rebuild the report from a saved run and print the table.
    Report,
    /// Write a synthetic corpus as CSV.
    Synth {
        /// Output directory for `items.csv` and `interactions.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Problems found before any work started; exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(message: impl Into<String>) -> anyhow::Error {
    Invalid(message.into()).into()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Synth { out } = &cli.command {
        return synth(out, &cli.global);
    }
    let spec = load_spec(&cli.global)?;
    let ctx = Session {
        spec,
        global: &cli.global,
    };
    match &cli.command {
        Command::Ingest => ingest(&ctx),
        Command::Segment => segment(&ctx),
        Command::Attack { dry_run: false } => attack(&ctx),
        Command::Attack { dry_run: true } => dry_run(&ctx),
        Command::Run => run(&ctx),
        Command::Report => report(&ctx),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

struct Session<'a> {
    spec: ExperimentSpec,
    global: &'a Global,
}

fn load_spec(global: &Global) -> Result<ExperimentSpec> {
    let mut spec = match &global.config {
        Some(path) => ExperimentSpec::load(path).map_err(|e| invalid(e.to_string()))?,
        None => {
            let mut spec = ExperimentSpec::default();
            spec.resolve_paths(&std::env::current_dir()?);
            spec
        }
    };
    if let Some(seed) = global.seed {
        spec.attack.seed = seed;
    }
    if let Some(dir) = &global.workdir {
        spec.paths.workdir = dir.clone();
    }
    spec.validate()
        .map_err(|e| invalid(format!("invalid configuration: {e}")))?;
    Ok(spec)
}

impl Session<'_> {
    /// Claims `<workdir>/<name>` for this command, clearing it under `--force`.
    fn output_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.spec.paths.workdir.join(name);
        if dir.exists() {
            if !self.global.force {
                return Err(invalid(format!(
                    "{} already exists; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("effective_config.toml"), self.spec.to_toml())?;
        Ok(dir)
    }

    fn corpus(&self) -> Result<(ItemCatalog, InteractionLog, LoadReport)> {
        let p = &self.spec.paths;
        ingest_corpus(&p.items, &p.interactions).context("cannot load the corpus")
    }

    fn segments(&self, catalog: &ItemCatalog) -> Result<SegmentMap> {
        Ok(segment_by_popularity(catalog, self.spec.segmentation.head_fraction)?)
    }

    fn plan(&self, catalog: &ItemCatalog, segments: &SegmentMap) -> Result<ExperimentPlan> {
        self.spec.plan(catalog, segments).map_err(|e| invalid(e.to_string()))
    }

    fn remote(&self, config: Option<&ServiceConfig>, section: &str, offline: bool) -> Result<RemoteClient> {
        let config = config.ok_or_else(|| invalid(format!("services.{section} is required")))?;
        RemoteClient::new(config.clone(), ResponseCache::new(self.spec.cache_dir()), offline)
            .map_err(|e| invalid(format!("services.{section}: {e}")))
    }

    /// The configured embedder and completion backends. Remote clients are
    /// forced into cache-only mode when `offline` is set.
    fn backends(&self, offline: bool) -> Result<Backends> {
        let p = &self.spec.pipeline;
        let embedder: Box<dyn EmbeddingProvider> = match p.embedder {
            EmbedderChoice::Mock => Box::new(MockEmbedder::new(p.mock_dim)),
            EmbedderChoice::Remote => {
                Box::new(self.remote(self.spec.services.embedding.as_ref(), "embedding", offline)?)
            }
        };
        let remote_completion = p.completion == CompletionChoice::Remote || p.reranker == RerankerKind::Remote;
        let (completion, parameters): (Box<dyn RewriteClient>, Value) = if remote_completion {
            let c = self.remote(self.spec.services.completion.as_ref(), "completion", offline)?;
            let params = c.request_parameters();
            (Box::new(c), params)
        } else {
            (Box::new(SurrogateRewriter::new()), Value::Null)
        };
        Ok(Backends {
            embedder,
            completion,
            parameters,
        })
    }
}

struct Backends {
    embedder: Box<dyn EmbeddingProvider>,
    completion: Box<dyn RewriteClient>,
    parameters: Value,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn synth(out: &Path, global: &Global) -> Result<()> {
    let items = out.join("items.csv");
    let interactions = out.join("interactions.csv");
    if (items.exists() || interactions.exists()) && !global.force {
        return Err(invalid(format!(
            "{} already holds a corpus; pass --force to replace it",
            out.display()
        )));
    }
    let mut spec = SyntheticSpec::default();
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    fs::create_dir_all(out)?;
    let corpus = SyntheticCorpus::generate(&spec);
    corpus.write_csv(&items, &interactions)?;
    println!(
        "wrote {} items and {} interactions to {}",
        corpus.catalog.len(),
        corpus.log.len(),
        out.display()
    );
    Ok(())
}

fn ingest(ctx: &Session<'_>) -> Result<()> {
    let (catalog, log, load) = ctx.corpus()?;
    let dir = ctx.output_dir("ingest")?;
    fs::write(dir.join("load_report.jsonl"), load.to_jsonl())?;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in &load.rejections {
        let key = serde_json::to_value(r.reason)?
            .as_str()
            .unwrap_or("unknown")
            .to_string();
        *reasons.entry(key).or_default() += 1;
    }
    let summary = json!({
        "items": catalog.len(),
        "interactions": log.len(),
        "users": log.users().len(),
        "rejected": load.rejections.len(),
        "rejected_by_reason": reasons,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{} items, {} interactions, {} users, {} rows rejected",
        catalog.len(),
        log.len(),
        log.users().len(),
        load.rejections.len()
    );
    for (reason, n) in &reasons {
        println!("  {reason}: {n}");
    }
    Ok(())
}

fn segment(ctx: &Session<'_>) -> Result<()> {
    let (catalog, _, _) = ctx.corpus()?;
    let segments = ctx.segments(&catalog)?;
    let plan = ctx.plan(&catalog, &segments)?;
    let backends = ctx.backends(ctx.global.offline)?;
    let dir = ctx.output_dir("segments")?;
    write_json(&dir.join("segments.json"), &segments)?;
    let targets: Vec<_> = plan.scenarios.iter().map(|s| &s.targets).collect();
    write_json(&dir.join("targets.json"), &targets)?;
    let index = VectorIndex::build(&catalog, backends.embedder.as_ref())?;
    fs::write(dir.join("index.bin"), index.to_bytes())?;

    let head: HashSet<&str> = segments.members(Segment::ShortHead).into_iter().collect();
    let total: u64 = catalog.items().map(|i| i.interaction_count).sum();
    let in_head: u64 = catalog
        .items()
        .filter(|i| head.contains(i.item_id.as_str()))
        .map(|i| i.interaction_count)
        .sum();
    println!(
        "short head {} items ({:.1}% of interactions), long tail {} items",
        head.len(),
        100.0 * in_head as f64 / total.max(1) as f64,
        segments.count(Segment::LongTail)
    );
    for t in targets {
        println!(
            "{} targets: {}",
            t.goal,
            t.item_ids.iter().cloned().collect::<Vec<_>>().join(", ")
        );
    }
    Ok(())
}

/// Mean of `f` over the records, `None` when there are none.
fn mean(records: &[RewriteRecord], f: impl Fn(&RewriteRecord) -> f64) -> Option<f64> {
    (!records.is_empty()).then(|| records.iter().map(&f).sum::<f64>() / records.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn attack(ctx: &Session<'_>) -> Result<()> {
    let (catalog, _, _) = ctx.corpus()?;
    let segments = ctx.segments(&catalog)?;
    let plan = ctx.plan(&catalog, &segments)?;
    let backends = ctx.backends(ctx.global.offline)?;
    let dir = ctx.output_dir("attack")?;
    let index = VectorIndex::build(&catalog, backends.embedder.as_ref())?;
    let deps = AttackDeps {
        client: backends.completion.as_ref(),
        embedder: backends.embedder.as_ref(),
        catalog: &catalog,
        segments: &segments,
        index: &index,
    };

    let mut all = Vec::new();
    let mut failures = Vec::new();
    println!(
        "{:<8}  {:<9}  {:>8}  {:>8}  {:>10}  {:>10}",
        "goal", "kind", "accepted", "rejected", "edit ratio", "similarity"
    );
    for scenario in &plan.scenarios {
        for kind in &scenario.kinds {
            let config = ragpoison_core::AttackConfig {
                kind: *kind,
                goal: scenario.targets.goal,
                ..plan.attack
            };
            let outcome = poison_catalog(&catalog, &scenario.targets, &config, &deps);
            let run_dir = dir.join(config.goal.as_str()).join(kind.as_str());
            write_jsonl(&run_dir.join("rewrites.jsonl"), &outcome.records)?;
            if !outcome.failures.is_empty() {
                write_jsonl(&run_dir.join("failures.jsonl"), &outcome.failures)?;
            }
            let accepted = outcome.accepted().count();
            println!(
                "{:<8}  {:<9}  {:>8}  {:>8}  {:>10}  {:>10}",
                config.goal.as_str(),
                kind.as_str(),
                accepted,
                outcome.records.len() - accepted,
                fmt_opt(mean(&outcome.records, |r| r.verdict.edit_ratio)),
                fmt_opt(mean(&outcome.records, |r| r.verdict.similarity)),
            );
            failures.extend(
                outcome
                    .failures
                    .iter()
                    .map(|f| format!("{}/{}/{}: {}", config.goal, kind.as_str(), f.item_id, f.error)),
            );
            all.extend(outcome.records);
        }
    }
    write_jsonl(&dir.join("rewrites.jsonl"), &all)?;
    if !failures.is_empty() {
        bail!("{} targets failed: {}", failures.len(), failures.join("; "));
    }
    Ok(())
}

/// Never called: dry runs only render prompts.
struct NoCalls;

impl RewriteClient for NoCalls {
    fn client_id(&self) -> &str {
        "dry-run"
    }

    fn complete(&self, _request: &CompletionRequest) -> Result<String, ClientError> {
        Err(ClientError::Config("dry run makes no completion calls".into()))
    }
}

fn dry_run(ctx: &Session<'_>) -> Result<()> {
    let (catalog, _, _) = ctx.corpus()?;
    let segments = ctx.segments(&catalog)?;
    let plan = ctx.plan(&catalog, &segments)?;
    // Neighbor selection still needs item embeddings; a remote embedder
    // may only answer from the cache here.
    let backends = ctx.backends(true)?;
    let dir = ctx.output_dir("prompts")?;
    let index = VectorIndex::build(&catalog, backends.embedder.as_ref())
        .context("building the index from cache failed; run `segment` online first")?;
    let deps = AttackDeps {
        client: &NoCalls,
        embedder: backends.embedder.as_ref(),
        catalog: &catalog,
        segments: &segments,
        index: &index,
    };
    let mut written = 0;
    for scenario in &plan.scenarios {
        for kind in &scenario.kinds {
            let config = ragpoison_core::AttackConfig {
                kind: *kind,
                goal: scenario.targets.goal,
                ..plan.attack
            };
            let run_dir = dir.join(config.goal.as_str()).join(kind.as_str());
            fs::create_dir_all(&run_dir)?;
            for id in &scenario.targets.item_ids {
                let item = catalog.get(id).expect("targets come from the catalog");
                let neighbor_ids = neighbors_for(id, &config, &deps)?;
                let neighbors: Vec<_> = neighbor_ids.iter().filter_map(|n| catalog.get(n)).collect();
                let attempt = AttemptContext {
                    attempt: 1,
                    ..AttemptContext::default()
                };
                let request = attack_request(item, &config, &neighbors, &attempt)?;
                fs::write(run_dir.join(format!("{id}.txt")), request.prompt)?;
                written += 1;
            }
        }
    }
    println!("rendered {written} prompts under {}", dir.display());
    Ok(())
}

fn run(ctx: &Session<'_>) -> Result<()> {
    let (catalog, log, _) = ctx.corpus()?;
    let segments = ctx.segments(&catalog)?;
    let plan = ctx.plan(&catalog, &segments)?;
    let backends = ctx.backends(ctx.global.offline)?;
    let (train, test) = temporal_split(&log, ctx.spec.split.train_fraction)?;
    let results_dir = ctx.output_dir("results")?;
    let report_dir = ctx.output_dir("report")?;
    let services = Services {
        embedder: backends.embedder.as_ref(),
        completion: backends.completion.as_ref(),
        request_parameters: &backends.parameters,
    };
    let data = ExperimentData {
        catalog: &catalog,
        train: &train,
        test: &test,
        segments: &segments,
    };
    let result = run_experiment(&data, &plan, &services, Some(&results_dir))
        .with_context(|| format!("run failed; completed stages are in {}", results_dir.display()))?;
    result.save(&results_dir)?;
    finish_report(&result, &report_dir)
}

fn report(ctx: &Session<'_>) -> Result<()> {
    let results_dir = ctx.spec.paths.workdir.join("results");
    if !results_dir.join("manifest.json").exists() {
        return Err(invalid(format!(
            "no saved run in {}; use `run` first",
            results_dir.display()
        )));
    }
    let result = ExperimentResult::load(&results_dir)?;
    // The report is a pure function of the saved run, so it is always
    // regenerated in place.
    let report_dir = ctx.spec.paths.workdir.join("report");
    fs::create_dir_all(&report_dir)?;
    finish_report(&result, &report_dir)
}

fn finish_report(result: &ExperimentResult, dir: &Path) -> Result<()> {
    let report = build_report(result);
    report.write(dir)?;
    print!("{}", report.table_text());
    Ok(())
}
