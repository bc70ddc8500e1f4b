//! Ranking metrics and the side-by-side attack report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackKind;
use crate::corpus::{Goal, TargetSet};
use crate::pipeline::{ExperimentResult, RankedList, Stage, StageLists};
use crate::profiles::ProfileMethod;
use crate::util::write_atomic;

/// Placeholder for a cell with no data.
pub const MISSING: &str = "—";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("user sets differ: {only_before} user(s) only in baseline, {only_after} only in attacked")]
    UserMismatch { only_before: usize, only_after: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `|top-k ∩ relevant| / |relevant|`; 0 when nothing is relevant or `k == 0`.
pub fn recall_at_k<S: AsRef<str>>(list: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let hits: BTreeSet<&str> = list
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(|id| relevant.contains(*id))
        .collect();
    hits.len() as f64 / relevant.len() as f64
}

/// Binary-relevance nDCG with a `log2(position + 1)` discount over 1-based
/// positions. A relevant item counts once, at its first position.
pub fn ndcg_at_k<S: AsRef<str>>(list: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut dcg = 0.0;
    for (i, id) in list.iter().take(k).enumerate() {
        let id = id.as_ref();
        if relevant.contains(id) && seen.insert(id) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / ideal
}

/// Mean 1-based rank of targets over the (user, target) pairs where the
/// target is listed. `mean` is `None` when no pair is covered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRank {
    pub mean: Option<f64>,
    /// Pairs that contributed to the mean.
    pub coverage: usize,
    /// Users × targets.
    pub pairs: usize,
}

pub fn mean_target_rank(lists: &[RankedList], targets: &TargetSet) -> TargetRank {
    let mut sum = 0u64;
    let mut coverage = 0usize;
    for list in lists {
        for (pos, entry) in list.entries.iter().enumerate() {
            if targets.contains(&entry.item_id) {
                sum += pos as u64 + 1;
                coverage += 1;
            }
        }
    }
    TargetRank {
        mean: (coverage > 0).then(|| sum as f64 / coverage as f64),
        coverage,
        pairs: lists.len() * targets.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemExposure {
    pub item_id: String,
    pub before: u64,
    pub after: u64,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub k: usize,
    pub items: Vec<ItemExposure>,
    pub total_delta: i64,
}

fn exposure_counts<'a>(lists: &'a [RankedList], targets: &TargetSet, k: usize) -> HashMap<&'a str, u64> {
    let mut counts = HashMap::new();
    for list in lists {
        let top: BTreeSet<&str> = list.entries.iter().take(k).map(|e| e.item_id.as_str()).collect();
        for id in top.into_iter().filter(|id| targets.contains(id)) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-target count of users whose top-`k` contains it, before and after.
pub fn exposure_delta(
    before: &[RankedList],
    after: &[RankedList],
    targets: &TargetSet,
    k: usize,
) -> Result<ExposureReport, EvalError> {
    let users_before: BTreeSet<&str> = before.iter().map(|l| l.user_id.as_str()).collect();
    let users_after: BTreeSet<&str> = after.iter().map(|l| l.user_id.as_str()).collect();
    if users_before != users_after {
        return Err(EvalError::UserMismatch {
            only_before: users_before.difference(&users_after).count(),
            only_after: users_after.difference(&users_before).count(),
        });
    }
    let b = exposure_counts(before, targets, k);
    let a = exposure_counts(after, targets, k);
    let items: Vec<ItemExposure> = targets
        .item_ids
        .iter()
        .map(|id| {
            let before = b.get(id.as_str()).copied().unwrap_or(0);
            let after = a.get(id.as_str()).copied().unwrap_or(0);
            ItemExposure {
                item_id: id.clone(),
                before,
                after,
                delta: after as i64 - before as i64,
            }
        })
        .collect();
    let total_delta = items.iter().map(|i| i.delta).sum();
    Ok(ExposureReport { k, items, total_delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStage {
    Retrieval,
    RecLlmProfile,
    RecManualProfile,
}

impl ReportStage {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportStage::Retrieval => "retrieval",
            ReportStage::RecLlmProfile => "rec_llm_profile",
            ReportStage::RecManualProfile => "rec_manual_profile",
        }
    }

    fn label(self) -> &'static str {
        match self {
            ReportStage::Retrieval => "(A) Retrieval",
            ReportStage::RecLlmProfile => "(B) Rec. (LLM)",
            ReportStage::RecManualProfile => "(C) Rec. (Manual)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Emotional,
    Neighborhood,
    Chain,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Emotional => "emotional",
            Variant::Neighborhood => "neighborhood",
            Variant::Chain => "chain",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Variant::Original => "Original",
            Variant::Emotional => "Emotional",
            Variant::Neighborhood => "Neighborhood",
            Variant::Chain => "Chain",
        }
    }
}

impl From<AttackKind> for Variant {
    fn from(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Emotional => Variant::Emotional,
            AttackKind::Neighbor => Variant::Neighborhood,
            AttackKind::Chain => Variant::Chain,
        }
    }
}

const VARIANTS: [Variant; 4] = [
    Variant::Original,
    Variant::Emotional,
    Variant::Neighborhood,
    Variant::Chain,
];
const STAGES: [ReportStage; 3] = [
    ReportStage::Retrieval,
    ReportStage::RecLlmProfile,
    ReportStage::RecManualProfile,
];

/// One table row. `None` means the run did not produce that cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: Goal,
    pub stage: ReportStage,
    pub variant: Variant,
    pub mean_target_rank: Option<f64>,
    pub target_coverage: usize,
    pub target_pairs: usize,
    pub recall_at_k: Option<f64>,
    pub ndcg_at_k: Option<f64>,
}

impl MetricRow {
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.scenario, self.stage.as_str(), self.variant.as_str())
    }
}

/// Mean Recall@k and nDCG@k over users with a non-empty relevant set.
pub fn system_metrics(lists: &[RankedList], relevant: &BTreeMap<String, BTreeSet<String>>, k: usize) -> (f64, f64) {
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    let mut n = 0usize;
    for list in lists {
        let Some(rel) = relevant.get(&list.user_id).filter(|r| !r.is_empty()) else {
            continue;
        };
        let ids = list.ids();
        recall += recall_at_k(&ids, rel, k);
        ndcg += ndcg_at_k(&ids, rel, k);
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (recall / n as f64, ndcg / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureEntry {
    pub scenario: Goal,
    pub variant: Variant,
    pub profile: ProfileMethod,
    pub report: ExposureReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSummary {
    pub scenario: Goal,
    pub variant: Variant,
    pub targets: usize,
    pub accepted: usize,
    pub mean_edit_ratio: Option<f64>,
    pub mean_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub embedding_provider: String,
    pub completion_client: String,
    pub k: usize,
    pub n_retrieval: usize,
    /// Rows keyed `scenario/stage/variant`.
    pub metrics: BTreeMap<String, MetricRow>,
    pub exposure: Vec<ExposureEntry>,
    pub rewrites: Vec<RewriteSummary>,
    pub warnings: Vec<String>,
}

fn stage_lists(
    lists: &BTreeMap<ProfileMethod, StageLists>,
    stage: ReportStage,
    retrieval_method: ProfileMethod,
) -> Option<&[RankedList]> {
    match stage {
        ReportStage::Retrieval => lists.get(&retrieval_method).map(|l| l.stage(Stage::Retrieval)),
        ReportStage::RecLlmProfile => lists
            .get(&ProfileMethod::LlmSummarized)
            .map(|l| l.stage(Stage::Recommendation)),
        ReportStage::RecManualProfile => lists
            .get(&ProfileMethod::Manual)
            .map(|l| l.stage(Stage::Recommendation)),
    }
}

/// Builds every Table-1 row the result has data for; rows without data are
/// reported as warnings and rendered as [`MISSING`].
pub fn build_report(result: &ExperimentResult) -> Report {
    let k = result.pipeline.k_rec;
    let retrieval_method = result.pipeline.retrieval_method();
    let mut metrics = BTreeMap::new();
    let mut exposure = Vec::new();
    let mut rewrites = Vec::new();
    let mut warnings = Vec::new();
    for (goal, targets) in &result.targets {
        for variant in VARIANTS {
            let lists = match variant {
                Variant::Original => Some(&result.baseline),
                _ => result
                    .attacked
                    .iter()
                    .find(|r| r.goal == *goal && Variant::from(r.kind) == variant)
                    .map(|r| &r.lists),
            };
            let Some(lists) = lists else {
                continue;
            };
            for stage in STAGES {
                let Some(stage_lists) = stage_lists(lists, stage, retrieval_method) else {
                    continue;
                };
                if stage_lists.is_empty() && !result.users.is_empty() {
                    warnings.push(format!("{goal}/{}/{}: no lists", stage.as_str(), variant.as_str()));
                    continue;
                }
                let rank = mean_target_rank(stage_lists, targets);
                let (recall, ndcg) = system_metrics(stage_lists, &result.relevant, k);
                let row = MetricRow {
                    scenario: *goal,
                    stage,
                    variant,
                    mean_target_rank: rank.mean,
                    target_coverage: rank.coverage,
                    target_pairs: rank.pairs,
                    recall_at_k: Some(recall),
                    ndcg_at_k: Some(ndcg),
                };
                if rank.mean.is_none() && !targets.is_empty() {
                    warnings.push(format!("{}: no target appears in any list", row.key()));
                }
                metrics.insert(row.key(), row);
            }
        }
        for run in result.attacked.iter().filter(|r| r.goal == *goal) {
            for (method, lists) in &run.lists {
                if let Some(base) = result.baseline.get(method) {
                    if let Ok(report) = exposure_delta(&base.rec, &lists.rec, targets, k) {
                        exposure.push(ExposureEntry {
                            scenario: *goal,
                            variant: run.kind.into(),
                            profile: *method,
                            report,
                        });
                    }
                }
            }
            let accepted: Vec<_> = run.records.iter().filter(|r| r.accepted).collect();
            let mean = |f: &dyn Fn(&crate::attacks::RewriteRecord) -> f64| {
                (!accepted.is_empty()).then(|| accepted.iter().map(|r| f(r)).sum::<f64>() / accepted.len() as f64)
            };
            rewrites.push(RewriteSummary {
                scenario: *goal,
                variant: run.kind.into(),
                targets: run.records.len(),
                accepted: accepted.len(),
                mean_edit_ratio: mean(&|r| r.verdict.edit_ratio),
                mean_similarity: mean(&|r| r.verdict.similarity),
            });
        }
    }
    Report {
        run_id: result.run_id.clone(),
        embedding_provider: result.meta.embedding_provider.clone(),
        completion_client: result.meta.completion_client.clone(),
        k,
        n_retrieval: result.pipeline.n_retrieval,
        metrics,
        exposure,
        rewrites,
        warnings,
    }
}

pub fn format_rank(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.2}"))
}

pub fn format_metric(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.4}"))
}

struct Table {
    rows: Vec<Vec<String>>,
}

impl Table {
    fn render(&self, out: &mut String) {
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .filter_map(|r| r.get(c))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        for row in &self.rows {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                let pad = widths[c] - cell.chars().count();
                if c < 2 {
                    line.push_str(cell);
                    line.push_str(&" ".repeat(pad));
                } else {
                    line.push_str(&" ".repeat(pad));
                    line.push_str(cell);
                }
                if c + 1 < row.len() {
                    line.push_str("  ");
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
    }
}

impl Report {
    pub fn row(&self, scenario: Goal, stage: ReportStage, variant: Variant) -> Option<&MetricRow> {
        self.metrics
            .get(&format!("{scenario}/{}/{}", stage.as_str(), variant.as_str()))
    }

    pub fn metrics_json(&self) -> Result<Vec<u8>, EvalError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Plain-text table: one block per scenario, one group per stage, one
    /// row per variant (Original first).
    pub fn table_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "run {}  provider {}  completion {}",
            self.run_id, self.embedding_provider, self.completion_client
        );
        let _ = writeln!(
            out,
            "Rank = mean 1-based target rank (lower = stronger promotion); Recall/nDCG @{}",
            self.k
        );
        let scenarios: BTreeSet<Goal> = self.metrics.values().map(|r| r.scenario).collect();
        for scenario in scenarios {
            let title = match scenario {
                Goal::Promote => "Promotion Scenario",
                Goal::Demote => "Demotion Scenario",
            };
            let _ = writeln!(out, "\n{title}");
            let header = [
                "Stage",
                "Variant",
                "Rank",
                "Coverage",
                &format!("Recall@{}", self.k),
                &format!("nDCG@{}", self.k),
            ];
            let mut table = Table {
                rows: vec![header.iter().map(|s| s.to_string()).collect()],
            };
            for stage in STAGES {
                let present = self
                    .metrics
                    .values()
                    .any(|r| r.scenario == scenario && r.stage == stage);
                if !present {
                    continue;
                }
                let variants: BTreeSet<Variant> = self
                    .metrics
                    .values()
                    .filter(|r| r.scenario == scenario)
                    .map(|r| r.variant)
                    .collect();
                for (i, variant) in variants.into_iter().enumerate() {
                    let label = if i == 0 { stage.label() } else { "" };
                    let row = self.row(scenario, stage, variant);
                    table.rows.push(vec![
                        label.to_string(),
                        variant.label().to_string(),
                        format_rank(row.and_then(|r| r.mean_target_rank)),
                        row.map_or_else(
                            || MISSING.to_string(),
                            |r| format!("{}/{}", r.target_coverage, r.target_pairs),
                        ),
                        format_metric(row.and_then(|r| r.recall_at_k)),
                        format_metric(row.and_then(|r| r.ndcg_at_k)),
                    ]);
                }
            }
            table.render(&mut out);
        }
        if !self.exposure.is_empty() {
            let _ = writeln!(
                out,
                "\nExposure delta (top-{} recommendations, summed over targets)",
                self.k
            );
            let mut table = Table {
                rows: vec![vec![
                    "Scenario".into(),
                    "Variant".into(),
                    "Profile".into(),
                    "Delta".into(),
                ]],
            };
            for e in &self.exposure {
                table.rows.push(vec![
                    e.scenario.to_string(),
                    e.variant.label().to_string(),
                    e.profile.to_string(),
                    format!("{:+}", e.report.total_delta),
                ]);
            }
            table.render(&mut out);
        }
        if !self.rewrites.is_empty() {
            let _ = writeln!(out, "\nRewrites");
            let mut table = Table {
                rows: vec![vec![
                    "Scenario".into(),
                    "Variant".into(),
                    "Accepted".into(),
                    "Edit ratio".into(),
                    "Similarity".into(),
                ]],
            };
            for r in &self.rewrites {
                table.rows.push(vec![
                    r.scenario.to_string(),
                    r.variant.label().to_string(),
                    format!("{}/{}", r.accepted, r.targets),
                    format_metric(r.mean_edit_ratio),
                    format_metric(r.mean_similarity),
                ]);
            }
            table.render(&mut out);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// One bar chart per metric and scenario, bars grouped by stage.
    pub fn charts(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let scenarios: BTreeSet<Goal> = self.metrics.values().map(|r| r.scenario).collect();
        type Getter = fn(&MetricRow) -> Option<f64>;
        let metrics: [(&str, Getter); 3] = [
            ("rank", |r| r.mean_target_rank),
            ("recall", |r| r.recall_at_k),
            ("ndcg", |r| r.ndcg_at_k),
        ];
        for scenario in scenarios {
            for (name, get) in metrics {
                let bars: Vec<(String, Option<f64>)> = STAGES
                    .iter()
                    .flat_map(|stage| VARIANTS.iter().map(move |v| (*stage, *v)))
                    .filter_map(|(stage, variant)| {
                        self.row(scenario, stage, variant)
                            .map(|r| (format!("{} {}", stage.as_str(), variant.as_str()), get(r)))
                    })
                    .collect();
                if bars.is_empty() {
                    continue;
                }
                out.push((
                    format!("{scenario}_{name}.svg"),
                    bar_chart(&format!("{scenario}: {name}"), &bars),
                ));
            }
        }
        out
    }

    /// Writes `metrics.json`, `table.txt` and `charts/*.svg` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        write_atomic(&dir.join("metrics.json"), &self.metrics_json()?)?;
        write_atomic(&dir.join("table.txt"), self.table_text().as_bytes())?;
        for (name, svg) in self.charts() {
            write_atomic(&dir.join("charts").join(name), svg.as_bytes())?;
        }
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table_text())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let bar_h = 18;
    let gap = 6;
    let label_w = 260;
    let plot_w = 360;
    let height = 40 + bars.len() * (bar_h + gap);
    let max = bars
        .iter()
        .filter_map(|(_, v)| *v)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="monospace" font-size="12">"#,
        label_w + plot_w + 80
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="18" font-weight="bold">{}</text>"#,
        xml_escape(title)
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = 30 + i * (bar_h + gap);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, y + 13, xml_escape(label));
        match value {
            Some(v) => {
                let w = (v / max * plot_w as f64).round().max(1.0);
                let _ = writeln!(
                    svg,
                    r##"<rect x="{label_w}" y="{y}" width="{w}" height="{bar_h}" fill="#4a78a8"/>"##
                );
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{}">{v:.4}</text>"#,
                    label_w as f64 + w + 4.0,
                    y + 13
                );
            }
            None => {
                let _ = writeln!(svg, r#"<text x="{label_w}" y="{}">{MISSING}</text>"#, y + 13);
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
