//! Items, interactions and the bookkeeping around them: CSV ingestion,
//! popularity segments, per-user temporal splits and target selection.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ITEM_COLUMNS: [&str; 3] = ["item_id", "title", "description"];
pub const INTERACTION_COLUMNS: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

/// Slack used when converting a fraction of a count into a whole number.
const FRACTION_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: missing column `{column}` in header")]
    MissingColumn { file: String, column: String },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("item `{0}` has an empty description")]
    EmptyDescription(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("{name} must be strictly between 0 and 1, got {value}")]
    Fraction { name: &'static str, value: f64 },
    #[error("requested {requested} targets but the {segment} segment has only {available} items")]
    TooManyTargets {
        requested: usize,
        available: usize,
        segment: Segment,
    },
    #[error("target count must be at least 1")]
    NoTargets,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub interaction_count: u64,
}

impl Item {
    pub fn new(item_id: &str, title: &str, description: &str) -> Self {
        Self {
            item_id: item_id.to_string(),
            title: title.to_string(),
            description: description.to_string(),
            interaction_count: 0,
        }
    }
}

/// Items keyed by id. Iteration is always in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    items: BTreeMap<String, Item>,
}

impl ItemCatalog {
    /// Rejects duplicate ids and blank descriptions.
    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for item in items {
            if item.description.trim().is_empty() {
                return Err(CorpusError::EmptyDescription(item.item_id));
            }
            if map.contains_key(&item.item_id) {
                return Err(CorpusError::DuplicateItem(item.item_id));
            }
            map.insert(item.item_id.clone(), item);
        }
        Ok(Self { items: map })
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Replaces one description. Returns false if the id is unknown.
    pub fn set_description(&mut self, item_id: &str, description: String) -> bool {
        match self.items.get_mut(item_id) {
            Some(item) => {
                item.description = description;
                true
            }
            None => false,
        }
    }

    /// Recomputes `interaction_count` from a log.
    pub fn count_interactions(&mut self, log: &InteractionLog) {
        for item in self.items.values_mut() {
            item.interaction_count = 0;
        }
        for row in log.iter() {
            if let Some(item) = self.items.get_mut(&row.item_id) {
                item.interaction_count += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    rows: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(rows: Vec<Interaction>) -> Self {
        Self { rows }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Interaction] {
        &self.rows
    }

    /// Rows grouped per user, users in ascending order, rows in log order.
    pub fn by_user(&self) -> BTreeMap<&str, Vec<&Interaction>> {
        let mut out: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
        for row in &self.rows {
            out.entry(row.user_id.as_str()).or_default().push(row);
        }
        out
    }

    pub fn for_user<'a>(&'a self, user_id: &'a str) -> impl Iterator<Item = &'a Interaction> + 'a {
        self.rows.iter().filter(move |r| r.user_id == user_id)
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.user_id.as_str()).collect()
    }
}

/// Why a CSV row was left out of the catalog or log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyDescription,
    DuplicateItemId,
    UnknownItem,
    InvalidRating,
    InvalidTimestamp,
    MalformedRow,
}

/// One line of the load report. `row_number` is the 1-based line in the
/// source file where the record starts (the header is line 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: RejectReason,
    pub row_number: u64,
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub file: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rejections: Vec<Rejection>,
}

impl LoadReport {
    pub fn to_jsonl(&self) -> Vec<u8> {
        crate::util::to_jsonl(&self.rejections).expect("rejections serialise")
    }

    pub fn ids_for(&self, reason: RejectReason) -> Vec<&str> {
        self.rejections
            .iter()
            .filter(|r| r.reason == reason)
            .map(|r| r.id.as_str())
            .collect()
    }
}

fn column_positions(headers: &csv::StringRecord, required: &[&str], file: &str) -> Result<Vec<usize>, CorpusError> {
    required
        .iter()
        .map(|col| {
            headers
                .iter()
                .position(|h| h.trim().trim_start_matches('\u{feff}') == *col)
                .ok_or_else(|| CorpusError::MissingColumn {
                    file: file.to_string(),
                    column: col.to_string(),
                })
        })
        .collect()
}

/// Parses an items CSV. Rows with empty descriptions or repeated ids are
/// skipped and reported.
pub fn read_items<R: std::io::Read>(
    reader: R,
    file: &str,
    report: &mut LoadReport,
) -> Result<ItemCatalog, CorpusError> {
    let csv_err = |source| CorpusError::Csv {
        file: file.to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = column_positions(&headers, &ITEM_COLUMNS, file)?;
    let mut items = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(cols[i]);
        let (Some(id), Some(title), Some(desc)) = (field(0), field(1), field(2)) else {
            report.rejections.push(Rejection {
                reason: RejectReason::MalformedRow,
                row_number: line,
                id: field(0).unwrap_or_default().to_string(),
                file: Some(file.to_string()),
            });
            continue;
        };
        let reject = |reason| Rejection {
            reason,
            row_number: line,
            id: id.to_string(),
            file: Some(file.to_string()),
        };
        if desc.trim().is_empty() {
            report.rejections.push(reject(RejectReason::EmptyDescription));
            continue;
        }
        if items.contains_key(id) {
            report.rejections.push(reject(RejectReason::DuplicateItemId));
            continue;
        }
        items.insert(id.to_string(), Item::new(id, title, desc));
    }
    Ok(ItemCatalog { items })
}

/// Parses an interactions CSV against a catalog. Unknown items and
/// out-of-range values are skipped and reported.
pub fn read_interactions<R: std::io::Read>(
    reader: R,
    file: &str,
    catalog: &ItemCatalog,
    report: &mut LoadReport,
) -> Result<InteractionLog, CorpusError> {
    let csv_err = |source| CorpusError::Csv {
        file: file.to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = column_positions(&headers, &INTERACTION_COLUMNS, file)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(cols[i]).map(str::trim);
        let item_id = field(1).unwrap_or_default();
        let reject = |reason, id: &str| Rejection {
            reason,
            row_number: line,
            id: id.to_string(),
            file: Some(file.to_string()),
        };
        let (Some(user_id), Some(_), Some(rating), Some(ts)) = (field(0), field(1), field(2), field(3)) else {
            report.rejections.push(reject(RejectReason::MalformedRow, item_id));
            continue;
        };
        if !catalog.contains(item_id) {
            report.rejections.push(reject(RejectReason::UnknownItem, item_id));
            continue;
        }
        let rating = match rating.parse::<f64>() {
            Ok(r) if (0.5..=5.0).contains(&r) => r,
            _ => {
                report.rejections.push(reject(RejectReason::InvalidRating, item_id));
                continue;
            }
        };
        let timestamp = match ts.parse::<i64>() {
            Ok(t) if t >= 0 => t,
            _ => {
                report.rejections.push(reject(RejectReason::InvalidTimestamp, item_id));
                continue;
            }
        };
        rows.push(Interaction {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            rating,
            timestamp,
        });
    }
    Ok(InteractionLog { rows })
}

/// Loads both CSV files, fills interaction counts and returns the load
/// report alongside.
pub fn ingest_corpus(
    items_path: &Path,
    interactions_path: &Path,
) -> Result<(ItemCatalog, InteractionLog, LoadReport), CorpusError> {
    let open = |p: &Path| {
        std::fs::File::open(p).map_err(|e| CorpusError::Csv {
            file: p.display().to_string(),
            source: csv::Error::from(e),
        })
    };
    let mut report = LoadReport::default();
    let items_name = items_path.display().to_string();
    let inter_name = interactions_path.display().to_string();
    let mut catalog = read_items(open(items_path)?, &items_name, &mut report)?;
    let log = read_interactions(open(interactions_path)?, &inter_name, &catalog, &mut report)?;
    catalog.count_interactions(&log);
    Ok((catalog, log, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    ShortHead,
    LongTail,
}

impl Segment {
    pub fn opposite(self) -> Self {
        match self {
            Segment::ShortHead => Segment::LongTail,
            Segment::LongTail => Segment::ShortHead,
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::ShortHead => "short-head",
            Segment::LongTail => "long-tail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub head_fraction: f64,
    pub labels: BTreeMap<String, Segment>,
}

impl SegmentMap {
    pub fn get(&self, item_id: &str) -> Option<Segment> {
        self.labels.get(item_id).copied()
    }

    /// Ids of one segment, ascending.
    pub fn members(&self, segment: Segment) -> Vec<&str> {
        self.labels
            .iter()
            .filter(|(_, s)| **s == segment)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.labels.values().filter(|s| **s == segment).count()
    }
}

/// Labels the `ceil(head_fraction * |catalog|)` most-interacted items as
/// short-head. Equal counts are ordered by ascending id.
pub fn segment_by_popularity(catalog: &ItemCatalog, head_fraction: f64) -> Result<SegmentMap, CorpusError> {
    check_fraction("head_fraction", head_fraction)?;
    if catalog.is_empty() {
        return Err(CorpusError::EmptyCatalog);
    }
    let mut ranked: Vec<&Item> = catalog.items().collect();
    ranked.sort_by(|a, b| {
        b.interaction_count
            .cmp(&a.interaction_count)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    let head = head_size(head_fraction, ranked.len());
    let labels = ranked
        .iter()
        .enumerate()
        .map(|(rank, item)| {
            let seg = if rank < head {
                Segment::ShortHead
            } else {
                Segment::LongTail
            };
            (item.item_id.clone(), seg)
        })
        .collect();
    Ok(SegmentMap { head_fraction, labels })
}

fn head_size(head_fraction: f64, n: usize) -> usize {
    ((head_fraction * n as f64 - FRACTION_EPSILON).ceil().max(0.0) as usize).min(n)
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), CorpusError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(CorpusError::Fraction { name, value })
    }
}

/// Per-user chronological split. For a user with `m >= 2` interactions the
/// first `floor(train_fraction * m)` go to train; users with fewer than two
/// interactions are train-only. Both outputs are ordered by user, then time,
/// then item id.
pub fn temporal_split(
    log: &InteractionLog,
    train_fraction: f64,
) -> Result<(InteractionLog, InteractionLog), CorpusError> {
    check_fraction("train_fraction", train_fraction)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut rows) in log.by_user() {
        rows.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
        let m = rows.len();
        let cut = if m < 2 {
            m
        } else {
            ((train_fraction * m as f64 + FRACTION_EPSILON).floor() as usize).min(m)
        };
        train.extend(rows[..cut].iter().map(|r| (*r).clone()));
        test.extend(rows[cut..].iter().map(|r| (*r).clone()));
    }
    Ok((InteractionLog::new(train), InteractionLog::new(test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Promote,
    Demote,
}

impl Goal {
    /// Segment targets are drawn from.
    pub fn eligible_segment(self) -> Segment {
        match self {
            Goal::Promote => Segment::LongTail,
            Goal::Demote => Segment::ShortHead,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Goal::Promote => "promote",
            Goal::Demote => "demote",
        }
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub goal: Goal,
    pub item_ids: BTreeSet<String>,
    pub seed: u64,
}

impl TargetSet {
    /// The identity attack: no items are touched.
    pub fn none(goal: Goal, seed: u64) -> Self {
        Self {
            goal,
            item_ids: BTreeSet::new(),
            seed,
        }
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.item_ids.contains(item_id)
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }
}

/// Uniform sample without replacement from the goal's eligible segment,
/// driven by a ChaCha8 generator seeded with `seed`.
pub fn select_targets(
    catalog: &ItemCatalog,
    segments: &SegmentMap,
    goal: Goal,
    count: usize,
    seed: u64,
) -> Result<TargetSet, CorpusError> {
    if count == 0 {
        return Err(CorpusError::NoTargets);
    }
    let segment = goal.eligible_segment();
    let eligible: Vec<&str> = segments
        .members(segment)
        .into_iter()
        .filter(|id| catalog.contains(id))
        .collect();
    if count > eligible.len() {
        return Err(CorpusError::TooManyTargets {
            requested: count,
            available: eligible.len(),
            segment,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), count);
    Ok(TargetSet {
        goal,
        item_ids: picked.into_iter().map(|i| eligible[i].to_string()).collect(),
        seed,
    })
}

/// Interaction count per item, for reports.
pub fn popularity(catalog: &ItemCatalog) -> HashMap<&str, u64> {
    catalog
        .items()
        .map(|i| (i.item_id.as_str(), i.interaction_count))
        .collect()
}
