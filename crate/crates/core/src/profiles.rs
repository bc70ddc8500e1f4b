//! User profile text that seeds retrieval.
//!
//! Two builders: a fixed manual template over the user's favourite training
//! items, and an LLM summary of the same items. Profiles never mention the
//! user's held-out titles; see [`redact_titles`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{CompletionRequest, RewriteClient, RewriteTask};
use crate::clients::ClientError;
use crate::corpus::{Interaction, InteractionLog, Item, ItemCatalog};
use crate::prompts::{render, Template};
use crate::util::derive_seed;

/// Version tag of the manual template below. Bump when the wording changes.
pub const MANUAL_TEMPLATE_VERSION: &str = "manual-v1";
/// Words of each favourite's description quoted in a manual profile.
pub const SNIPPET_WORDS: usize = 30;
pub const DEFAULT_TOP_M: usize = 10;
/// Replacement text for a held-out title found in a profile.
pub const WITHHELD: &str = "[withheld]";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("user `{0}` has no training interactions")]
    UnknownUser(String),
    #[error("user `{user_id}` rated item `{item_id}`, which is not in the catalog")]
    UnknownItem { user_id: String, item_id: String },
    #[error("top_m must be at least 1")]
    ZeroTopM,
    #[error("summarizing user `{user_id}` failed: {source}")]
    Client {
        user_id: String,
        #[source]
        source: ClientError,
    },
    #[error("summary for user `{0}` was empty")]
    EmptySummary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMethod {
    Manual,
    #[serde(rename = "llm")]
    LlmSummarized,
}

impl ProfileMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileMethod::Manual => "manual",
            ProfileMethod::LlmSummarized => "llm",
        }
    }
}

impl fmt::Display for ProfileMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub method: ProfileMethod,
    pub text: String,
    /// Training items the text was built from, in rank order.
    pub source_items: Vec<String>,
    /// True when an LLM profile was requested but the manual one was used.
    #[serde(default)]
    pub fell_back: bool,
}

/// The user's `top_m` favourite training items: highest rating first, then
/// most recent, then item id.
pub fn favourite_items<'a>(
    user_id: &str,
    train_log: &InteractionLog,
    catalog: &'a ItemCatalog,
    top_m: usize,
) -> Result<Vec<&'a Item>, ProfileError> {
    if top_m == 0 {
        return Err(ProfileError::ZeroTopM);
    }
    let mut rows: Vec<&Interaction> = train_log.for_user(user_id).collect();
    if rows.is_empty() {
        return Err(ProfileError::UnknownUser(user_id.to_string()));
    }
    rows.sort_by(|a, b| {
        b.rating
            .total_cmp(&a.rating)
            .then(b.timestamp.cmp(&a.timestamp))
            .then(a.item_id.cmp(&b.item_id))
    });
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in rows {
        if !seen.insert(row.item_id.as_str()) {
            continue;
        }
        let item = catalog.get(&row.item_id).ok_or_else(|| ProfileError::UnknownItem {
            user_id: user_id.to_string(),
            item_id: row.item_id.clone(),
        })?;
        out.push(item);
        if out.len() == top_m {
            break;
        }
    }
    Ok(out)
}

fn snippet(text: &str) -> String {
    text.split_whitespace()
        .take(SNIPPET_WORDS)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `User enjoys: A; B. Descriptions of favorites: <a> | <b>`
pub fn build_manual_profile(
    user_id: &str,
    train_log: &InteractionLog,
    catalog: &ItemCatalog,
    top_m: usize,
) -> Result<UserProfile, ProfileError> {
    let items = favourite_items(user_id, train_log, catalog, top_m)?;
    let titles: Vec<&str> = items.iter().map(|i| i.title.as_str()).collect();
    let snippets: Vec<String> = items.iter().map(|i| snippet(&i.description)).collect();
    let text = format!(
        "User enjoys: {}. Descriptions of favorites: {}",
        titles.join("; "),
        snippets.join(" | ")
    );
    Ok(UserProfile {
        user_id: user_id.to_string(),
        method: ProfileMethod::Manual,
        text,
        source_items: items.iter().map(|i| i.item_id.clone()).collect(),
        fell_back: false,
    })
}

/// The summarization request for a user, also used by `--dry-run`.
pub fn summary_request(
    user_id: &str,
    train_log: &InteractionLog,
    catalog: &ItemCatalog,
    top_m: usize,
    seed: u64,
) -> Result<(CompletionRequest, Vec<String>), ProfileError> {
    let items = favourite_items(user_id, train_log, catalog, top_m)?;
    let pairs = items
        .iter()
        .map(|i| format!("{}: {}", i.title, i.description))
        .collect::<Vec<_>>()
        .join("\n");
    let request = CompletionRequest {
        prompt: render(Template::ProfileSummarize.text(), &[("pairs", &pairs)]),
        task: RewriteTask::Summarize {
            titles: items.iter().map(|i| i.title.clone()).collect(),
        },
        seed: derive_seed(seed, user_id, 0),
    };
    Ok((request, items.iter().map(|i| i.item_id.clone()).collect()))
}

pub fn build_llm_profile(
    user_id: &str,
    train_log: &InteractionLog,
    catalog: &ItemCatalog,
    top_m: usize,
    client: &dyn RewriteClient,
    seed: u64,
) -> Result<UserProfile, ProfileError> {
    let (request, source_items) = summary_request(user_id, train_log, catalog, top_m, seed)?;
    let text = client
        .complete(&request)
        .map_err(|source| ProfileError::Client {
            user_id: user_id.to_string(),
            source,
        })?
        .trim()
        .to_string();
    if text.is_empty() {
        return Err(ProfileError::EmptySummary(user_id.to_string()));
    }
    Ok(UserProfile {
        user_id: user_id.to_string(),
        method: ProfileMethod::LlmSummarized,
        text,
        source_items,
        fell_back: false,
    })
}

/// Replaces every whole-word, case-insensitive occurrence of each title with
/// [`WITHHELD`]. Longer titles are matched first so a title that contains
/// another is removed whole.
pub fn redact_titles(text: &str, titles: &[&str]) -> String {
    let mut titles: Vec<&str> = titles.iter().copied().filter(|t| !t.trim().is_empty()).collect();
    titles.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    titles.dedup();
    let mut out = text.to_string();
    for title in titles {
        let title = title.trim();
        let edge = |c: Option<char>| {
            if c.is_some_and(char::is_alphanumeric) {
                r"\b"
            } else {
                ""
            }
        };
        let pattern = format!(
            "{}{}{}",
            edge(title.chars().next()),
            regex::escape(title),
            edge(title.chars().last())
        );
        let re = RegexBuilder::new(&pattern)
            .case_insensitive(true)
            .build()
            .expect("escaped literal is a valid pattern");
        out = re.replace_all(&out, WITHHELD).into_owned();
    }
    out
}

/// Options for [`build_profiles`].
#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    pub top_m: usize,
    /// Use the manual profile when the LLM summary fails, marking it
    /// `fell_back`. When false the failure is an error.
    pub fallback_to_manual: bool,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            top_m: DEFAULT_TOP_M,
            fallback_to_manual: false,
            seed: 0,
        }
    }
}

/// Builds one profile per user with `method`, in parallel, then redacts each
/// user's held-out titles. The result is keyed and ordered by user id.
pub fn build_profiles(
    users: &[&str],
    method: ProfileMethod,
    train_log: &InteractionLog,
    test_log: &InteractionLog,
    catalog: &ItemCatalog,
    client: Option<&dyn RewriteClient>,
    options: &ProfileOptions,
) -> Result<BTreeMap<String, UserProfile>, ProfileError> {
    let built: Vec<UserProfile> = users
        .par_iter()
        .map(|user| {
            let mut profile = match (method, client) {
                (ProfileMethod::Manual, _) => build_manual_profile(user, train_log, catalog, options.top_m)?,
                (ProfileMethod::LlmSummarized, Some(client)) => {
                    match build_llm_profile(user, train_log, catalog, options.top_m, client, options.seed) {
                        Ok(p) => p,
                        Err(e) if options.fallback_to_manual => {
                            tracing::warn!(user, error = %e, "LLM profile failed; using manual profile");
                            let mut p = build_manual_profile(user, train_log, catalog, options.top_m)?;
                            p.method = ProfileMethod::LlmSummarized;
                            p.fell_back = true;
                            p
                        }
                        Err(e) => return Err(e),
                    }
                }
                (ProfileMethod::LlmSummarized, None) => {
                    return Err(ProfileError::Client {
                        user_id: user.to_string(),
                        source: ClientError::Config("no completion client configured".into()),
                    })
                }
            };
            let held_out: Vec<&str> = test_log
                .for_user(user)
                .filter_map(|r| catalog.get(&r.item_id))
                .map(|i| i.title.as_str())
                .collect();
            profile.text = redact_titles(&profile.text, &held_out);
            Ok(profile)
        })
        .collect::<Result<_, _>>()?;
    Ok(built.into_iter().map(|p| (p.user_id.clone(), p)).collect())
}
