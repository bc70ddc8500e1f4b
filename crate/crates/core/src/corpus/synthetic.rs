//! Seeded synthetic movie corpus for desk-scale experiments.
//!
//! Items get a genre, a Zipf popularity weight and a description built from
//! genre vocabulary, shared filler and a few sentiment words. Popular items
//! lean on the positive sentiment list and unpopular ones on the negative
//! list, so emotive wording carries a popularity signal the way it does in
//! real catalog blurbs. Users favour one or two genres and sample items in
//! proportion to popularity times genre affinity; ratings also rise with an
//! item's net positive wording, so acclaimed items end up among favourites.

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog, Item, ItemCatalog};
use crate::attacks::lexicon::{DEMOTE_LEXICON, PROMOTE_LEXICON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub zipf_exponent: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub min_description_tokens: usize,
    pub max_description_tokens: usize,
    /// Weight multiplier for items in a user's favourite genres.
    pub genre_affinity: f64,
    /// Positions per description that may receive a sentiment word.
    pub sentiment_slots: usize,
    /// Rating shift per net positive sentiment word in the description.
    pub rating_per_sentiment_word: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_items: 300,
            n_users: 100,
            zipf_exponent: 1.1,
            min_interactions: 12,
            max_interactions: 40,
            min_description_tokens: 28,
            max_description_tokens: 40,
            genre_affinity: 3.0,
            sentiment_slots: 5,
            rating_per_sentiment_word: 0.6,
            seed: 2025,
        }
    }
}

struct Genre {
    name: &'static str,
    words: &'static [&'static str],
}

const GENRES: &[Genre] = &[
    Genre {
        name: "space",
        words: &[
            "galaxy",
            "starship",
            "orbit",
            "alien",
            "planet",
            "astronaut",
            "nebula",
            "cosmic",
            "station",
            "launch",
            "gravity",
            "comet",
            "rocket",
            "colony",
            "signal",
            "lunar",
            "solar",
            "meteor",
        ],
    },
    Genre {
        name: "crime",
        words: &[
            "detective",
            "heist",
            "gangster",
            "murder",
            "police",
            "alibi",
            "evidence",
            "smuggler",
            "mob",
            "witness",
            "corrupt",
            "undercover",
            "ransom",
            "bribe",
            "vault",
            "suspect",
            "precinct",
            "informant",
        ],
    },
    Genre {
        name: "romance",
        words: &[
            "love",
            "wedding",
            "heart",
            "kiss",
            "couple",
            "letters",
            "summer",
            "dance",
            "proposal",
            "longing",
            "bride",
            "sweetheart",
            "reunion",
            "romance",
            "passion",
            "promise",
            "devotion",
            "affair",
        ],
    },
    Genre {
        name: "horror",
        words: &[
            "haunted",
            "ghost",
            "curse",
            "ritual",
            "demon",
            "cellar",
            "shadow",
            "scream",
            "blood",
            "creature",
            "possessed",
            "graveyard",
            "witch",
            "nightmare",
            "asylum",
            "coffin",
            "undead",
            "crypt",
        ],
    },
    Genre {
        name: "comedy",
        words: &[
            "prank",
            "roommate",
            "slapstick",
            "party",
            "mishap",
            "awkward",
            "buddy",
            "jokes",
            "chaos",
            "neighbor",
            "boss",
            "holiday",
            "talent",
            "misfit",
            "bet",
            "disguise",
            "dinner",
            "blunder",
        ],
    },
    Genre {
        name: "fantasy",
        words: &[
            "dragon",
            "kingdom",
            "wizard",
            "sword",
            "quest",
            "elf",
            "prophecy",
            "castle",
            "spell",
            "throne",
            "knight",
            "enchanted",
            "realm",
            "sorcerer",
            "amulet",
            "giant",
            "oracle",
            "crown",
        ],
    },
];

const FILLER: &[&str] = &[
    "story",
    "follows",
    "young",
    "life",
    "world",
    "family",
    "journey",
    "discovers",
    "must",
    "city",
    "friends",
    "secret",
    "years",
    "finds",
    "past",
    "new",
    "two",
    "against",
    "time",
    "lives",
    "team",
    "old",
    "first",
    "help",
    "begins",
    "town",
    "together",
    "stranger",
    "night",
    "home",
    "brother",
    "sister",
    "mother",
    "father",
    "truth",
    "choice",
    "danger",
    "hope",
    "dream",
    "fate",
];

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "his", "her", "their", "with", "when", "who", "for", "on",
];

const TITLE_NOUNS: &[&str] = &[
    "Promise", "Road", "Hour", "Edge", "Return", "Legacy", "Winter", "Echo", "Horizon", "Gambit", "Letter", "Silence",
    "Harbor", "Storm", "Garden", "Mirror", "Crossing", "Signal", "Frontier", "Debt",
];

/// Generated items (with interaction counts filled in) and their log.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub catalog: ItemCatalog,
    pub log: InteractionLog,
    /// Genre index per item, parallel to the catalog's id order.
    pub genres: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_items;

        // Popularity ranks are shuffled so ids carry no popularity signal.
        let mut ranks: Vec<usize> = (1..=n).collect();
        ranks.shuffle(&mut rng);
        let weights: Vec<f64> = ranks.iter().map(|r| (*r as f64).powf(-spec.zipf_exponent)).collect();

        let mut titles = BTreeSet::new();
        let mut items = Vec::with_capacity(n);
        let mut genres = Vec::with_capacity(n);
        let mut tone = Vec::with_capacity(n);
        for (i, rank) in ranks.iter().enumerate() {
            let genre = rng.random_range(0..GENRES.len());
            // 0 for the most popular item, approaching 1 for the least.
            let quantile = (rank - 1) as f64 / n.max(2).saturating_sub(1) as f64;
            let title = unique_title(&mut rng, genre, &mut titles);
            let (description, t) = describe(&mut rng, spec, genre, quantile);
            tone.push(t);
            items.push(Item::new(&format!("i{i:03}"), &title, &description));
            genres.push(genre);
        }

        let mut rows = Vec::new();
        for u in 0..spec.n_users {
            let first = rng.random_range(0..GENRES.len());
            let mut favourites = vec![first];
            if rng.random_bool(0.5) {
                let second = rng.random_range(0..GENRES.len());
                if second != first {
                    favourites.push(second);
                }
            }
            let m = rng.random_range(spec.min_interactions..=spec.max_interactions).min(n);
            let picked = rand::seq::index::sample_weighted(
                &mut rng,
                n,
                |i| {
                    let affinity = if favourites.contains(&genres[i]) {
                        spec.genre_affinity
                    } else {
                        1.0
                    };
                    weights[i] * affinity
                },
                m,
            )
            .expect("weights are finite and positive");
            let mut picked: Vec<usize> = picked.into_iter().collect();
            picked.shuffle(&mut rng);
            let mut ts: i64 = 1_500_000_000 + rng.random_range(0..10_000_000);
            for i in picked {
                ts += rng.random_range(3_600..259_200);
                let liked = favourites.contains(&genres[i]);
                let raw: f64 = if liked {
                    3.5 + rng.random_range(0.0..1.5)
                } else {
                    1.5 + rng.random_range(0.0..2.5)
                };
                let raw = raw + spec.rating_per_sentiment_word * tone[i] as f64;
                let rating = ((raw * 2.0).round() / 2.0).clamp(0.5, 5.0);
                rows.push(Interaction {
                    user_id: format!("u{u:03}"),
                    item_id: items[i].item_id.clone(),
                    rating,
                    timestamp: ts,
                });
            }
        }

        let log = InteractionLog::new(rows);
        let mut catalog = ItemCatalog::from_items(items).expect("generated ids are unique");
        catalog.count_interactions(&log);
        Self { catalog, log, genres }
    }

    /// Writes `item_id,title,description` and
    /// `user_id,item_id,rating,timestamp` CSV files.
    pub fn write_csv(&self, items_path: &Path, interactions_path: &Path) -> io::Result<()> {
        let mut w = csv::Writer::from_path(items_path)?;
        w.write_record(super::ITEM_COLUMNS)?;
        for item in self.catalog.items() {
            w.write_record([&item.item_id, &item.title, &item.description])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(interactions_path)?;
        w.write_record(super::INTERACTION_COLUMNS)?;
        for r in self.log.iter() {
            w.write_record([
                r.user_id.clone(),
                r.item_id.clone(),
                format!("{:.1}", r.rating),
                r.timestamp.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn genre_name(index: usize) -> &'static str {
        GENRES[index].name
    }
}

fn unique_title(rng: &mut ChaCha8Rng, genre: usize, taken: &mut BTreeSet<String>) -> String {
    loop {
        let word = GENRES[genre].words.choose(rng).expect("non-empty");
        let noun = TITLE_NOUNS.choose(rng).expect("non-empty");
        let mut title = format!("{} {}", capitalize(word), noun);
        let mut n = 2;
        while taken.contains(&title) {
            title = format!("{} {} {}", capitalize(word), noun, roman(n));
            n += 1;
        }
        if taken.insert(title.clone()) {
            return title;
        }
    }
}

fn roman(n: usize) -> &'static str {
    const R: [&str; 9] = ["II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"];
    R[(n - 2).min(R.len() - 1)]
}

fn describe(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, genre: usize, quantile: f64) -> (String, i32) {
    let mut tone = 0;
    let len = rng.random_range(spec.min_description_tokens..=spec.max_description_tokens);
    let mut words: Vec<&str> = Vec::with_capacity(len);
    for _ in 0..len {
        let roll: f64 = rng.random();
        let pool = if roll < 0.35 {
            GENRES[genre].words
        } else if roll < 0.75 {
            FILLER
        } else {
            FUNCTION_WORDS
        };
        words.push(pool.choose(rng).expect("non-empty"));
    }
    // Sentiment slots whose polarity tracks popularity.
    for _ in 0..spec.sentiment_slots {
        let roll: f64 = rng.random();
        let word = if roll < 0.85 * (1.0 - quantile) {
            PROMOTE_LEXICON.choose(rng)
        } else if roll < 0.85 * (1.0 - quantile) + 0.6 * quantile {
            DEMOTE_LEXICON.choose(rng)
        } else {
            None
        };
        if let Some(word) = word {
            tone += if PROMOTE_LEXICON.contains(word) { 1 } else { -1 };
            let pos = rng.random_range(0..words.len());
            words[pos] = word;
        }
    }
    let mut out = String::new();
    let mut sentence_len = 0;
    let mut target = rng.random_range(7..=11);
    for (i, w) in words.iter().enumerate() {
        if sentence_len == 0 {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&capitalize(w));
        } else {
            out.push(' ');
            out.push_str(w);
        }
        sentence_len += 1;
        let last = i + 1 == words.len();
        if sentence_len >= target || last {
            out.push('.');
            sentence_len = 0;
            target = rng.random_range(7..=11);
        } else if rng.random_bool(0.08) {
            out.push(',');
        }
    }
    (out, tone)
}

pub(crate) fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
