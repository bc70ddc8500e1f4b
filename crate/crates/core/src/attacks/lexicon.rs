//! Sentiment word lists used by the surrogate rewriter and the synthetic
//! corpus. Changing either list changes results, so bump the version.

pub const LEXICON_VERSION: &str = "lexicon-v1";

pub const PROMOTE_LEXICON: &[&str] = &[
    "exhilarating",
    "soaring",
    "uplifting",
    "breathtaking",
    "acclaimed",
    "captivating",
    "triumphant",
    "dazzling",
    "heartwarming",
    "unforgettable",
    "masterful",
    "stunning",
];

pub const DEMOTE_LEXICON: &[&str] = &[
    "lackluster",
    "tedious",
    "forgettable",
    "bland",
    "dull",
    "plodding",
    "uninspired",
    "clumsy",
    "tiresome",
    "shallow",
    "muddled",
    "disappointing",
];
