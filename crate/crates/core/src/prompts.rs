//! Versioned prompt templates, compiled into the binary.
//!
//! Placeholders are written `{name}` and filled by [`render`]. Every run
//! records the SHA-256 of each template so that a report can be tied to the
//! exact wording that produced it.

use std::collections::BTreeMap;

use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Template {
    ProfileSummarize,
    EmotionalPromote,
    EmotionalDemote,
    Neighbor,
    Chain,
    Rerank,
}

pub const ALL_TEMPLATES: [Template; 6] = [
    Template::ProfileSummarize,
    Template::EmotionalPromote,
    Template::EmotionalDemote,
    Template::Neighbor,
    Template::Chain,
    Template::Rerank,
];

impl Template {
    pub fn file_name(self) -> &'static str {
        match self {
            Template::ProfileSummarize => "profile_summarize.txt",
            Template::EmotionalPromote => "attack_emotional_promote.txt",
            Template::EmotionalDemote => "attack_emotional_demote.txt",
            Template::Neighbor => "attack_neighbor.txt",
            Template::Chain => "attack_chain.txt",
            Template::Rerank => "rerank.txt",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Template::ProfileSummarize => include_str!("../prompts/profile_summarize.txt"),
            Template::EmotionalPromote => include_str!("../prompts/attack_emotional_promote.txt"),
            Template::EmotionalDemote => include_str!("../prompts/attack_emotional_demote.txt"),
            Template::Neighbor => include_str!("../prompts/attack_neighbor.txt"),
            Template::Chain => include_str!("../prompts/attack_chain.txt"),
            Template::Rerank => include_str!("../prompts/rerank.txt"),
        }
    }

    pub fn sha256(self) -> String {
        sha256_hex(self.text().as_bytes())
    }
}

/// `prompts/<file>` → hex digest, for run metadata.
pub fn template_hashes() -> BTreeMap<String, String> {
    ALL_TEMPLATES
        .iter()
        .map(|t| (format!("prompts/{}", t.file_name()), t.sha256()))
        .collect()
}

/// Substitutes `{key}` placeholders. Unknown placeholders are left as-is,
/// which keeps literal braces in the template text (e.g. `{title: description}`)
/// intact. Values are inserted verbatim and never re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_known_and_keeps_unknown() {
        let s = render("a {x} b {title: description} c {y}", &[("x", "1"), ("y", "{x}")]);
        assert_eq!(s, "a 1 b {title: description} c {x}");
        assert_eq!(render("open { brace", &[]), "open { brace");
    }

    #[test]
    fn every_template_has_a_distinct_hash() {
        let hashes = template_hashes();
        assert_eq!(hashes.len(), ALL_TEMPLATES.len());
        let distinct: std::collections::BTreeSet<_> = hashes.values().collect();
        assert_eq!(distinct.len(), hashes.len());
        assert!(hashes.keys().all(|k| k.starts_with("prompts/")));
    }

    #[test]
    fn summarize_template_keeps_its_literal_braces() {
        let s = render(Template::ProfileSummarize.text(), &[("pairs", "A: x")]);
        assert!(s.starts_with("Summarize this user's movie preferences in 3 sentences based on"));
        assert!(s.contains("{title: description}"));
        assert!(s.contains("A: x"));
    }
}
