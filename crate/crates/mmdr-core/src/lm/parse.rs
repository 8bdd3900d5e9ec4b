//! Free-text response classification into the three evaluation labels.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Depressed,
    NotDepressed,
    Error,
}

/// Cue lexicon for response parsing: stems matched case-insensitively, with
/// a negation window of preceding words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseCfg {
    pub stems: Vec<String>,
    pub negators: Vec<String>,
    pub negation_window: usize,
}

impl Default for ParseCfg {
    fn default() -> Self {
        ParseCfg {
            stems: vec!["depress".into()],
            negators: [
                "not", "no", "never", "without", "isn't", "isnt", "aren't", "arent", "don't",
                "dont", "doesn't", "doesnt",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            negation_window: 3,
        }
    }
}

/// Classify a generated response: an affirmative-only cue is Depressed, a
/// negated-only cue is NotDepressed, and conflicting or absent cues are
/// Error.
pub fn parse_response(text: &str, cfg: &ParseCfg) -> Label {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .collect();
    let mut affirmative = 0usize;
    let mut negated = 0usize;
    for (i, w) in words.iter().enumerate() {
        if !cfg.stems.iter().any(|s| w.contains(s.as_str())) {
            continue;
        }
        let start = i.saturating_sub(cfg.negation_window);
        let neg = words[start..i]
            .iter()
            .any(|p| cfg.negators.iter().any(|n| p == n));
        if neg {
            negated += 1;
        } else {
            affirmative += 1;
        }
    }
    match (affirmative, negated) {
        (a, 0) if a > 0 => Label::Depressed,
        (0, n) if n > 0 => Label::NotDepressed,
        _ => Label::Error,
    }
}
