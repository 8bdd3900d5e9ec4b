//! Heterogeneous text input unification: scenario-specific prompts, a
//! byte-level vocabulary, fixed-length token sequences, and padding-mask
//! nullification.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Data-source scenario of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "I")]
    Interview,
    #[serde(rename = "Q")]
    Questionnaire,
    #[serde(rename = "S")]
    SelfNarration,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::Interview,
        Scenario::Questionnaire,
        Scenario::SelfNarration,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::Interview => "I",
            Scenario::Questionnaire => "Q",
            Scenario::SelfNarration => "S",
        }
    }
}

/// Marker that survives into the prompt string and becomes the fused-token
/// placeholder during tokenization.
pub const VA_MARKER: &str = "<VAFeature>";
/// Text slot substituted by `build_prompt`.
pub const TEXT_SLOT: &str = "{Text}";

/// One scenario's prompt text; must contain each placeholder exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub scenario: Scenario,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(scenario: Scenario, text: String) -> Result<Self> {
        if text.matches(TEXT_SLOT).count() != 1 {
            return Err(Error::Config(format!(
                "template for {} must contain {TEXT_SLOT} exactly once",
                scenario.tag()
            )));
        }
        if text.matches(VA_MARKER).count() != 1 {
            return Err(Error::Config(format!(
                "template for {} must contain {VA_MARKER} exactly once",
                scenario.tag()
            )));
        }
        Ok(PromptTemplate { scenario, text })
    }
}

/// Scenario-keyed template set.
#[derive(Debug, Clone)]
pub struct Templates {
    map: BTreeMap<Scenario, PromptTemplate>,
}

impl Templates {
    pub fn defaults() -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            Scenario::Interview,
            PromptTemplate::new(
                Scenario::Interview,
                include_str!("../templates/interview.txt").to_string(),
            )
            .expect("bundled interview template"),
        );
        map.insert(
            Scenario::Questionnaire,
            PromptTemplate::new(
                Scenario::Questionnaire,
                include_str!("../templates/questionnaire.txt").to_string(),
            )
            .expect("bundled questionnaire template"),
        );
        map.insert(
            Scenario::SelfNarration,
            PromptTemplate::new(
                Scenario::SelfNarration,
                include_str!("../templates/self_narration.txt").to_string(),
            )
            .expect("bundled self-narration template"),
        );
        Templates { map }
    }

    /// Replace a scenario's template from a plain-text file.
    pub fn override_from_file(&mut self, scenario: Scenario, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("template {}: {e}", path.display())))?;
        self.map
            .insert(scenario, PromptTemplate::new(scenario, text)?);
        Ok(())
    }

    pub fn get(&self, scenario: Scenario) -> &PromptTemplate {
        &self.map[&scenario]
    }
}

/// Substitute the raw text into the scenario template; the audio-video
/// marker is left in place for the tokenizer.
pub fn build_prompt(templates: &Templates, scenario: Scenario, text: &str) -> Result<String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::Data("empty text for prompt".into()));
    }
    Ok(templates.get(scenario).text.replace(TEXT_SLOT, trimmed))
}

/// Byte-level toy vocabulary: ids 0..=255 are raw bytes, specials follow.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub const PAD: u32 = 256;
    pub const BOS: u32 = 257;
    pub const EOS: u32 = 258;
    pub const VA_PLACEHOLDER: u32 = 259;
    pub const DEP: u32 = 260;
    pub const NODEP: u32 = 261;
    pub const SIZE: usize = 262;

    /// Encode prompt content (no framing tokens); the audio-video marker
    /// collapses to one placeholder id.
    pub fn encode(&self, prompt: &str) -> Vec<u32> {
        let bytes = prompt.as_bytes();
        let marker = VA_MARKER.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i..].starts_with(marker) {
                ids.push(Self::VA_PLACEHOLDER);
                i += marker.len();
            } else {
                ids.push(bytes[i] as u32);
                i += 1;
            }
        }
        ids
    }

    /// Render generated ids to text; answer specials carry their surface
    /// forms, framing specials render empty.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8 as char),
                Self::DEP => out.push_str("depressed"),
                Self::NODEP => out.push_str("not depressed"),
                _ => {}
            }
        }
        out
    }
}

/// Fixed-length embedded token sequence with its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `len x d_llm` embedding rows.
    pub embed: Matrix,
    /// 1.0 for real tokens, 0.0 for padding.
    pub mask: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

/// Tokenize a prompt and embed it from the lookup table into a sequence of
/// exactly `max_len` rows: BOS + content + EOS + padding. Content beyond
/// `max_len - 2` is tail-truncated; templates keep the placeholder near the
/// front so it survives.
pub fn tokenize_embed(
    prompt: &str,
    vocab: &Vocab,
    table: &Matrix,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Config("max_len must fit BOS and EOS".into()));
    }
    if table.rows() != Vocab::SIZE {
        return Err(Error::Dimension(format!(
            "embedding table rows {} != vocab size {}",
            table.rows(),
            Vocab::SIZE
        )));
    }
    let mut content = vocab.encode(prompt);
    content.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(Vocab::BOS);
    ids.extend_from_slice(&content);
    ids.push(Vocab::EOS);
    let real = ids.len();
    ids.resize(max_len, Vocab::PAD);

    let d = table.cols();
    let mut embed = Matrix::zeros(max_len, d);
    for (i, &id) in ids.iter().enumerate() {
        embed.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    let mask: Vec<f64> = (0..max_len)
        .map(|i| if i < real { 1.0 } else { 0.0 })
        .collect();
    Ok(TokenSequence { ids, embed, mask })
}

/// Nullify padded rows: embeddings are multiplied by the broadcast mask, so
/// sequences that differ only in padding content become identical.
pub fn unify(seq: &TokenSequence) -> TokenSequence {
    let mut out = seq.clone();
    for r in 0..out.embed.rows() {
        let m = out.mask[r];
        for v in out.embed.row_mut(r) {
            *v *= m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;

    #[test]
    fn build_prompt_substitutes_text_verbatim() {
        let t = Templates::defaults();
        let p = build_prompt(&t, Scenario::Interview, "Q: hobby? A: none").unwrap();
        assert!(p.contains("Q: hobby? A: none"));
        assert_eq!(p.matches(VA_MARKER).count(), 1);
        assert!(!p.contains(TEXT_SLOT));
    }

    #[test]
    fn scenarios_have_distinct_prefixes() {
        let t = Templates::defaults();
        let s = build_prompt(&t, Scenario::SelfNarration, "I feel tired daily").unwrap();
        let i = build_prompt(&t, Scenario::Interview, "I feel tired daily").unwrap();
        assert_ne!(s, i);
    }

    #[test]
    fn build_prompt_is_deterministic() {
        let t = Templates::defaults();
        let a = build_prompt(&t, Scenario::Questionnaire, "item: often sad").unwrap();
        let b = build_prompt(&t, Scenario::Questionnaire, "item: often sad").unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn build_prompt_rejects_empty_text() {
        let t = Templates::defaults();
        assert!(build_prompt(&t, Scenario::Interview, "   ").is_err());
    }

    #[test]
    fn template_requires_single_placeholders() {
        assert!(PromptTemplate::new(Scenario::Interview, "no slots".into()).is_err());
        assert!(
            PromptTemplate::new(Scenario::Interview, "{Text} {Text} <VAFeature>".into()).is_err()
        );
        assert!(PromptTemplate::new(Scenario::Interview, "{Text} <VAFeature>".into()).is_ok());
    }

    fn table() -> Matrix {
        let mut rng = RngSeed(3).stream();
        rng.init_matrix(Vocab::SIZE, 8, 8)
    }

    #[test]
    fn minimal_prompt_has_two_real_tokens() {
        let seq = tokenize_embed("", &Vocab, &table(), 16).unwrap();
        assert_eq!(seq.real_len(), 2);
    }

    #[test]
    fn mask_counts_match_content() {
        let seq = tokenize_embed("0123456789", &Vocab, &table(), 32).unwrap();
        let ones: usize = seq.mask.iter().filter(|&&m| m == 1.0).count();
        assert_eq!(ones, 12);
        assert_eq!(seq.mask.len(), 32);
        assert!(seq.mask[12..].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn embeddings_match_table_rows() {
        let tbl = table();
        let seq = tokenize_embed("ab<VAFeature>", &Vocab, &tbl, 8).unwrap();
        assert_eq!(seq.ids[0], Vocab::BOS);
        assert_eq!(seq.ids[1], b'a' as u32);
        assert_eq!(seq.ids[3], Vocab::VA_PLACEHOLDER);
        for (i, &id) in seq.ids.iter().enumerate() {
            assert_eq!(seq.embed.row(i), tbl.row(id as usize));
        }
    }

    #[test]
    fn truncation_keeps_prefix_and_placeholder() {
        let long = format!("{VA_MARKER}{}", "x".repeat(100));
        let seq = tokenize_embed(&long, &Vocab, &table(), 16).unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!(seq.ids[1], Vocab::VA_PLACEHOLDER);
        assert_eq!(seq.ids[15], Vocab::EOS);
    }

    #[test]
    fn unify_identity_and_annihilation() {
        let tbl = table();
        let mut seq = tokenize_embed("hello", &Vocab, &tbl, 12).unwrap();
        let all_real = TokenSequence {
            mask: vec![1.0; 12],
            ..seq.clone()
        };
        assert_eq!(unify(&all_real).embed, all_real.embed);
        seq.mask = vec![0.0; 12];
        assert!(unify(&seq).embed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unify_zeroes_exactly_the_padded_rows() {
        let tbl = table();
        let mut seq = tokenize_embed("hi", &Vocab, &tbl, 8).unwrap();
        for r in seq.real_len()..8 {
            for v in seq.embed.row_mut(r) {
                *v = 123.456;
            }
        }
        let real = seq.real_len();
        let u = unify(&seq);
        for r in 0..real {
            assert_eq!(u.embed.row(r), seq.embed.row(r));
        }
        for r in real..8 {
            assert!(u.embed.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pad_garbage_invariance_after_unify() {
        let tbl = table();
        let base = tokenize_embed("abc", &Vocab, &tbl, 10).unwrap();
        let mut garbled = base.clone();
        for r in base.real_len()..10 {
            for (j, v) in garbled.embed.row_mut(r).iter_mut().enumerate() {
                *v = (r * 31 + j) as f64;
            }
        }
        assert_eq!(unify(&base).embed, unify(&garbled).embed);
    }

    #[test]
    fn render_maps_answer_specials() {
        let v = Vocab;
        assert_eq!(v.render(&[Vocab::DEP]), "depressed");
        assert_eq!(v.render(&[Vocab::NODEP]), "not depressed");
        assert_eq!(v.render(&[b'o' as u32, b'k' as u32, Vocab::EOS]), "ok");
    }

    #[test]
    fn encode_round_trips_plain_bytes() {
        let v = Vocab;
        let ids = v.encode("plain");
        assert_eq!(v.render(&ids), "plain");
    }
}
