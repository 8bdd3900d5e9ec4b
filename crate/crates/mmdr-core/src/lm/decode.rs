//! Nucleus/greedy decoding over the toy decoder.

use crate::error::Result;
use crate::lm::decoder::Decoder;
use crate::lm::sequence::{append_token, strip_closing_eos};
use crate::tensor::{softmax_unchecked, SeededRng};
use crate::text::{TokenSequence, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeCfg {
    pub top_p: f64,
    pub temperature: f64,
    pub greedy: bool,
    pub max_new_tokens: usize,
}

impl Default for DecodeCfg {
    fn default() -> Self {
        DecodeCfg {
            top_p: 0.9,
            temperature: 1.0,
            greedy: false,
            max_new_tokens: 4,
        }
    }
}

/// Pick one token id from a logits row. Greedy mode (or a vanishing
/// temperature) takes the argmax; otherwise nucleus sampling keeps the
/// smallest probability mass reaching `top_p` and renormalizes.
pub fn sample_token(logits: &[f64], cfg: &DecodeCfg, rng: &mut SeededRng) -> u32 {
    if cfg.greedy || cfg.temperature <= 1e-12 {
        return argmax(logits) as u32;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    let probs = softmax_unchecked(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Descending probability; ties break on the lower id for determinism.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::with_capacity(order.len());
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= cfg.top_p {
            break;
        }
    }
    let mut dart = rng.unit() * mass;
    for &i in &kept {
        dart -= probs[i];
        if dart <= 0.0 {
            return i as u32;
        }
    }
    *kept.last().expect("nucleus never empty") as u32
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Generate a textual response from a prepared (spliced, unified) prompt
/// sequence. Stops at the end marker or after `max_new_tokens`.
pub fn decode(
    decoder: &Decoder,
    seq: &TokenSequence,
    cfg: &DecodeCfg,
    rng: &mut SeededRng,
) -> Result<String> {
    let (mut work, mut last) = strip_closing_eos(seq)?;
    let mut generated = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let (logits, cache) = decoder.forward_cached(&work, false, None)?;
        debug_assert_eq!(cache.n, last + 1);
        let id = sample_token(logits.row(last), cfg, rng);
        if id == Vocab::EOS {
            break;
        }
        generated.push(id);
        match append_token(&mut work, id, &decoder.tok_emb.value) {
            Ok(pos) => last = pos,
            Err(_) => break, // sequence full
        }
    }
    Ok(Vocab.render(&generated))
}
