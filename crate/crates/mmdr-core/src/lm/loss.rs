//! Cross-entropy over supervised answer positions.

use crate::error::{Error, Result};
use crate::lm::sequence::AnswerTarget;
use crate::tensor::Matrix;

/// Mean cross-entropy over the positions `mask` marks, with `targets[i]` the
/// gold token for logits row `i`.
pub fn loss(logits: &Matrix, targets: &[u32], mask: &[f64]) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "loss rows {} vs targets {} vs mask {}",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    let picked: Vec<AnswerTarget> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| AnswerTarget {
            pos: i,
            id: targets[i],
        })
        .collect();
    if picked.is_empty() {
        return Err(Error::Data("no unmasked target position".into()));
    }
    Ok(answer_cross_entropy(logits, &picked).0)
}

/// Cross-entropy averaged over explicit (position, token) targets; also
/// returns d_logits for the backward pass.
pub fn answer_cross_entropy(logits: &Matrix, targets: &[AnswerTarget]) -> (f64, Matrix) {
    assert!(!targets.is_empty(), "need at least one supervised position");
    let inv = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    for t in targets {
        let row = logits.row(t.pos);
        // log-sum-exp with max subtraction.
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += (lse - row[t.id as usize]) * inv;
        let drow = d_logits.row_mut(t.pos);
        for (c, (d, &v)) in drow.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - lse).exp();
            *d += (p - if c == t.id as usize { 1.0 } else { 0.0 }) * inv;
        }
    }
    (total, d_logits)
}
