//! Token-sequence surgery: fused-token splicing, answer insertion for
//! teacher forcing, and incremental append during generation.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::text::{TokenSequence, Vocab};

/// Where fused rows landed after splicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpliceMap {
    pub placeholder_pos: usize,
    /// Fused rows inserted; 0 means the placeholder collapsed.
    pub rows: usize,
}

/// Replace the placeholder row by the fused token rows (shifting the tail and
/// re-truncating to the fixed length), or collapse it to nothing when no
/// fused token exists. Fused rows are marked real in the mask.
pub fn splice(seq: &TokenSequence, fused: Option<&Matrix>) -> Result<(TokenSequence, SpliceMap)> {
    let l = seq.len();
    let d = seq.embed.cols();
    let positions: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(i, &id)| id == Vocab::VA_PLACEHOLDER && seq.mask[*i] != 0.0)
        .map(|(i, _)| i)
        .collect();
    let p = match positions.as_slice() {
        [one] => *one,
        [] => return Err(Error::Data("sequence has no fused-token placeholder".into())),
        _ => return Err(Error::Data("sequence has multiple fused-token placeholders".into())),
    };
    if let Some(f) = fused {
        if f.cols() != d {
            return Err(Error::Dimension(format!(
                "fused width {} != embedding width {d}",
                f.cols()
            )));
        }
    }
    let n_f = fused.map_or(0, |f| f.rows());

    let mut ids = Vec::with_capacity(l);
    let mut mask = Vec::with_capacity(l);
    let mut embed = Matrix::zeros(l, d);
    let mut row = 0usize;
    let mut push = |id: u32, m: f64, src: &[f64], embed: &mut Matrix, ids: &mut Vec<u32>, mask: &mut Vec<f64>| {
        if ids.len() >= l {
            return;
        }
        ids.push(id);
        mask.push(m);
        embed.row_mut(row).copy_from_slice(src);
        row += 1;
    };
    for i in 0..p {
        push(seq.ids[i], seq.mask[i], seq.embed.row(i), &mut embed, &mut ids, &mut mask);
    }
    if let Some(f) = fused {
        for r in 0..n_f {
            push(Vocab::VA_PLACEHOLDER, 1.0, f.row(r), &mut embed, &mut ids, &mut mask);
        }
    }
    for i in p + 1..l {
        push(seq.ids[i], seq.mask[i], seq.embed.row(i), &mut embed, &mut ids, &mut mask);
    }
    while ids.len() < l {
        ids.push(Vocab::PAD);
        mask.push(0.0);
    }
    Ok((
        TokenSequence { ids, embed, mask },
        SpliceMap {
            placeholder_pos: p,
            rows: n_f,
        },
    ))
}

/// Split the post-splice embedding gradient back into the gradient for the
/// original sequence rows and the fused rows. `d_embed` may cover only the
/// first rows of the sequence (the computed prefix).
pub fn splice_backward(
    d_embed: &Matrix,
    map: &SpliceMap,
    orig_len: usize,
) -> (Matrix, Option<Matrix>) {
    let d = d_embed.cols();
    let n = d_embed.rows();
    let mut d_orig = Matrix::zeros(orig_len, d);
    let p = map.placeholder_pos;
    let mut d_fused = if map.rows > 0 {
        Some(Matrix::zeros(map.rows, d))
    } else {
        None
    };
    for i in 0..n {
        if i < p {
            d_orig.row_mut(i).copy_from_slice(d_embed.row(i));
        } else if i < p + map.rows {
            d_fused
                .as_mut()
                .expect("fused rows present")
                .row_mut(i - p)
                .copy_from_slice(d_embed.row(i));
        } else {
            // Rows after the fused block came from the original tail, shifted
            // by rows-1 (the placeholder itself was consumed).
            let src = i + 1 - map.rows;
            if src < orig_len {
                d_orig.row_mut(src).copy_from_slice(d_embed.row(i));
            }
        }
    }
    (d_orig, d_fused)
}

/// Teacher-forcing target: logits row `pos` must predict token `id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerTarget {
    pub pos: usize,
    pub id: u32,
}

/// Insert the gold answer token before the closing end-of-sequence marker.
/// Returns the supervised positions: the answer token and the end marker.
pub fn append_answer(
    seq: &TokenSequence,
    answer_id: u32,
    table: &Matrix,
) -> Result<(TokenSequence, Vec<AnswerTarget>)> {
    let e = seq
        .mask
        .iter()
        .rposition(|&m| m != 0.0)
        .ok_or_else(|| Error::Data("empty sequence".into()))?;
    if seq.ids[e] != Vocab::EOS {
        return Err(Error::Data("sequence does not end with the end marker".into()));
    }
    if e + 1 >= seq.len() {
        return Err(Error::Data(format!(
            "no room to insert the answer token (length {})",
            seq.len()
        )));
    }
    let mut out = seq.clone();
    out.ids[e] = answer_id;
    out.embed
        .row_mut(e)
        .copy_from_slice(table.row(answer_id as usize));
    out.ids[e + 1] = Vocab::EOS;
    out.embed
        .row_mut(e + 1)
        .copy_from_slice(table.row(Vocab::EOS as usize));
    out.mask[e + 1] = 1.0;
    Ok((
        out,
        vec![
            AnswerTarget { pos: e - 1, id: answer_id },
            AnswerTarget { pos: e, id: Vocab::EOS },
        ],
    ))
}

/// Drop the closing end marker so generation continues from the prompt tail.
/// Tail-truncated prompts (no end marker survived) pass through unchanged.
/// Returns the sequence and the index of the last real row.
pub fn strip_closing_eos(seq: &TokenSequence) -> Result<(TokenSequence, usize)> {
    let e = seq
        .mask
        .iter()
        .rposition(|&m| m != 0.0)
        .ok_or_else(|| Error::Data("empty sequence".into()))?;
    if seq.ids[e] != Vocab::EOS {
        return Ok((seq.clone(), e));
    }
    if e == 0 {
        return Err(Error::Data("nothing before the end marker".into()));
    }
    let mut out = seq.clone();
    out.ids[e] = Vocab::PAD;
    out.mask[e] = 0.0;
    for v in out.embed.row_mut(e) {
        *v = 0.0;
    }
    Ok((out, e - 1))
}

/// Append one generated token into the padding region; fails when full.
pub fn append_token(seq: &mut TokenSequence, id: u32, table: &Matrix) -> Result<usize> {
    let next = seq
        .mask
        .iter()
        .rposition(|&m| m != 0.0)
        .map(|i| i + 1)
        .unwrap_or(0);
    if next >= seq.len() {
        return Err(Error::Data("sequence is full".into()));
    }
    seq.ids[next] = id;
    seq.mask[next] = 1.0;
    seq.embed
        .row_mut(next)
        .copy_from_slice(table.row(id as usize));
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use crate::text::{tokenize_embed, unify, Vocab};

    fn table() -> Matrix {
        let mut rng = RngSeed(7).stream();
        rng.init_matrix(Vocab::SIZE, 6, 6)
    }

    fn prompt_seq(l: usize) -> TokenSequence {
        unify(&tokenize_embed("ab<VAFeature>cd", &Vocab, &table(), l).unwrap())
    }

    #[test]
    fn collapse_without_fused_token() {
        let seq = prompt_seq(12);
        let before_real = seq.real_len();
        let (out, map) = splice(&seq, None).unwrap();
        assert_eq!(map.rows, 0);
        assert_eq!(out.len(), 12);
        assert_eq!(out.real_len(), before_real - 1);
        assert!(!out
            .ids
            .iter()
            .zip(out.mask.iter())
            .any(|(&id, &m)| id == Vocab::VA_PLACEHOLDER && m != 0.0));
        // Neighbors shifted up by one.
        assert_eq!(out.ids[3], seq.ids[4]);
    }

    #[test]
    fn single_row_substitution_in_place() {
        let seq = prompt_seq(12);
        let fused = Matrix::filled(1, 6, 0.25);
        let (out, map) = splice(&seq, Some(&fused)).unwrap();
        assert_eq!(map.rows, 1);
        assert_eq!(out.real_len(), seq.real_len());
        assert_eq!(out.embed.row(map.placeholder_pos), fused.row(0));
        for i in 0..12 {
            if i != map.placeholder_pos {
                assert_eq!(out.embed.row(i), seq.embed.row(i), "row {i}");
                assert_eq!(out.ids[i], seq.ids[i]);
            }
        }
    }

    #[test]
    fn multi_row_splice_shifts_tail_by_n_minus_one() {
        let seq = prompt_seq(16);
        let fused = Matrix::from_fn(4, 6, |r, c| (r * 6 + c) as f64);
        let (out, map) = splice(&seq, Some(&fused)).unwrap();
        assert_eq!(out.real_len(), seq.real_len() + 3);
        let p = map.placeholder_pos;
        for r in 0..4 {
            assert_eq!(out.embed.row(p + r), fused.row(r));
            assert_eq!(out.ids[p + r], Vocab::VA_PLACEHOLDER);
        }
        // Index bookkeeping oracle: old token i lands at i + 3 past the block.
        for i in p + 1..seq.real_len() {
            assert_eq!(out.ids[i + 3], seq.ids[i], "old index {i}");
            assert_eq!(out.embed.row(i + 3), seq.embed.row(i));
        }
    }

    #[test]
    fn splice_rejects_missing_or_duplicate_placeholder() {
        let tbl = table();
        let none = unify(&tokenize_embed("plain", &Vocab, &tbl, 12).unwrap());
        assert!(splice(&none, None).is_err());
        let twice = unify(&tokenize_embed("<VAFeature><VAFeature>", &Vocab, &tbl, 12).unwrap());
        assert!(splice(&twice, None).is_err());
    }

    #[test]
    fn splice_backward_routes_rows() {
        let seq = prompt_seq(16);
        let fused = Matrix::from_fn(2, 6, |r, c| (r + c) as f64 * 0.1);
        let (out, map) = splice(&seq, Some(&fused)).unwrap();
        let n = out.real_len();
        let d_embed = Matrix::from_fn(n, 6, |r, c| (r * 7 + c) as f64);
        let (d_orig, d_fused) = splice_backward(&d_embed, &map, 16);
        let d_fused = d_fused.unwrap();
        let p = map.placeholder_pos;
        for r in 0..2 {
            assert_eq!(d_fused.row(r), d_embed.row(p + r));
        }
        for i in 0..p {
            assert_eq!(d_orig.row(i), d_embed.row(i));
        }
        // Placeholder row itself receives no gradient.
        assert!(d_orig.row(p).iter().all(|&v| v == 0.0));
        for i in p + 2..n {
            assert_eq!(d_orig.row(i - 1), d_embed.row(i));
        }
    }

    #[test]
    fn answer_insertion_supervises_two_positions() {
        let tbl = table();
        let seq = prompt_seq(16);
        let e = seq.real_len() - 1;
        let (out, targets) = append_answer(&seq, Vocab::DEP, &tbl).unwrap();
        assert_eq!(out.real_len(), seq.real_len() + 1);
        assert_eq!(out.ids[e], Vocab::DEP);
        assert_eq!(out.ids[e + 1], Vocab::EOS);
        assert_eq!(
            targets,
            vec![
                AnswerTarget { pos: e - 1, id: Vocab::DEP },
                AnswerTarget { pos: e, id: Vocab::EOS },
            ]
        );
    }

    #[test]
    fn truncated_prompt_passes_strip_unchanged() {
        let tbl = table();
        // A full-width prompt loses its end marker when splicing shifts the
        // tail past the fixed length.
        let long = format!("<VAFeature>{}", "y".repeat(40));
        let seq = unify(&tokenize_embed(&long, &Vocab, &tbl, 16).unwrap());
        let fused = Matrix::filled(4, 6, 0.5);
        let (spliced, _) = splice(&seq, Some(&fused)).unwrap();
        assert_ne!(spliced.ids[15], Vocab::EOS);
        let (out, last) = strip_closing_eos(&spliced).unwrap();
        assert_eq!(out, spliced);
        assert_eq!(last, 15);
    }

    #[test]
    fn strip_and_append_drive_generation() {
        let tbl = table();
        let seq = prompt_seq(16);
        let (mut gen, last) = strip_closing_eos(&seq).unwrap();
        assert_eq!(gen.real_len(), seq.real_len() - 1);
        assert_eq!(last, seq.real_len() - 2);
        let pos = append_token(&mut gen, Vocab::NODEP, &tbl).unwrap();
        assert_eq!(pos, last + 1);
        assert_eq!(gen.ids[pos], Vocab::NODEP);
        assert_eq!(gen.embed.row(pos), tbl.row(Vocab::NODEP as usize));
    }
}
