//! Small decoder-only transformer with learned positions, a tied output
//! head, and optional low-rank adapters on selected projections.
//!
//! Attention respects both causality and the sequence padding mask: a real
//! query row attends to real key rows at or before it, padded rows pass
//! through untouched and are never attended to.

use crate::error::{Error, Result};
use crate::lm::lora::{lora_backward, lora_forward, LoraAdapter, LoraCache, LoraTarget};
use crate::tensor::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_fwd, softmax_backward,
    softmax_unchecked, LayerNormCache, Matrix, Param, SeededRng,
};
use crate::text::{TokenSequence, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderCfg {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ff_mult: usize,
}

impl Default for DecoderCfg {
    fn default() -> Self {
        DecoderCfg {
            d_llm: 64,
            layers: 2,
            heads: 4,
            max_len: 256,
            ff_mult: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Param,
    ln1_b: Param,
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln2_g: Param,
    ln2_b: Param,
    ff1_w: Param,
    ff1_b: Param,
    ff2_w: Param,
    ff2_b: Param,
    /// Adapters indexed by `LoraTarget::index()`.
    lora: Vec<Option<LoraAdapter>>,
}

impl Block {
    fn init(d: usize, ff: usize, rng: &mut SeededRng) -> Self {
        Block {
            ln1_g: Param::new(Matrix::filled(1, d, 1.0)),
            ln1_b: Param::new(Matrix::zeros(1, d)),
            wq: Param::new(rng.init_matrix(d, d, d)),
            bq: Param::new(rng.init_matrix(1, d, d)),
            wk: Param::new(rng.init_matrix(d, d, d)),
            bk: Param::new(rng.init_matrix(1, d, d)),
            wv: Param::new(rng.init_matrix(d, d, d)),
            bv: Param::new(rng.init_matrix(1, d, d)),
            wo: Param::new(rng.init_matrix(d, d, d)),
            bo: Param::new(rng.init_matrix(1, d, d)),
            ln2_g: Param::new(Matrix::filled(1, d, 1.0)),
            ln2_b: Param::new(Matrix::zeros(1, d)),
            ff1_w: Param::new(rng.init_matrix(d, ff, d)),
            ff1_b: Param::new(rng.init_matrix(1, ff, d)),
            ff2_w: Param::new(rng.init_matrix(ff, d, ff)),
            ff2_b: Param::new(rng.init_matrix(1, d, ff)),
            lora: vec![None; 6],
        }
    }
}

const LN_EPS: f64 = 1e-5;

pub struct Decoder {
    pub cfg: DecoderCfg,
    /// `Vocab::SIZE x d_llm`; doubles as the tied output head.
    pub tok_emb: Param,
    /// `max_len x d_llm` learned positions.
    pub pos_emb: Param,
    blocks: Vec<Block>,
    final_ln_g: Param,
    final_ln_b: Param,
}

impl Decoder {
    pub fn init(cfg: DecoderCfg, rng: &mut SeededRng) -> Self {
        let d = cfg.d_llm;
        let ff = d * cfg.ff_mult;
        let tok_emb = Param::new(rng.init_matrix(Vocab::SIZE, d, d));
        let pos_emb = Param::new(rng.init_matrix(cfg.max_len, d, d));
        let blocks = (0..cfg.layers).map(|_| Block::init(d, ff, rng)).collect();
        Decoder {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            final_ln_g: Param::new(Matrix::filled(1, d, 1.0)),
            final_ln_b: Param::new(Matrix::zeros(1, d)),
        }
    }

    /// Attach fresh adapters to the given targets on every block.
    pub fn attach_lora(
        &mut self,
        targets: &[LoraTarget],
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut SeededRng,
    ) {
        let d = self.cfg.d_llm;
        let ff = d * self.cfg.ff_mult;
        for block in self.blocks.iter_mut() {
            for t in targets {
                let (d_in, d_out) = match t {
                    LoraTarget::FfIn => (d, ff),
                    LoraTarget::FfOut => (ff, d),
                    _ => (d, d),
                };
                block.lora[t.index()] =
                    Some(LoraAdapter::init(d_in, d_out, rank, alpha, dropout, rng));
            }
        }
    }

    pub fn has_lora(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.lora.iter().any(|a| a.is_some()))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.tok_emb"), &mut self.tok_emb);
        f(&format!("{prefix}.pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("{prefix}.block{i}.ln1_g"), &mut b.ln1_g);
            f(&format!("{prefix}.block{i}.ln1_b"), &mut b.ln1_b);
            f(&format!("{prefix}.block{i}.wq"), &mut b.wq);
            f(&format!("{prefix}.block{i}.bq"), &mut b.bq);
            f(&format!("{prefix}.block{i}.wk"), &mut b.wk);
            f(&format!("{prefix}.block{i}.bk"), &mut b.bk);
            f(&format!("{prefix}.block{i}.wv"), &mut b.wv);
            f(&format!("{prefix}.block{i}.bv"), &mut b.bv);
            f(&format!("{prefix}.block{i}.wo"), &mut b.wo);
            f(&format!("{prefix}.block{i}.bo"), &mut b.bo);
            f(&format!("{prefix}.block{i}.ln2_g"), &mut b.ln2_g);
            f(&format!("{prefix}.block{i}.ln2_b"), &mut b.ln2_b);
            f(&format!("{prefix}.block{i}.ff1_w"), &mut b.ff1_w);
            f(&format!("{prefix}.block{i}.ff1_b"), &mut b.ff1_b);
            f(&format!("{prefix}.block{i}.ff2_w"), &mut b.ff2_w);
            f(&format!("{prefix}.block{i}.ff2_b"), &mut b.ff2_b);
        }
        f(&format!("{prefix}.final_ln_g"), &mut self.final_ln_g);
        f(&format!("{prefix}.final_ln_b"), &mut self.final_ln_b);
    }

    /// Adapters are visited under a separate prefix so freeze rules can keep
    /// the base weights fixed while the adapters train.
    pub fn visit_lora(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for t in LoraTarget::ALL {
                if let Some(ad) = block.lora[t.index()].as_mut() {
                    f(&format!("{prefix}.block{i}.{}.a", t.name()), &mut ad.a);
                    f(&format!("{prefix}.block{i}.{}.b", t.name()), &mut ad.b);
                }
            }
        }
    }
}

struct BlockCache {
    x_in: Matrix,
    ln1: Vec<LayerNormCache>,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head causal softmax maps, `n x n` with zeros above the diagonal.
    maps: Vec<Matrix>,
    concat: Matrix,
    lora_q: Option<LoraCache>,
    lora_k: Option<LoraCache>,
    lora_v: Option<LoraCache>,
    lora_o: Option<LoraCache>,
    ln2: Vec<LayerNormCache>,
    h2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    lora_ff_in: Option<LoraCache>,
    lora_ff_out: Option<LoraCache>,
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    final_ln: Vec<LayerNormCache>,
    h_final: Matrix,
    x_last: Matrix,
    /// Rows actually computed (everything past the last real token is padding).
    pub n: usize,
    mask: Vec<f64>,
}

impl Decoder {
    /// Forward pass over the real prefix of the sequence. Returns logits with
    /// one row per computed position (`cache.n` rows).
    pub fn forward_cached(
        &self,
        seq: &TokenSequence,
        train: bool,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Matrix, DecoderCache)> {
        let n = seq
            .mask
            .iter()
            .rposition(|&m| m != 0.0)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Dimension("sequence has no real tokens".into()))?;
        if n > self.cfg.max_len {
            return Err(Error::Dimension(format!(
                "sequence length {n} exceeds model max {}",
                self.cfg.max_len
            )));
        }
        if seq.embed.cols() != self.cfg.d_llm {
            return Err(Error::Dimension(format!(
                "embedding width {} != model width {}",
                seq.embed.cols(),
                self.cfg.d_llm
            )));
        }
        let d = self.cfg.d_llm;
        let mask = &seq.mask[..n];
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            for c in 0..d {
                x.set(i, c, seq.embed.at(i, c) + self.pos_emb.value.at(i, c));
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x_next, cache) = self.block_forward(block, &x, mask, train, rng.as_deref_mut());
            caches.push(cache);
            x = x_next;
        }
        let mut h_final = Matrix::zeros(n, d);
        let mut final_ln = Vec::with_capacity(n);
        for i in 0..n {
            if mask[i] == 0.0 {
                final_ln.push(LayerNormCache {
                    xhat: vec![0.0; d],
                    inv_std: 0.0,
                });
                continue;
            }
            let (y, c) = layer_norm_fwd(
                x.row(i),
                self.final_ln_g.value.row(0),
                self.final_ln_b.value.row(0),
                LN_EPS,
            );
            h_final.row_mut(i).copy_from_slice(&y);
            final_ln.push(c);
        }
        // Tied head: logits = h · Eᵀ.
        let logits = h_final.matmul_bt(&self.tok_emb.value);
        Ok((
            logits,
            DecoderCache {
                blocks: caches,
                final_ln,
                h_final,
                x_last: x,
                n,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<Matrix> {
        self.forward_cached(seq, false, None).map(|(l, _)| l)
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Matrix,
        mask: &[f64],
        train: bool,
        mut rng: Option<&mut SeededRng>,
    ) -> (Matrix, BlockCache) {
        let n = x.rows();
        let d = self.cfg.d_llm;
        let heads = self.cfg.heads;
        let d_h = d / heads;
        let scale = 1.0 / (d_h as f64).sqrt();

        let mut h1 = Matrix::zeros(n, d);
        let mut ln1 = Vec::with_capacity(n);
        for i in 0..n {
            if mask[i] == 0.0 {
                ln1.push(LayerNormCache {
                    xhat: vec![0.0; d],
                    inv_std: 0.0,
                });
                continue;
            }
            let (y, c) = layer_norm_fwd(
                x.row(i),
                block.ln1_g.value.row(0),
                block.ln1_b.value.row(0),
                LN_EPS,
            );
            h1.row_mut(i).copy_from_slice(&y);
            ln1.push(c);
        }
        let (q, lora_q) = lora_forward(
            &h1,
            &block.wq.value,
            Some(block.bq.value.row(0)),
            block.lora[LoraTarget::Q.index()].as_ref(),
            train,
            rng.as_deref_mut(),
        );
        let (k, lora_k) = lora_forward(
            &h1,
            &block.wk.value,
            Some(block.bk.value.row(0)),
            block.lora[LoraTarget::K.index()].as_ref(),
            train,
            rng.as_deref_mut(),
        );
        let (v, lora_v) = lora_forward(
            &h1,
            &block.wv.value,
            Some(block.bv.value.row(0)),
            block.lora[LoraTarget::V.index()].as_ref(),
            train,
            rng.as_deref_mut(),
        );

        let mut concat = Matrix::zeros(n, d);
        let mut maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let hs = h * d_h;
            let mut smap = Matrix::zeros(n, n);
            for i in 0..n {
                if mask[i] == 0.0 {
                    continue;
                }
                let mut scores = Vec::with_capacity(i + 1);
                let mut cols = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    if mask[j] == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for c in 0..d_h {
                        acc += q.at(i, hs + c) * k.at(j, hs + c);
                    }
                    scores.push(acc * scale);
                    cols.push(j);
                }
                let sm = softmax_unchecked(&scores);
                for (w, &j) in sm.iter().zip(cols.iter()) {
                    smap.set(i, j, *w);
                    for c in 0..d_h {
                        let cur = concat.at(i, hs + c);
                        concat.set(i, hs + c, cur + w * v.at(j, hs + c));
                    }
                }
            }
            maps.push(smap);
        }
        let (o, lora_o) = lora_forward(
            &concat,
            &block.wo.value,
            Some(block.bo.value.row(0)),
            block.lora[LoraTarget::O.index()].as_ref(),
            train,
            rng.as_deref_mut(),
        );
        let mut x_mid = x.clone();
        for i in 0..n {
            if mask[i] == 0.0 {
                continue;
            }
            for c in 0..d {
                let cur = x_mid.at(i, c);
                x_mid.set(i, c, cur + o.at(i, c));
            }
        }

        let mut h2 = Matrix::zeros(n, d);
        let mut ln2 = Vec::with_capacity(n);
        for i in 0..n {
            if mask[i] == 0.0 {
                ln2.push(LayerNormCache {
                    xhat: vec![0.0; d],
                    inv_std: 0.0,
                });
                continue;
            }
            let (y, c) = layer_norm_fwd(
                x_mid.row(i),
                block.ln2_g.value.row(0),
                block.ln2_b.value.row(0),
                LN_EPS,
            );
            h2.row_mut(i).copy_from_slice(&y);
            ln2.push(c);
        }
        let (ff_pre, lora_ff_in) = lora_forward(
            &h2,
            &block.ff1_w.value,
            Some(block.ff1_b.value.row(0)),
            block.lora[LoraTarget::FfIn.index()].as_ref(),
            train,
            rng.as_deref_mut(),
        );
        let ff_act = ff_pre.map(gelu);
        let (ff_out, lora_ff_out) = lora_forward(
            &ff_act,
            &block.ff2_w.value,
            Some(block.ff2_b.value.row(0)),
            block.lora[LoraTarget::FfOut.index()].as_ref(),
            train,
            rng,
        );
        let mut x_out = x_mid.clone();
        for i in 0..n {
            if mask[i] == 0.0 {
                continue;
            }
            for c in 0..d {
                let cur = x_out.at(i, c);
                x_out.set(i, c, cur + ff_out.at(i, c));
            }
        }
        (
            x_out,
            BlockCache {
                x_in: x.clone(),
                ln1,
                h1,
                q,
                k,
                v,
                maps,
                concat,
                lora_q,
                lora_k,
                lora_v,
                lora_o,
                ln2,
                h2,
                ff_pre,
                ff_act,
                lora_ff_in,
                lora_ff_out,
            },
        )
    }

    /// Backward from d_logits (`n x vocab`); accumulates every parameter
    /// gradient and returns the gradient w.r.t. the input embedding rows
    /// (`n x d_llm`).
    pub fn backward(&mut self, cache: &DecoderCache, d_logits: &Matrix) -> Matrix {
        let d = self.cfg.d_llm;
        let n = cache.n;
        // Tied head.
        self.tok_emb
            .grad
            .add_assign(&d_logits.matmul_at(&cache.h_final));
        let d_h_final = d_logits.matmul(&self.tok_emb.value);
        // Final layer norm.
        let mut d_x = Matrix::zeros(n, d);
        {
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..n {
                if cache.mask[i] == 0.0 {
                    continue;
                }
                let back = layer_norm_backward(
                    &cache.final_ln[i],
                    self.final_ln_g.value.row(0),
                    d_h_final.row(i),
                    &mut dgain,
                    &mut dbias,
                );
                d_x.row_mut(i).copy_from_slice(&back);
            }
            for c in 0..d {
                self.final_ln_g.grad.row_mut(0)[c] += dgain[c];
                self.final_ln_b.grad.row_mut(0)[c] += dbias[c];
            }
        }
        let _ = &cache.x_last;
        for (bi, bcache) in cache.blocks.iter().enumerate().rev() {
            d_x = self.block_backward(bi, bcache, &cache.mask, &d_x);
        }
        // Positions (only real rows were read).
        for i in 0..n {
            if cache.mask[i] == 0.0 {
                continue;
            }
            for c in 0..d {
                let g = self.pos_emb.grad.at(i, c) + d_x.at(i, c);
                self.pos_emb.grad.set(i, c, g);
            }
        }
        d_x
    }

    fn block_backward(
        &mut self,
        block_idx: usize,
        cache: &BlockCache,
        mask: &[f64],
        d_out: &Matrix,
    ) -> Matrix {
        let d = self.cfg.d_llm;
        let heads = self.cfg.heads;
        let d_h = d / heads;
        let scale = 1.0 / (d_h as f64).sqrt();
        let n = d_out.rows();
        let block = &mut self.blocks[block_idx];

        // Feed-forward residual: d_ff_out = d_out on real rows.
        let mut d_ff_out = d_out.clone();
        for i in 0..n {
            if mask[i] == 0.0 {
                for v in d_ff_out.row_mut(i) {
                    *v = 0.0;
                }
            }
        }
        let mut d_ff2 = Matrix::zeros(block.ff2_w.value.rows(), block.ff2_w.value.cols());
        let mut ad_ff_out = block.lora[LoraTarget::FfOut.index()].take();
        let d_ff_act = lora_backward(
            &cache.ff_act,
            &block.ff2_w.value,
            &mut d_ff2,
            Some(&mut block.ff2_b.grad),
            ad_ff_out.as_mut(),
            cache.lora_ff_out.as_ref(),
            &d_ff_out,
        );
        block.lora[LoraTarget::FfOut.index()] = ad_ff_out;
        block.ff2_w.grad.add_assign(&d_ff2);
        let mut d_ff_pre = d_ff_act;
        for (g, &pre) in d_ff_pre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
            *g *= gelu_backward(pre);
        }
        let mut d_ff1 = Matrix::zeros(block.ff1_w.value.rows(), block.ff1_w.value.cols());
        let mut ad_ff_in = block.lora[LoraTarget::FfIn.index()].take();
        let d_h2 = lora_backward(
            &cache.h2,
            &block.ff1_w.value,
            &mut d_ff1,
            Some(&mut block.ff1_b.grad),
            ad_ff_in.as_mut(),
            cache.lora_ff_in.as_ref(),
            &d_ff_pre,
        );
        block.lora[LoraTarget::FfIn.index()] = ad_ff_in;
        block.ff1_w.grad.add_assign(&d_ff1);
        // LN2 + residual into x_mid.
        let mut d_x_mid = d_out.clone();
        {
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..n {
                if mask[i] == 0.0 {
                    for v in d_x_mid.row_mut(i) {
                        *v = 0.0;
                    }
                    continue;
                }
                let back = layer_norm_backward(
                    &cache.ln2[i],
                    block.ln2_g.value.row(0),
                    d_h2.row(i),
                    &mut dgain,
                    &mut dbias,
                );
                for (dst, &b) in d_x_mid.row_mut(i).iter_mut().zip(back.iter()) {
                    *dst += b;
                }
            }
            for c in 0..d {
                block.ln2_g.grad.row_mut(0)[c] += dgain[c];
                block.ln2_b.grad.row_mut(0)[c] += dbias[c];
            }
        }

        // Attention output projection.
        let mut d_o = d_x_mid.clone();
        for i in 0..n {
            if mask[i] == 0.0 {
                for v in d_o.row_mut(i) {
                    *v = 0.0;
                }
            }
        }
        let mut d_wo = Matrix::zeros(d, d);
        let mut ad_o = block.lora[LoraTarget::O.index()].take();
        let d_concat = lora_backward(
            &cache.concat,
            &block.wo.value,
            &mut d_wo,
            Some(&mut block.bo.grad),
            ad_o.as_mut(),
            cache.lora_o.as_ref(),
            &d_o,
        );
        block.lora[LoraTarget::O.index()] = ad_o;
        block.wo.grad.add_assign(&d_wo);

        // Heads.
        let mut d_q = Matrix::zeros(n, d);
        let mut d_k = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        for h in 0..heads {
            let hs = h * d_h;
            let smap = &cache.maps[h];
            for i in 0..n {
                if mask[i] == 0.0 {
                    continue;
                }
                // Gather the active keys for row i.
                let mut cols = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    if mask[j] != 0.0 {
                        cols.push(j);
                    }
                }
                // d_v and raw d_s.
                let mut d_s = Vec::with_capacity(cols.len());
                for &j in &cols {
                    let w = smap.at(i, j);
                    let mut acc = 0.0;
                    for c in 0..d_h {
                        let dc = d_concat.at(i, hs + c);
                        acc += dc * cache.v.at(j, hs + c);
                        let cur = d_v.at(j, hs + c);
                        d_v.set(j, hs + c, cur + w * dc);
                    }
                    d_s.push(acc);
                }
                let s_row: Vec<f64> = cols.iter().map(|&j| smap.at(i, j)).collect();
                let d_scores = softmax_backward(&s_row, &d_s);
                for (&j, ds) in cols.iter().zip(d_scores.iter()) {
                    let ds = ds * scale;
                    for c in 0..d_h {
                        let cur = d_q.at(i, hs + c);
                        d_q.set(i, hs + c, cur + ds * cache.k.at(j, hs + c));
                        let cur = d_k.at(j, hs + c);
                        d_k.set(j, hs + c, cur + ds * cache.q.at(i, hs + c));
                    }
                }
            }
        }

        // Q/K/V projections back to h1.
        let mut d_h1 = Matrix::zeros(n, d);
        let mut d_wq = Matrix::zeros(d, d);
        let mut ad_q = block.lora[LoraTarget::Q.index()].take();
        d_h1.add_assign(&lora_backward(
            &cache.h1,
            &block.wq.value,
            &mut d_wq,
            Some(&mut block.bq.grad),
            ad_q.as_mut(),
            cache.lora_q.as_ref(),
            &d_q,
        ));
        block.lora[LoraTarget::Q.index()] = ad_q;
        block.wq.grad.add_assign(&d_wq);
        let mut d_wk = Matrix::zeros(d, d);
        let mut ad_k = block.lora[LoraTarget::K.index()].take();
        d_h1.add_assign(&lora_backward(
            &cache.h1,
            &block.wk.value,
            &mut d_wk,
            Some(&mut block.bk.grad),
            ad_k.as_mut(),
            cache.lora_k.as_ref(),
            &d_k,
        ));
        block.lora[LoraTarget::K.index()] = ad_k;
        block.wk.grad.add_assign(&d_wk);
        let mut d_wv = Matrix::zeros(d, d);
        let mut ad_v = block.lora[LoraTarget::V.index()].take();
        d_h1.add_assign(&lora_backward(
            &cache.h1,
            &block.wv.value,
            &mut d_wv,
            Some(&mut block.bv.grad),
            ad_v.as_mut(),
            cache.lora_v.as_ref(),
            &d_v,
        ));
        block.lora[LoraTarget::V.index()] = ad_v;
        block.wv.grad.add_assign(&d_wv);

        // LN1 + residual into the block input.
        let mut d_x_in = d_x_mid;
        {
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..n {
                if mask[i] == 0.0 {
                    continue;
                }
                let back = layer_norm_backward(
                    &cache.ln1[i],
                    block.ln1_g.value.row(0),
                    d_h1.row(i),
                    &mut dgain,
                    &mut dbias,
                );
                for (dst, &b) in d_x_in.row_mut(i).iter_mut().zip(back.iter()) {
                    *dst += b;
                }
            }
            for c in 0..d {
                block.ln1_g.grad.row_mut(0)[c] += dgain[c];
                block.ln1_b.grad.row_mut(0)[c] += dbias[c];
            }
        }
        let _ = &cache.x_in;
        d_x_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use crate::text::{tokenize_embed, unify};

    fn decoder(seed: u64) -> Decoder {
        let mut rng = RngSeed(seed).stream();
        Decoder::init(
            DecoderCfg {
                d_llm: 16,
                layers: 2,
                heads: 2,
                max_len: 32,
                ff_mult: 2,
            },
            &mut rng,
        )
    }

    fn seq_for(dec: &Decoder, text: &str, l: usize) -> TokenSequence {
        unify(&tokenize_embed(text, &Vocab, &dec.tok_emb.value, l).unwrap())
    }

    #[test]
    fn forward_covers_real_prefix_only() {
        let dec = decoder(1);
        let seq = seq_for(&dec, "hello", 20);
        let (logits, cache) = dec.forward_cached(&seq, false, None).unwrap();
        assert_eq!(cache.n, 7); // BOS + 5 bytes + EOS
        assert_eq!((logits.rows(), logits.cols()), (7, Vocab::SIZE));
        assert!(logits.all_finite());
    }

    #[test]
    fn causality_later_tokens_do_not_move_earlier_logits() {
        let dec = decoder(2);
        let a = seq_for(&dec, "abcdef", 20);
        let b = seq_for(&dec, "abcdeX", 20);
        let la = dec.forward(&a).unwrap();
        let lb = dec.forward(&b).unwrap();
        // Positions before the perturbed byte (index 6) are bit-identical.
        for i in 0..6 {
            assert_eq!(la.row(i), lb.row(i), "row {i}");
        }
        assert_ne!(la.row(6), lb.row(6));
    }

    #[test]
    fn pad_region_garbage_never_reaches_real_logits() {
        let dec = decoder(3);
        let base = seq_for(&dec, "abc", 16);
        let mut garbled = base.clone();
        let real = base.real_len();
        for r in real..16 {
            garbled.ids[r] = b'Z' as u32;
            for (c, v) in garbled.embed.row_mut(r).iter_mut().enumerate() {
                *v = (r + c) as f64 * 0.37;
            }
        }
        let garbled = unify(&garbled);
        let la = dec.forward(&base).unwrap();
        let lb = dec.forward(&garbled).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn fresh_lora_is_bitwise_identity() {
        let mut dec = decoder(4);
        let seq = seq_for(&dec, "check", 16);
        let before = dec.forward(&seq).unwrap();
        let mut rng = RngSeed(9).stream();
        dec.attach_lora(
            &[LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O],
            4,
            16.0,
            0.05,
            &mut rng,
        );
        let after = dec.forward(&seq).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn forward_is_deterministic() {
        let dec = decoder(5);
        let seq = seq_for(&dec, "determinism", 24);
        let a = dec.forward(&seq).unwrap();
        let b = dec.forward(&seq).unwrap();
        assert_eq!(a, b);
    }
}
