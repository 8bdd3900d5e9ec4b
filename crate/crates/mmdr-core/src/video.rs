//! Multi-cue video path: four facial-cue streams pass through per-cue
//! temporal convolutions, cross-cue attention with residual layer norm,
//! per-cue self-attention with temporal mean pooling, and a linear adapter
//! onto the shared token geometry.

use crate::error::{Error, Result};
use crate::fusion::ModalityTokens;
use crate::tensor::{
    conv1d, conv1d_backward, layer_norm_backward, layer_norm_fwd, softmax_backward,
    softmax_unchecked, Conv1dKernel, LayerNormCache, Linear, Matrix, Padding, Param, SeededRng,
};
use serde::{Deserialize, Serialize};

pub const CUE_COUNT: usize = 4;
pub const CUE_NAMES: [&str; CUE_COUNT] = ["f2d", "gaze", "hp", "au"];
const LN_EPS: f64 = 1e-5;

/// Per-cue feature widths; defaults follow the standard facial-feature
/// column groups (landmarks, gaze, head pose, action units).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueDims {
    pub f2d: usize,
    pub gaze: usize,
    pub hp: usize,
    pub au: usize,
}

impl Default for CueDims {
    fn default() -> Self {
        CueDims {
            f2d: 136,
            gaze: 8,
            hp: 6,
            au: 35,
        }
    }
}

impl CueDims {
    pub fn get(&self, cue: usize) -> usize {
        [self.f2d, self.gaze, self.hp, self.au][cue]
    }
}

/// Four time-aligned cue streams sharing one frame count.
#[derive(Debug, Clone)]
pub struct CueSet {
    pub f2d: Matrix,
    pub gaze: Matrix,
    pub hp: Matrix,
    pub au: Matrix,
    pub fps: f64,
}

impl CueSet {
    pub fn cue(&self, i: usize) -> &Matrix {
        match i {
            0 => &self.f2d,
            1 => &self.gaze,
            2 => &self.hp,
            3 => &self.au,
            _ => unreachable!("cue index"),
        }
    }

    pub fn t(&self) -> usize {
        self.f2d.rows()
    }

    pub fn duration_s(&self) -> f64 {
        self.t() as f64 / self.fps
    }

    pub fn validate(&self, dims: &CueDims) -> Result<()> {
        let t = self.t();
        if t == 0 {
            return Err(Error::Data("cue streams need at least one frame".into()));
        }
        for i in 0..CUE_COUNT {
            let c = self.cue(i);
            if c.rows() != t {
                return Err(Error::Data(format!(
                    "cue {} has {} frames, expected {}",
                    CUE_NAMES[i],
                    c.rows(),
                    t
                )));
            }
            if c.cols() != dims.get(i) {
                return Err(Error::Data(format!(
                    "cue {} width {} != configured {}",
                    CUE_NAMES[i],
                    c.cols(),
                    dims.get(i)
                )));
            }
        }
        Ok(())
    }
}

/// Conv1d weights stored as trainable params.
#[derive(Debug, Clone)]
struct ConvParams {
    weight: Param,
    bias: Param,
    width: usize,
    ch_in: usize,
    ch_out: usize,
}

impl ConvParams {
    fn init(width: usize, ch_in: usize, ch_out: usize, rng: &mut SeededRng) -> Self {
        let fan_in = width * ch_in;
        ConvParams {
            weight: Param::new(rng.init_matrix(width * ch_in, ch_out, fan_in)),
            bias: Param::new(rng.init_matrix(1, ch_out, fan_in)),
            width,
            ch_in,
            ch_out,
        }
    }

    fn kernel(&self) -> Conv1dKernel {
        Conv1dKernel {
            width: self.width,
            ch_in: self.ch_in,
            ch_out: self.ch_out,
            weight: self.weight.value.clone(),
            bias: self.bias.value.row(0).to_vec(),
        }
    }
}

/// Ordered cross-cue pair index: queries from `m`, keys/values from `n`.
fn pair_idx(m: usize, n: usize) -> usize {
    debug_assert_ne!(m, n);
    m * (CUE_COUNT - 1) + if n < m { n } else { n - 1 }
}

/// The video encoder's trainable state.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    convs: Vec<ConvParams>,
    cross_q: Vec<Param>,
    cross_k: Vec<Param>,
    cross_v: Vec<Param>,
    ln_gain: Vec<Param>,
    ln_bias: Vec<Param>,
    self_q: Vec<Param>,
    self_k: Vec<Param>,
    self_v: Vec<Param>,
    adapter: Linear,
    pub dims: CueDims,
    pub d_cue: usize,
    pub n_f: usize,
    pub d_f: usize,
    /// Share one K/V projection per source cue instead of one per ordered pair.
    pub share_cross_kv: bool,
}

impl VideoEncoder {
    pub fn init(
        dims: CueDims,
        d_cue: usize,
        conv_width: usize,
        n_f: usize,
        d_f: usize,
        share_cross_kv: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let convs = (0..CUE_COUNT)
            .map(|i| ConvParams::init(conv_width, dims.get(i), d_cue, rng))
            .collect();
        let n_pairs = CUE_COUNT * (CUE_COUNT - 1);
        let n_kv = if share_cross_kv { CUE_COUNT } else { n_pairs };
        let cross_q = (0..n_pairs)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let cross_k = (0..n_kv)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let cross_v = (0..n_kv)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let ln_gain = (0..CUE_COUNT)
            .map(|_| Param::new(Matrix::filled(1, d_cue, 1.0)))
            .collect();
        let ln_bias = (0..CUE_COUNT)
            .map(|_| Param::new(Matrix::zeros(1, d_cue)))
            .collect();
        let self_q = (0..CUE_COUNT)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let self_k = (0..CUE_COUNT)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let self_v = (0..CUE_COUNT)
            .map(|_| Param::new(rng.init_matrix(d_cue, d_cue, d_cue)))
            .collect();
        let adapter = Linear::init(CUE_COUNT * d_cue, n_f * d_f, rng);
        VideoEncoder {
            convs,
            cross_q,
            cross_k,
            cross_v,
            ln_gain,
            ln_bias,
            self_q,
            self_k,
            self_v,
            adapter,
            dims,
            d_cue,
            n_f,
            d_f,
            share_cross_kv,
        }
    }

    fn kv_idx(&self, m: usize, n: usize) -> usize {
        if self.share_cross_kv {
            n
        } else {
            pair_idx(m, n)
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            f(&format!("{prefix}.conv.{}.weight", CUE_NAMES[i]), &mut conv.weight);
            f(&format!("{prefix}.conv.{}.bias", CUE_NAMES[i]), &mut conv.bias);
        }
        for (i, p) in self.cross_q.iter_mut().enumerate() {
            f(&format!("{prefix}.cross_q.{i}"), p);
        }
        for (i, p) in self.cross_k.iter_mut().enumerate() {
            f(&format!("{prefix}.cross_k.{i}"), p);
        }
        for (i, p) in self.cross_v.iter_mut().enumerate() {
            f(&format!("{prefix}.cross_v.{i}"), p);
        }
        for i in 0..CUE_COUNT {
            f(&format!("{prefix}.ln_gain.{}", CUE_NAMES[i]), &mut self.ln_gain[i]);
            f(&format!("{prefix}.ln_bias.{}", CUE_NAMES[i]), &mut self.ln_bias[i]);
        }
        for (i, p) in self.self_q.iter_mut().enumerate() {
            f(&format!("{prefix}.self_q.{i}"), p);
        }
        for (i, p) in self.self_k.iter_mut().enumerate() {
            f(&format!("{prefix}.self_k.{i}"), p);
        }
        for (i, p) in self.self_v.iter_mut().enumerate() {
            f(&format!("{prefix}.self_v.{i}"), p);
        }
        self.adapter.visit(&format!("{prefix}.adapter"), f);
    }
}

/// Single-head scaled dot-product attention; returns output and softmax map.
fn attn_single(q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = q.matmul_bt(k).scale(scale);
    for r in 0..s.rows() {
        let sm = softmax_unchecked(s.row(r));
        s.row_mut(r).copy_from_slice(&sm);
    }
    (s.matmul(v), s)
}

/// Backward of `attn_single`. Returns (d_q, d_k, d_v).
fn attn_single_backward(
    d_out: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    s: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_v = s.matmul_at(d_out);
    let d_s = d_out.matmul_bt(v);
    let mut d_scores = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let back = softmax_backward(s.row(r), d_s.row(r));
        d_scores.row_mut(r).copy_from_slice(&back);
    }
    let d_scores = d_scores.scale(scale);
    let d_q = d_scores.matmul(k);
    let d_k = d_scores.matmul_at(q);
    (d_q, d_k, d_v)
}

pub struct ConvStageCache {
    inputs: Vec<Matrix>,
}

/// Per-cue temporal convolution onto the common hidden width.
pub fn cue_conv_cached(enc: &VideoEncoder, cues: &CueSet) -> Result<(Vec<Matrix>, ConvStageCache)> {
    cues.validate(&enc.dims)?;
    let mut hidden = Vec::with_capacity(CUE_COUNT);
    let mut inputs = Vec::with_capacity(CUE_COUNT);
    for m in 0..CUE_COUNT {
        let x = cues.cue(m);
        hidden.push(conv1d(x, &enc.convs[m].kernel(), 1, Padding::Same)?);
        inputs.push(x.clone());
    }
    Ok((hidden, ConvStageCache { inputs }))
}

pub fn cue_conv(enc: &VideoEncoder, cues: &CueSet) -> Result<Vec<Matrix>> {
    cue_conv_cached(enc, cues).map(|(h, _)| h)
}

pub struct CrossStageCache {
    hidden: Vec<Matrix>,
    qs: Vec<Matrix>,
    ks: Vec<Matrix>,
    vs: Vec<Matrix>,
    maps: Vec<Matrix>,
    ln: Vec<Vec<LayerNormCache>>,
}

/// Cross-cue enhancement: each cue queries every other cue, attention terms
/// are summed onto the residual, and rows pass through a per-cue layer norm.
pub fn cross_enhance_cached(
    enc: &VideoEncoder,
    hidden: &[Matrix],
) -> Result<(Vec<Matrix>, CrossStageCache)> {
    if hidden.len() != CUE_COUNT {
        return Err(Error::Dimension("expected four cue streams".into()));
    }
    let n_pairs = CUE_COUNT * (CUE_COUNT - 1);
    let mut qs = vec![Matrix::zeros(0, 0); n_pairs];
    let mut ks = vec![Matrix::zeros(0, 0); n_pairs];
    let mut vs = vec![Matrix::zeros(0, 0); n_pairs];
    let mut maps = vec![Matrix::zeros(0, 0); n_pairs];
    let mut out = Vec::with_capacity(CUE_COUNT);
    let mut ln_caches = Vec::with_capacity(CUE_COUNT);
    for m in 0..CUE_COUNT {
        let mut sum = hidden[m].clone();
        for n in 0..CUE_COUNT {
            if n == m {
                continue;
            }
            let pi = pair_idx(m, n);
            let kv = enc.kv_idx(m, n);
            let q = hidden[m].matmul(&enc.cross_q[pi].value);
            let k = hidden[n].matmul(&enc.cross_k[kv].value);
            let v = hidden[n].matmul(&enc.cross_v[kv].value);
            let (attn, s) = attn_single(&q, &k, &v);
            sum.add_assign(&attn);
            qs[pi] = q;
            ks[pi] = k;
            vs[pi] = v;
            maps[pi] = s;
        }
        let mut enhanced = Matrix::zeros(sum.rows(), enc.d_cue);
        let mut caches = Vec::with_capacity(sum.rows());
        for r in 0..sum.rows() {
            let (y, c) = layer_norm_fwd(
                sum.row(r),
                enc.ln_gain[m].value.row(0),
                enc.ln_bias[m].value.row(0),
                LN_EPS,
            );
            enhanced.row_mut(r).copy_from_slice(&y);
            caches.push(c);
        }
        out.push(enhanced);
        ln_caches.push(caches);
    }
    Ok((
        out,
        CrossStageCache {
            hidden: hidden.to_vec(),
            qs,
            ks,
            vs,
            maps,
            ln: ln_caches,
        },
    ))
}

pub fn cross_enhance(enc: &VideoEncoder, hidden: &[Matrix]) -> Result<Vec<Matrix>> {
    cross_enhance_cached(enc, hidden).map(|(h, _)| h)
}

pub struct SelfStageCache {
    enhanced: Vec<Matrix>,
    qs: Vec<Matrix>,
    ks: Vec<Matrix>,
    vs: Vec<Matrix>,
    maps: Vec<Matrix>,
}

/// Per-cue self-attention over time followed by temporal mean pooling; the
/// four pooled vectors stack into one `4 x d_cue` block.
pub fn self_concat_cached(
    enc: &VideoEncoder,
    enhanced: &[Matrix],
) -> Result<(Matrix, SelfStageCache)> {
    if enhanced.len() != CUE_COUNT {
        return Err(Error::Dimension("expected four enhanced streams".into()));
    }
    let mut pooled = Matrix::zeros(CUE_COUNT, enc.d_cue);
    let mut qs = Vec::with_capacity(CUE_COUNT);
    let mut ks = Vec::with_capacity(CUE_COUNT);
    let mut vs = Vec::with_capacity(CUE_COUNT);
    let mut maps = Vec::with_capacity(CUE_COUNT);
    for m in 0..CUE_COUNT {
        let q = enhanced[m].matmul(&enc.self_q[m].value);
        let k = enhanced[m].matmul(&enc.self_k[m].value);
        let v = enhanced[m].matmul(&enc.self_v[m].value);
        let (attn, s) = attn_single(&q, &k, &v);
        let t = attn.rows() as f64;
        for r in 0..attn.rows() {
            for c in 0..enc.d_cue {
                let cur = pooled.at(m, c);
                pooled.set(m, c, cur + attn.at(r, c) / t);
            }
        }
        qs.push(q);
        ks.push(k);
        vs.push(v);
        maps.push(s);
    }
    Ok((
        pooled,
        SelfStageCache {
            enhanced: enhanced.to_vec(),
            qs,
            ks,
            vs,
            maps,
        },
    ))
}

pub fn self_concat(enc: &VideoEncoder, enhanced: &[Matrix]) -> Result<Matrix> {
    self_concat_cached(enc, enhanced).map(|(p, _)| p)
}

pub struct VideoEncCache {
    conv: ConvStageCache,
    cross: CrossStageCache,
    selfa: SelfStageCache,
    pooled_flat: Matrix,
}

impl VideoEncoder {
    /// Full forward: conv → cross-enhance → self-attend/pool → adapter.
    pub fn forward_cached(&self, cues: &CueSet) -> Result<(Matrix, VideoEncCache)> {
        let (hidden, conv_cache) = cue_conv_cached(self, cues)?;
        let (enhanced, cross_cache) = cross_enhance_cached(self, &hidden)?;
        let (pooled, self_cache) = self_concat_cached(self, &enhanced)?;
        let flat = pooled.flatten_row();
        let tokens = self.adapter.forward(&flat).reshaped(self.n_f, self.d_f)?;
        Ok((
            tokens,
            VideoEncCache {
                conv: conv_cache,
                cross: cross_cache,
                selfa: self_cache,
                pooled_flat: flat,
            },
        ))
    }

    pub fn encode(&self, cues: &CueSet) -> Result<Matrix> {
        self.forward_cached(cues).map(|(t, _)| t)
    }

    pub fn encode_video(&self, cues: &CueSet) -> Result<ModalityTokens> {
        Ok(ModalityTokens::present(self.encode(cues)?))
    }

    pub fn backward(&mut self, cache: &VideoEncCache, d_tokens: &Matrix) {
        let d_flat_out = d_tokens.flatten_row();
        let d_flat = self.adapter.backward(&cache.pooled_flat, &d_flat_out);
        let d_pooled = d_flat.reshaped(CUE_COUNT, self.d_cue).expect("pooled shape");

        // Self-attention stage.
        let mut d_enhanced: Vec<Matrix> = cache
            .selfa
            .enhanced
            .iter()
            .map(|e| Matrix::zeros(e.rows(), e.cols()))
            .collect();
        for m in 0..CUE_COUNT {
            let t = cache.selfa.enhanced[m].rows();
            let mut d_attn = Matrix::zeros(t, self.d_cue);
            for r in 0..t {
                for c in 0..self.d_cue {
                    d_attn.set(r, c, d_pooled.at(m, c) / t as f64);
                }
            }
            let (d_q, d_k, d_v) = attn_single_backward(
                &d_attn,
                &cache.selfa.qs[m],
                &cache.selfa.ks[m],
                &cache.selfa.vs[m],
                &cache.selfa.maps[m],
            );
            let e = &cache.selfa.enhanced[m];
            self.self_q[m].grad.add_assign(&e.matmul_at(&d_q));
            self.self_k[m].grad.add_assign(&e.matmul_at(&d_k));
            self.self_v[m].grad.add_assign(&e.matmul_at(&d_v));
            d_enhanced[m].add_assign(&d_q.matmul_bt(&self.self_q[m].value));
            d_enhanced[m].add_assign(&d_k.matmul_bt(&self.self_k[m].value));
            d_enhanced[m].add_assign(&d_v.matmul_bt(&self.self_v[m].value));
        }

        // Cross-enhancement stage: layer norm, then attention terms.
        let mut d_hidden: Vec<Matrix> = cache
            .cross
            .hidden
            .iter()
            .map(|h| Matrix::zeros(h.rows(), h.cols()))
            .collect();
        for m in 0..CUE_COUNT {
            let t = d_enhanced[m].rows();
            let mut dgain = vec![0.0; self.d_cue];
            let mut dbias = vec![0.0; self.d_cue];
            let mut d_sum = Matrix::zeros(t, self.d_cue);
            for r in 0..t {
                let back = layer_norm_backward(
                    &cache.cross.ln[m][r],
                    self.ln_gain[m].value.row(0),
                    d_enhanced[m].row(r),
                    &mut dgain,
                    &mut dbias,
                );
                d_sum.row_mut(r).copy_from_slice(&back);
            }
            for c in 0..self.d_cue {
                self.ln_gain[m].grad.row_mut(0)[c] += dgain[c];
                self.ln_bias[m].grad.row_mut(0)[c] += dbias[c];
            }
            // Residual path.
            d_hidden[m].add_assign(&d_sum);
            for n in 0..CUE_COUNT {
                if n == m {
                    continue;
                }
                let pi = pair_idx(m, n);
                let kv = self.kv_idx(m, n);
                let (d_q, d_k, d_v) = attn_single_backward(
                    &d_sum,
                    &cache.cross.qs[pi],
                    &cache.cross.ks[pi],
                    &cache.cross.vs[pi],
                    &cache.cross.maps[pi],
                );
                self.cross_q[pi]
                    .grad
                    .add_assign(&cache.cross.hidden[m].matmul_at(&d_q));
                self.cross_k[kv]
                    .grad
                    .add_assign(&cache.cross.hidden[n].matmul_at(&d_k));
                self.cross_v[kv]
                    .grad
                    .add_assign(&cache.cross.hidden[n].matmul_at(&d_v));
                d_hidden[m].add_assign(&d_q.matmul_bt(&self.cross_q[pi].value));
                d_hidden[n].add_assign(&d_k.matmul_bt(&self.cross_k[kv].value));
                d_hidden[n].add_assign(&d_v.matmul_bt(&self.cross_v[kv].value));
            }
        }

        // Convolution stage; input gradients stay unused (cues are data).
        for m in 0..CUE_COUNT {
            let kernel = self.convs[m].kernel();
            let mut d_bias = vec![0.0; self.d_cue];
            let _ = conv1d_backward(
                &cache.conv.inputs[m],
                &kernel,
                1,
                Padding::Same,
                &d_hidden[m],
                &mut self.convs[m].weight.grad,
                &mut d_bias,
            );
            for (g, &d) in self.convs[m]
                .bias
                .grad
                .row_mut(0)
                .iter_mut()
                .zip(d_bias.iter())
            {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, GradCheckCfg, ParamGroup, RngSeed};

    fn small_dims() -> CueDims {
        CueDims {
            f2d: 6,
            gaze: 3,
            hp: 2,
            au: 4,
        }
    }

    fn small_encoder(seed: u64, share: bool) -> VideoEncoder {
        let mut rng = RngSeed(seed).stream();
        VideoEncoder::init(small_dims(), 4, 3, 2, 5, share, &mut rng)
    }

    fn random_cues(seed: u64, t: usize) -> CueSet {
        let mut rng = RngSeed(seed).stream();
        let d = small_dims();
        let mut gen = |c: usize| Matrix::from_fn(t, c, |_, _| rng.uniform(-1.0, 1.0));
        CueSet {
            f2d: gen(d.f2d),
            gaze: gen(d.gaze),
            hp: gen(d.hp),
            au: gen(d.au),
            fps: 30.0,
        }
    }

    fn constant_cues(t: usize, value: f64) -> CueSet {
        let d = small_dims();
        CueSet {
            f2d: Matrix::filled(t, d.f2d, value),
            gaze: Matrix::filled(t, d.gaze, value),
            hp: Matrix::filled(t, d.hp, value),
            au: Matrix::filled(t, d.au, value),
            fps: 30.0,
        }
    }

    #[test]
    fn zero_cues_give_conv_bias_rows() {
        let enc = small_encoder(1, false);
        let cues = constant_cues(5, 0.0);
        let hidden = cue_conv(&enc, &cues).unwrap();
        for (m, h) in hidden.iter().enumerate() {
            for r in 0..h.rows() {
                assert_eq!(h.row(r), enc.convs[m].bias.value.row(0));
            }
        }
    }

    #[test]
    fn width_one_conv_is_per_frame_linear_map() {
        let mut rng = RngSeed(2).stream();
        let enc = VideoEncoder::init(small_dims(), 4, 1, 2, 5, false, &mut rng);
        let cues = random_cues(3, 4);
        let hidden = cue_conv(&enc, &cues).unwrap();
        for r in 0..4 {
            let frame = Matrix::from_vec(1, 6, cues.f2d.row(r).to_vec()).unwrap();
            let mut oracle = frame.matmul(&enc.convs[0].weight.value);
            oracle.add_row_broadcast(enc.convs[0].bias.value.row(0));
            for c in 0..4 {
                assert!((hidden[0].at(r, c) - oracle.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cue_conv_matches_sliding_window_oracle() {
        let enc = small_encoder(4, false);
        let cues = random_cues(5, 6);
        let hidden = cue_conv(&enc, &cues).unwrap();
        for m in 0..CUE_COUNT {
            let oracle = conv1d(cues.cue(m), &enc.convs[m].kernel(), 1, Padding::Same).unwrap();
            for (a, b) in hidden[m].data().iter().zip(oracle.data().iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cue_conv_rejects_length_mismatch() {
        let enc = small_encoder(5, false);
        let mut cues = random_cues(6, 4);
        cues.gaze = Matrix::zeros(3, 3);
        assert!(cue_conv(&enc, &cues).is_err());
    }

    #[test]
    fn single_frame_cross_attention_is_value_projection() {
        let enc = small_encoder(6, false);
        let hidden: Vec<Matrix> = (0..CUE_COUNT)
            .map(|i| {
                let mut rng = RngSeed(10 + i as u64).stream();
                Matrix::from_fn(1, 4, |_, _| rng.uniform(-1.0, 1.0))
            })
            .collect();
        let (out, cache) = cross_enhance_cached(&enc, &hidden).unwrap();
        // With one key the softmax weight is 1, so each attention term is the
        // value projection of the source cue's sole frame.
        for m in 0..CUE_COUNT {
            let mut sum = hidden[m].clone();
            for n in 0..CUE_COUNT {
                if n == m {
                    continue;
                }
                sum.add_assign(&hidden[n].matmul(&enc.cross_v[pair_idx(m, n)].value));
            }
            let oracle = crate::tensor::layer_norm(
                sum.row(0),
                enc.ln_gain[m].value.row(0),
                enc.ln_bias[m].value.row(0),
                LN_EPS,
            )
            .unwrap();
            for c in 0..4 {
                assert!((out[m].at(0, c) - oracle[c]).abs() < 1e-12);
            }
        }
        assert_eq!(cache.maps[0].rows(), 1);
    }

    #[test]
    fn identical_cues_and_projections_give_identical_attention_terms() {
        let mut enc = small_encoder(7, false);
        let shared_q = enc.cross_q[0].value.clone();
        let shared_k = enc.cross_k[0].value.clone();
        let shared_v = enc.cross_v[0].value.clone();
        for i in 0..enc.cross_q.len() {
            enc.cross_q[i].value = shared_q.clone();
            enc.cross_k[i].value = shared_k.clone();
            enc.cross_v[i].value = shared_v.clone();
        }
        let mut rng = RngSeed(8).stream();
        let h = Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0));
        let hidden: Vec<Matrix> = (0..CUE_COUNT).map(|_| h.clone()).collect();
        let (_, cache) = cross_enhance_cached(&enc, &hidden).unwrap();
        // All 12 attention maps coincide, so the three terms per cue do too.
        let first = &cache.maps[0];
        for map in &cache.maps[1..] {
            for (a, b) in map.data().iter().zip(first.data().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_enhance_matches_pairwise_loop_oracle() {
        let enc = small_encoder(9, false);
        let mut rng = RngSeed(19).stream();
        let hidden: Vec<Matrix> = (0..CUE_COUNT)
            .map(|_| Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let (out, _) = cross_enhance_cached(&enc, &hidden).unwrap();
        for m in 0..CUE_COUNT {
            let mut sum = hidden[m].clone();
            for n in 0..CUE_COUNT {
                if n == m {
                    continue;
                }
                let pi = pair_idx(m, n);
                let q = hidden[m].matmul(&enc.cross_q[pi].value);
                let k = hidden[n].matmul(&enc.cross_k[pi].value);
                let v = hidden[n].matmul(&enc.cross_v[pi].value);
                let scale = 1.0 / 2.0; // 1/sqrt(d_cue = 4)
                for i in 0..3 {
                    let mut scores = vec![0.0; 3];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..4 {
                            acc += q.at(i, c) * k.at(j, c);
                        }
                        *s = acc * scale;
                    }
                    let sm = crate::tensor::softmax(&scores).unwrap();
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for j in 0..3 {
                            acc += sm[j] * v.at(j, c);
                        }
                        let cur = sum.at(i, c);
                        sum.set(i, c, cur + acc);
                    }
                }
            }
            for r in 0..3 {
                let oracle = crate::tensor::layer_norm(
                    sum.row(r),
                    enc.ln_gain[m].value.row(0),
                    enc.ln_bias[m].value.row(0),
                    LN_EPS,
                )
                .unwrap();
                for c in 0..4 {
                    assert!((out[m].at(r, c) - oracle[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_value_projections_leave_pure_residual_norm() {
        let mut enc = small_encoder(11, false);
        for p in enc.cross_v.iter_mut() {
            p.value = Matrix::zeros(4, 4);
        }
        let mut rng = RngSeed(12).stream();
        let hidden: Vec<Matrix> = (0..CUE_COUNT)
            .map(|_| Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let out = cross_enhance(&enc, &hidden).unwrap();
        for m in 0..CUE_COUNT {
            for r in 0..3 {
                let oracle = crate::tensor::layer_norm(
                    hidden[m].row(r),
                    enc.ln_gain[m].value.row(0),
                    enc.ln_bias[m].value.row(0),
                    LN_EPS,
                )
                .unwrap();
                for c in 0..4 {
                    assert_eq!(out[m].at(r, c), oracle[c]);
                }
            }
        }
    }

    #[test]
    fn single_frame_self_attention_pools_to_value_projection() {
        let enc = small_encoder(13, false);
        let mut rng = RngSeed(14).stream();
        let enhanced: Vec<Matrix> = (0..CUE_COUNT)
            .map(|_| Matrix::from_fn(1, 4, |_, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let pooled = self_concat(&enc, &enhanced).unwrap();
        for m in 0..CUE_COUNT {
            let oracle = enhanced[m].matmul(&enc.self_v[m].value);
            for c in 0..4 {
                assert!((pooled.at(m, c) - oracle.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_frames_pool_to_single_frame_result() {
        let enc = small_encoder(15, false);
        let mut rng = RngSeed(16).stream();
        let single: Vec<Matrix> = (0..CUE_COUNT)
            .map(|_| Matrix::from_fn(1, 4, |_, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let doubled: Vec<Matrix> = single
            .iter()
            .map(|m| Matrix::from_rows(&[m.row(0).to_vec(), m.row(0).to_vec()]).unwrap())
            .collect();
        let p1 = self_concat(&enc, &single).unwrap();
        let p2 = self_concat(&enc, &doubled).unwrap();
        for (a, b) in p1.data().iter().zip(p2.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_concat_matches_attention_then_mean_oracle() {
        let enc = small_encoder(17, false);
        let mut rng = RngSeed(18).stream();
        let enhanced: Vec<Matrix> = (0..CUE_COUNT)
            .map(|_| Matrix::from_fn(4, 4, |_, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let pooled = self_concat(&enc, &enhanced).unwrap();
        for m in 0..CUE_COUNT {
            let q = enhanced[m].matmul(&enc.self_q[m].value);
            let k = enhanced[m].matmul(&enc.self_k[m].value);
            let v = enhanced[m].matmul(&enc.self_v[m].value);
            let (attn, _) = attn_single(&q, &k, &v);
            for c in 0..4 {
                let mean: f64 = (0..4).map(|r| attn.at(r, c)).sum::<f64>() / 4.0;
                assert!((pooled.at(m, c) - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_always_n_f_tokens() {
        let enc = small_encoder(20, false);
        for t in [1, 3, 9] {
            let cues = random_cues(40 + t as u64, t);
            let a = enc.encode(&cues).unwrap();
            let b = enc.encode(&cues).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.rows(), a.cols()), (2, 5));
        }
    }

    #[test]
    fn constant_cues_give_length_invariant_tokens() {
        let enc = small_encoder(21, false);
        let t5 = enc.encode(&constant_cues(5, 0.7)).unwrap();
        let t9 = enc.encode(&constant_cues(9, 0.7)).unwrap();
        for (a, b) in t5.data().iter().zip(t9.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_matches_composed_stage_oracles() {
        let enc = small_encoder(22, false);
        let cues = random_cues(23, 5);
        let tokens = enc.encode(&cues).unwrap();
        let hidden = cue_conv(&enc, &cues).unwrap();
        let enhanced = cross_enhance(&enc, &hidden).unwrap();
        let pooled = self_concat(&enc, &enhanced).unwrap();
        let oracle = enc
            .adapter
            .forward(&pooled.flatten_row())
            .reshaped(2, 5)
            .unwrap();
        for (a, b) in tokens.data().iter().zip(oracle.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    struct VidTest {
        enc: VideoEncoder,
        cues: CueSet,
        probe: Matrix,
    }

    impl ParamGroup for VidTest {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            self.enc.visit("video", f);
        }
    }

    #[test]
    fn end_to_end_gradients_check_out() {
        for share in [false, true] {
            let enc = small_encoder(24, share);
            let cues = random_cues(25, 4);
            let mut rng = RngSeed(26).stream();
            let probe = Matrix::from_fn(2, 5, |_, _| rng.uniform(-1.0, 1.0));
            let mut t = VidTest { enc, cues, probe };
            let (out, cache) = t.enc.forward_cached(&t.cues).unwrap();
            assert!(out.all_finite());
            let d = t.probe.clone();
            t.enc.backward(&cache, &d);
            let err = check_gradients(
                &mut t,
                &mut |m: &mut VidTest| m.enc.encode(&m.cues).unwrap().dot(&m.probe),
                &GradCheckCfg::default(),
                &|_| true,
            )
            .unwrap();
            assert!(err < 1e-3, "share={share}: max rel error {err}");
        }
    }
}
