//! Audio path: waveform → log-Mel frames → soft-assigned residual
//! aggregation over a learned codebook → adapter tokens.

use crate::error::{Error, Result};
use crate::fusion::ModalityTokens;
use crate::tensor::{
    l2_normalize, l2_normalize_backward, softmax_backward, softmax_unchecked, Linear, Matrix,
    Param, SeededRng,
};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Waveform {
    pub sample_rate_hz: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 40,
            win_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

/// Log-Mel frame sequence; `values` is `t x n_mels`.
#[derive(Debug, Clone)]
pub struct MelFrames {
    pub n_mels: usize,
    pub values: Matrix,
}

impl MelFrames {
    pub fn t(&self) -> usize {
        self.values.rows()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filters over the one-sided power spectrum:
/// `n_mels x (n_fft/2 + 1)` weights, peak 1 at each band center.
pub fn mel_filterbank(sample_rate_hz: u32, n_fft: usize, n_mels: usize) -> Matrix {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate_hz as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb.set(m, k, w);
        }
    }
    fb
}

/// Center frequency of one Mel band; used by the synthetic generator and
/// oracle tests.
pub fn mel_band_center_hz(sample_rate_hz: u32, n_mels: usize, band: usize) -> f64 {
    let mel_max = hz_to_mel(sample_rate_hz as f64 / 2.0);
    mel_to_hz(mel_max * (band + 1) as f64 / (n_mels + 1) as f64)
}

pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Log-Mel spectrogram: `t = 1 + floor((len - win) / hop)` frames of
/// `ln(mel_energy + 1e-6)`.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelFrames> {
    let sr = w.sample_rate_hz as f64;
    let win = (cfg.win_ms * sr / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * sr / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Config("window/hop too small for sample rate".into()));
    }
    if w.samples.len() < win {
        return Err(Error::Data(format!(
            "waveform too short: {} samples, need at least {win} for one window",
            w.samples.len()
        )));
    }
    let t = 1 + (w.samples.len() - win) / hop;
    let n_fft = win.next_power_of_two();
    let fb = mel_filterbank(w.sample_rate_hz, n_fft, cfg.n_mels);
    let window = hann_window(win);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut values = Matrix::zeros(t, cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in 0..t {
        let start = frame * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = if i < win {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        let n_bins = n_fft / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for (k, &p) in power.iter().enumerate() {
                e += fb.at(m, k) * p;
            }
            values.set(frame, m, (e + 1e-6).ln());
        }
    }
    Ok(MelFrames {
        n_mels: cfg.n_mels,
        values,
    })
}

/// Learned soft-assignment codebook: cluster centers plus the affine map
/// whose row-softmax produces assignment weights.
#[derive(Debug, Clone)]
pub struct VladCodebook {
    pub clusters: usize,
    pub n_mels: usize,
    /// `K x n_mels` cluster centers.
    pub centers: Param,
    /// `n_mels x K` assignment weights.
    pub assign_w: Param,
    /// `1 x K` assignment bias.
    pub assign_b: Param,
}

impl VladCodebook {
    pub fn init(clusters: usize, n_mels: usize, rng: &mut SeededRng) -> Self {
        VladCodebook {
            clusters,
            n_mels,
            centers: Param::new(rng.init_matrix(clusters, n_mels, n_mels)),
            assign_w: Param::new(rng.init_matrix(n_mels, clusters, n_mels)),
            assign_b: Param::new(rng.init_matrix(1, clusters, n_mels)),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.centers"), &mut self.centers);
        f(&format!("{prefix}.assign_w"), &mut self.assign_w);
        f(&format!("{prefix}.assign_b"), &mut self.assign_b);
    }
}

/// Doubly normalized residual aggregate; flattening has unit L2 norm unless
/// every residual vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    /// `K x n_mels`, intra-row then globally L2-normalized.
    pub vlad: Matrix,
}

/// Per-frame soft assignment over clusters; rows sum to 1.
pub fn soft_assign(frames: &MelFrames, cb: &VladCodebook) -> Result<Matrix> {
    if frames.n_mels != cb.n_mels {
        return Err(Error::Dimension(format!(
            "frames n_mels {} != codebook {}",
            frames.n_mels, cb.n_mels
        )));
    }
    let mut logits = frames.values.matmul(&cb.assign_w.value);
    logits.add_row_broadcast(cb.assign_b.value.row(0));
    let mut out = logits;
    for r in 0..out.rows() {
        let sm = softmax_unchecked(out.row(r));
        out.row_mut(r).copy_from_slice(&sm);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NetVladCache {
    pub assign: Matrix,
    pub raw: Matrix,
    pub intra: Matrix,
    pub frames: Matrix,
}

/// Soft-assigned residual accumulation with intra-cluster then global L2
/// normalization. Frame sums use compensated accumulation so reordering
/// frames moves the result by no more than ~1e-15 relative.
pub fn netvlad_cached(frames: &MelFrames, cb: &VladCodebook) -> Result<(AudioEmbedding, NetVladCache)> {
    let assign = soft_assign(frames, cb)?;
    let t = frames.t();
    let (k_n, d) = (cb.clusters, cb.n_mels);
    let mut raw = Matrix::zeros(k_n, d);
    for k in 0..k_n {
        let center = cb.centers.value.row(k);
        for dim in 0..d {
            // Kahan compensated sum over frames.
            let mut sum = 0.0;
            let mut comp = 0.0;
            for i in 0..t {
                let term = assign.at(i, k) * (frames.values.at(i, dim) - center[dim]);
                let y = term - comp;
                let tmp = sum + y;
                comp = (tmp - sum) - y;
                sum = tmp;
            }
            raw.set(k, dim, sum);
        }
    }
    let mut intra = Matrix::zeros(k_n, d);
    for k in 0..k_n {
        let n = l2_normalize(raw.row(k));
        intra.row_mut(k).copy_from_slice(&n);
    }
    let flat = l2_normalize(intra.data());
    let vlad = Matrix::from_vec(k_n, d, flat)?;
    Ok((
        AudioEmbedding { vlad },
        NetVladCache {
            assign,
            raw,
            intra,
            frames: frames.values.clone(),
        },
    ))
}

pub fn netvlad(frames: &MelFrames, cb: &VladCodebook) -> Result<AudioEmbedding> {
    netvlad_cached(frames, cb).map(|(e, _)| e)
}

/// Backpropagate d(embedding) into the codebook parameters.
pub fn netvlad_backward(
    cb: &mut VladCodebook,
    cache: &NetVladCache,
    embedding: &AudioEmbedding,
    d_vlad: &Matrix,
) {
    let (k_n, d) = (cb.clusters, cb.n_mels);
    let t = cache.frames.rows();
    // Global normalization.
    let d_intra_flat = l2_normalize_backward(cache.intra.data(), embedding.vlad.data(), d_vlad.data());
    let d_intra = Matrix::from_vec(k_n, d, d_intra_flat).expect("shape preserved");
    // Intra-cluster normalization per row.
    let mut d_raw = Matrix::zeros(k_n, d);
    for k in 0..k_n {
        let normalized = l2_normalize(cache.raw.row(k));
        let back = l2_normalize_backward(cache.raw.row(k), &normalized, d_intra.row(k));
        d_raw.row_mut(k).copy_from_slice(&back);
    }
    // Residual accumulation.
    let mut d_assign = Matrix::zeros(t, k_n);
    for k in 0..k_n {
        let center = cb.centers.value.row(k).to_vec();
        let drow = d_raw.row(k).to_vec();
        let assign_col_sum: f64 = (0..t).map(|i| cache.assign.at(i, k)).sum();
        for (g, &dr) in cb.centers.grad.row_mut(k).iter_mut().zip(drow.iter()) {
            *g -= assign_col_sum * dr;
        }
        for i in 0..t {
            let mut acc = 0.0;
            for dim in 0..d {
                acc += drow[dim] * (cache.frames.at(i, dim) - center[dim]);
            }
            d_assign.set(i, k, acc);
        }
    }
    // Softmax and the affine assignment map.
    let mut d_logits = Matrix::zeros(t, k_n);
    for i in 0..t {
        let back = softmax_backward(cache.assign.row(i), d_assign.row(i));
        d_logits.row_mut(i).copy_from_slice(&back);
    }
    cb.assign_w.grad.add_assign(&cache.frames.matmul_at(&d_logits));
    for i in 0..t {
        for (g, &dl) in cb.assign_b.grad.row_mut(0).iter_mut().zip(d_logits.row(i)) {
            *g += dl;
        }
    }
}

/// Full audio encoder: codebook aggregation plus a linear adapter onto the
/// shared `n_f x d_f` token geometry.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub codebook: VladCodebook,
    pub adapter: Linear,
    pub n_f: usize,
    pub d_f: usize,
}

#[derive(Debug, Clone)]
pub struct AudioEncCache {
    pub vlad_cache: NetVladCache,
    pub embedding: AudioEmbedding,
    pub flat: Matrix,
}

impl AudioEncoder {
    pub fn init(clusters: usize, n_mels: usize, n_f: usize, d_f: usize, rng: &mut SeededRng) -> Self {
        let codebook = VladCodebook::init(clusters, n_mels, rng);
        let adapter = Linear::init(clusters * n_mels, n_f * d_f, rng);
        AudioEncoder {
            codebook,
            adapter,
            n_f,
            d_f,
        }
    }

    pub fn forward_cached(&self, frames: &MelFrames) -> Result<(Matrix, AudioEncCache)> {
        let (embedding, vlad_cache) = netvlad_cached(frames, &self.codebook)?;
        let flat = embedding.vlad.flatten_row();
        let out = self.adapter.forward(&flat);
        let tokens = out.reshaped(self.n_f, self.d_f)?;
        Ok((
            tokens,
            AudioEncCache {
                vlad_cache,
                embedding,
                flat,
            },
        ))
    }

    pub fn encode(&self, frames: &MelFrames) -> Result<Matrix> {
        self.forward_cached(frames).map(|(t, _)| t)
    }

    /// Encode into fusion-layer tokens.
    pub fn encode_audio(&self, w: &Waveform, mel_cfg: &MelConfig) -> Result<ModalityTokens> {
        let frames = log_mel(w, mel_cfg)?;
        Ok(ModalityTokens::present(self.encode(&frames)?))
    }

    pub fn backward(&mut self, cache: &AudioEncCache, d_tokens: &Matrix) {
        let d_flat_out = d_tokens.flatten_row();
        let d_flat = self.adapter.backward(&cache.flat, &d_flat_out);
        let d_vlad = d_flat
            .reshaped(self.codebook.clusters, self.codebook.n_mels)
            .expect("adapter input shape");
        netvlad_backward(&mut self.codebook, &cache.vlad_cache, &cache.embedding, &d_vlad);
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.codebook.visit(&format!("{prefix}.codebook"), f);
        self.adapter.visit(&format!("{prefix}.adapter"), f);
    }
}
