//! Numerical primitives and their hand-derived backward passes.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Numerically stable softmax over one vector (max subtraction).
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Dimension("softmax of empty input".into()));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dimension("softmax of non-finite input".into()));
    }
    Ok(softmax_unchecked(xs))
}

pub(crate) fn softmax_unchecked(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// dL/dx for y = softmax(x): dx = y ⊙ (dy − ⟨dy, y⟩).
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    y.iter().zip(dy.iter()).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let sm = softmax_unchecked(m.row(r));
        out.row_mut(r).copy_from_slice(&sm);
    }
    out
}

/// Layer normalization of one vector with affine gain/bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Dimension(format!(
            "layer_norm dims x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Dimension("layer_norm of empty input".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Dimension("layer_norm eps must be positive".into()));
    }
    let (y, _) = layer_norm_fwd(x, gain, bias, eps);
    Ok(y)
}

/// Per-vector cache: normalized values and the inverse standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_fwd(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y: Vec<f64> = xhat
        .iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward for layer_norm_fwd. Returns dx; accumulates dgain/dbias in place.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = cache.xhat.len() as f64;
    // dxhat
    let dxhat: Vec<f64> = dy.iter().zip(gain.iter()).map(|(d, g)| d * g).collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(cache.xhat.iter())
        .map(|(d, xh)| d * xh)
        .sum::<f64>()
        / n;
    for i in 0..cache.xhat.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
    }
    cache
        .xhat
        .iter()
        .zip(dxhat.iter())
        .map(|(xh, dxh)| cache.inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

/// Global L2 normalization; the zero vector maps to the zero vector.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / norm).collect()
}

/// Backward for y = x/‖x‖: dx = (dy − y⟨y,dy⟩)/‖x‖; zero input gives zero grad.
pub fn l2_normalize_backward(x: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy.iter())
        .map(|(yi, di)| (di - yi * dot) / norm)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input length; out-of-range taps read the clamped
    /// edge frame, so constant sequences stay constant through the filter.
    Same,
    Valid,
}

/// One-dimensional convolution weights over a `time x ch_in` sequence.
///
/// `weight` is `(width * ch_in) x ch_out`; tap `w`'s block occupies rows
/// `w*ch_in .. (w+1)*ch_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dKernel {
    pub width: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Conv1dKernel {
    pub fn zeros(width: usize, ch_in: usize, ch_out: usize) -> Self {
        Conv1dKernel {
            width,
            ch_in,
            ch_out,
            weight: Matrix::zeros(width * ch_in, ch_out),
            bias: vec![0.0; ch_out],
        }
    }

    /// Width-1 kernel with a unit diagonal; passes the input through.
    pub fn identity(ch: usize) -> Self {
        Conv1dKernel {
            width: 1,
            ch_in: ch,
            ch_out: ch,
            weight: Matrix::eye(ch, ch),
            bias: vec![0.0; ch],
        }
    }
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    if i < 0 {
        0
    } else if i as usize >= len {
        len - 1
    } else {
        i as usize
    }
}

/// 1-D convolution along the time axis.
pub fn conv1d(seq: &Matrix, kernel: &Conv1dKernel, stride: usize, padding: Padding) -> Result<Matrix> {
    if seq.cols() != kernel.ch_in {
        return Err(Error::Dimension(format!(
            "conv1d channel mismatch: seq {} vs kernel {}",
            seq.cols(),
            kernel.ch_in
        )));
    }
    if seq.rows() == 0 || kernel.width == 0 || stride == 0 {
        return Err(Error::Dimension("conv1d needs time >= 1, width >= 1, stride >= 1".into()));
    }
    let time = seq.rows();
    let (t_out, left_pad) = match padding {
        Padding::Same => ((time + stride - 1) / stride, (kernel.width - 1) / 2),
        Padding::Valid => {
            if kernel.width > time {
                return Err(Error::Dimension(format!(
                    "conv1d kernel width {} exceeds sequence length {}",
                    kernel.width, time
                )));
            }
            ((time - kernel.width) / stride + 1, 0)
        }
    };
    let mut out = Matrix::zeros(t_out, kernel.ch_out);
    for (o, t) in (0..t_out).zip((0..).step_by(stride)) {
        let orow = out.row_mut(o);
        orow.copy_from_slice(&kernel.bias);
        for w in 0..kernel.width {
            let src = t as isize + w as isize - left_pad as isize;
            let src = match padding {
                Padding::Same => clamp_index(src, time),
                Padding::Valid => src as usize,
            };
            let xrow = seq.row(src);
            let wblock = w * kernel.ch_in;
            for (ci, &x) in xrow.iter().enumerate() {
                let wrow = kernel.weight.row(wblock + ci);
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += x * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of conv1d. Returns d_seq; accumulates d_weight/d_bias in place.
pub fn conv1d_backward(
    seq: &Matrix,
    kernel: &Conv1dKernel,
    stride: usize,
    padding: Padding,
    d_out: &Matrix,
    d_weight: &mut Matrix,
    d_bias: &mut [f64],
) -> Matrix {
    let time = seq.rows();
    let left_pad = match padding {
        Padding::Same => (kernel.width - 1) / 2,
        Padding::Valid => 0,
    };
    let mut d_seq = Matrix::zeros(time, kernel.ch_in);
    for (o, t) in (0..d_out.rows()).zip((0..).step_by(stride)) {
        let drow = d_out.row(o);
        for (db, &d) in d_bias.iter_mut().zip(drow.iter()) {
            *db += d;
        }
        for w in 0..kernel.width {
            let src = t as isize + w as isize - left_pad as isize;
            let src = match padding {
                Padding::Same => clamp_index(src, time),
                Padding::Valid => src as usize,
            };
            let xrow = seq.row(src);
            let wblock = w * kernel.ch_in;
            for ci in 0..kernel.ch_in {
                let wrow = kernel.weight.row(wblock + ci);
                let dwrow = d_weight.row_mut(wblock + ci);
                let x = xrow[ci];
                let mut acc = 0.0;
                for ((dw, &wv), &d) in dwrow.iter_mut().zip(wrow.iter()).zip(drow.iter()) {
                    *dw += x * d;
                    acc += wv * d;
                }
                d_seq.row_mut(src)[ci] += acc;
            }
        }
    }
    d_seq
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d sigmoid/dx expressed through the forward value s.
#[inline]
pub fn sigmoid_backward(s: f64) -> f64 {
    s * (1.0 - s)
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)

/// Tanh-approximation GELU; smooth, so finite differences stay clean.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_backward(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
