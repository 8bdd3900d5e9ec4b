//! Minimal dense numerical kernel: matrices, stable primitives with
//! hand-derived backward passes, seeded RNG, Adam, and the finite-difference
//! gradient checker.
//!
//! All arithmetic is 64-bit; forward passes are pure functions over immutable
//! inputs and deterministic for a fixed seed.

mod grad;
mod linear;
mod matrix;
mod ops;
mod optim;
mod param;
mod rng;

pub use grad::{check_gradients, GradCheckCfg};
pub use linear::Linear;
pub use matrix::Matrix;
pub(crate) use ops::softmax_unchecked;
pub use ops::{
    conv1d, conv1d_backward, gelu, gelu_backward, l2_normalize, l2_normalize_backward, layer_norm,
    layer_norm_backward, layer_norm_fwd, sigmoid, sigmoid_backward, softmax, softmax_backward,
    softmax_rows, Conv1dKernel, LayerNormCache, Padding,
};
pub use optim::{Adam, AdamCfg};
pub use param::{Param, ParamGroup};
pub use rng::{RngSeed, SeededRng};
