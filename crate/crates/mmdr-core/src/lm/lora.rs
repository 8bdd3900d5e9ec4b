//! Low-rank adapters: trainable deltas added onto frozen base projections.

use crate::tensor::{Matrix, Param, SeededRng};
use serde::{Deserialize, Serialize};

/// Projections an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    FfIn,
    FfOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::FfIn,
        LoraTarget::FfOut,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::FfIn => "ff_in",
            LoraTarget::FfOut => "ff_out",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            LoraTarget::Q => 0,
            LoraTarget::K => 1,
            LoraTarget::V => 2,
            LoraTarget::O => 3,
            LoraTarget::FfIn => 4,
            LoraTarget::FfOut => 5,
        }
    }
}

/// One adapter: `delta = (alpha / rank) * A · B` with `B` zero-initialized so
/// a fresh adapter leaves the base map untouched.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Self {
        LoraAdapter {
            a: Param::new(rng.init_matrix(d_in, rank, d_in)),
            b: Param::new(Matrix::zeros(rank, d_out)),
            rank,
            alpha,
            dropout,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    /// Adapter-branch input after dropout.
    pub xa: Matrix,
    /// `xa · A`.
    pub u: Matrix,
    /// Inverted-dropout keep mask scaled by 1/(1-p); empty when unused.
    pub drop_scale: Vec<f64>,
}

/// `y = x · base (+ bias) + scale * dropout(x) · A · B`; dropout applies to
/// the adapter branch during training only.
pub fn lora_forward(
    x: &Matrix,
    base: &Matrix,
    bias: Option<&[f64]>,
    adapter: Option<&LoraAdapter>,
    train: bool,
    rng: Option<&mut SeededRng>,
) -> (Matrix, Option<LoraCache>) {
    let mut y = x.matmul(base);
    if let Some(b) = bias {
        y.add_row_broadcast(b);
    }
    let Some(ad) = adapter else {
        return (y, None);
    };
    let (xa, drop_scale) = if train && ad.dropout > 0.0 {
        let rng = rng.expect("training dropout needs an rng");
        let keep = 1.0 - ad.dropout;
        let mut scale = vec![0.0; x.len()];
        let mut xa = x.clone();
        for (i, v) in xa.data_mut().iter_mut().enumerate() {
            if rng.unit() < keep {
                scale[i] = 1.0 / keep;
                *v *= scale[i];
            } else {
                scale[i] = 0.0;
                *v = 0.0;
            }
        }
        (xa, scale)
    } else {
        (x.clone(), Vec::new())
    };
    let u = xa.matmul(&ad.a.value);
    let delta = u.matmul(&ad.b.value).scale(ad.scale());
    y.add_assign(&delta);
    (y, Some(LoraCache { xa, u, drop_scale }))
}

/// Backward of `lora_forward`. Accumulates base/bias grads into the provided
/// buffers and adapter grads in place; returns d_x.
pub fn lora_backward(
    x: &Matrix,
    base: &Matrix,
    d_base: &mut Matrix,
    d_bias: Option<&mut Matrix>,
    adapter: Option<&mut LoraAdapter>,
    cache: Option<&LoraCache>,
    d_y: &Matrix,
) -> Matrix {
    d_base.add_assign(&x.matmul_at(d_y));
    if let Some(db) = d_bias {
        for r in 0..d_y.rows() {
            for (g, &d) in db.row_mut(0).iter_mut().zip(d_y.row(r)) {
                *g += d;
            }
        }
    }
    let mut d_x = d_y.matmul_bt(base);
    if let (Some(ad), Some(c)) = (adapter, cache) {
        let s = ad.scale();
        let d_u = d_y.matmul_bt(&ad.b.value).scale(s);
        ad.b.grad.add_assign(&c.u.matmul_at(d_y).scale(s));
        ad.a.grad.add_assign(&c.xa.matmul_at(&d_u));
        let mut d_xa = d_u.matmul_bt(&ad.a.value);
        if !c.drop_scale.is_empty() {
            for (v, &m) in d_xa.data_mut().iter_mut().zip(c.drop_scale.iter()) {
                *v *= m;
            }
        }
        d_x.add_assign(&d_xa);
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;

    #[test]
    fn zero_init_b_matches_base_exactly() {
        let mut rng = RngSeed(1).stream();
        let base = rng.init_matrix(6, 6, 6);
        let ad = LoraAdapter::init(6, 6, 2, 16.0, 0.05, &mut rng);
        let x = Matrix::from_fn(3, 6, |_, _| rng.uniform(-1.0, 1.0));
        let (with, _) = lora_forward(&x, &base, None, Some(&ad), false, None);
        let (without, _) = lora_forward(&x, &base, None, None, false, None);
        assert_eq!(with, without);
    }

    #[test]
    fn full_rank_cancellation_zeroes_the_output() {
        // A = I, B = -(r/alpha) * base gives delta = -base.
        let mut rng = RngSeed(2).stream();
        let base = rng.init_matrix(4, 4, 4);
        let mut ad = LoraAdapter::init(4, 4, 4, 16.0, 0.0, &mut rng);
        ad.a.value = Matrix::eye(4, 4);
        ad.b.value = base.scale(-(ad.rank as f64) / ad.alpha);
        let x = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (y, _) = lora_forward(&x, &base, None, Some(&ad), false, None);
        for v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_low_rank_product_oracle() {
        let mut rng = RngSeed(3).stream();
        let base = rng.init_matrix(5, 4, 5);
        let mut ad = LoraAdapter::init(5, 4, 3, 8.0, 0.0, &mut rng);
        for v in ad.b.value.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let x = Matrix::from_fn(3, 5, |_, _| rng.uniform(-1.0, 1.0));
        let (y, _) = lora_forward(&x, &base, None, Some(&ad), false, None);
        let effective = base.add(&ad.a.value.matmul(&ad.b.value).scale(ad.scale()));
        let oracle = x.matmul(&effective);
        for (a, b) in y.data().iter().zip(oracle.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_bites_in_training_mode() {
        let mut rng = RngSeed(4).stream();
        let base = rng.init_matrix(4, 4, 4);
        let mut ad = LoraAdapter::init(4, 4, 2, 16.0, 0.5, &mut rng);
        for v in ad.b.value.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let x = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (eval_a, _) = lora_forward(&x, &base, None, Some(&ad), false, None);
        let (eval_b, _) = lora_forward(&x, &base, None, Some(&ad), false, None);
        assert_eq!(eval_a, eval_b);
        let mut drop_rng = RngSeed(9).stream();
        let (train_out, cache) = lora_forward(&x, &base, None, Some(&ad), true, Some(&mut drop_rng));
        assert!(cache.unwrap().drop_scale.iter().any(|&m| m == 0.0));
        assert_ne!(train_out, eval_a);
    }

    #[test]
    fn backward_gradients_match_finite_differences() {
        let mut rng = RngSeed(5).stream();
        let base = rng.init_matrix(4, 3, 4);
        let mut ad = LoraAdapter::init(4, 3, 2, 16.0, 0.0, &mut rng);
        for v in ad.b.value.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let x = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let probe = Matrix::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let (_, cache) = lora_forward(&x, &base, None, Some(&ad), false, None);
        let mut d_base = Matrix::zeros(4, 3);
        let mut ad_mut = ad.clone();
        lora_backward(
            &x,
            &base,
            &mut d_base,
            None,
            Some(&mut ad_mut),
            cache.as_ref(),
            &probe,
        );
        let h = 1e-5;
        // Probe one entry of A and one of B.
        for (which, idx) in [(0, 3), (1, 2)] {
            let eval = |ad: &LoraAdapter| -> f64 {
                lora_forward(&x, &base, None, Some(ad), false, None)
                    .0
                    .dot(&probe)
            };
            let mut plus = ad.clone();
            let mut minus = ad.clone();
            if which == 0 {
                plus.a.value.data_mut()[idx] += h;
                minus.a.value.data_mut()[idx] -= h;
            } else {
                plus.b.value.data_mut()[idx] += h;
                minus.b.value.data_mut()[idx] -= h;
            }
            let central = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = if which == 0 {
                ad_mut.a.grad.data()[idx]
            } else {
                ad_mut.b.grad.data()[idx]
            };
            let rel = (analytic - central).abs() / (central.abs() + 1e-8);
            assert!(rel < 1e-3, "which={which} rel={rel}");
        }
    }
}
