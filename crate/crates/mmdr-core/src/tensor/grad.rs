//! Central-difference gradient verification.
//!
//! Every backward pass in this crate is hand-derived; this harness is the
//! independent oracle that keeps them honest.

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, RngSeed};

#[derive(Debug, Clone)]
pub struct GradCheckCfg {
    /// Central-difference step; expected in [1e-6, 1e-3].
    pub h: f64,
    /// Entries probed per tensor; tensors at most this large are probed fully.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            h: 1e-4,
            max_entries_per_tensor: 8,
            seed: 0,
        }
    }
}

/// Compare analytic gradients (already accumulated in each `Param::grad`)
/// against central differences of `loss`.
///
/// Returns the max over probed entries of
/// `|analytic - central| / (|central| + 1e-8)`.
///
/// `filter` selects which named tensors participate; `loss` must evaluate the
/// scalar map at the model's current parameter values without touching grads.
pub fn check_gradients<M: ParamGroup>(
    model: &mut M,
    loss: &mut dyn FnMut(&mut M) -> f64,
    cfg: &GradCheckCfg,
    filter: &dyn Fn(&str) -> bool,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&cfg.h) {
        return Err(Error::Dimension(format!("step h={} outside [1e-6, 1e-3]", cfg.h)));
    }

    // Snapshot analytic gradients and tensor sizes in visit order.
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        if filter(name) {
            tensors.push((name.to_string(), p.grad.data().to_vec()));
        }
    });

    let mut rng = RngSeed(cfg.seed).stream();
    let mut max_rel = 0.0f64;
    for (name, analytic) in &tensors {
        let len = analytic.len();
        let entries: Vec<usize> = if len <= cfg.max_entries_per_tensor {
            (0..len).collect()
        } else {
            let mut picked = vec![0, len - 1];
            while picked.len() < cfg.max_entries_per_tensor {
                let i = rng.range(len);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked
        };
        for &i in &entries {
            let orig = read_entry(model, name, i);
            write_entry(model, name, i, orig + cfg.h);
            let plus = loss(model);
            write_entry(model, name, i, orig - cfg.h);
            let minus = loss(model);
            write_entry(model, name, i, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Dimension(format!(
                    "non-finite loss while probing {name}[{i}]"
                )));
            }
            let central = (plus - minus) / (2.0 * cfg.h);
            let rel = (analytic[i] - central).abs() / (central.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn read_entry<M: ParamGroup>(model: &mut M, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    model.visit_params(&mut |n, p| {
        if n == name {
            v = p.value.data()[i];
        }
    });
    v
}

fn write_entry<M: ParamGroup>(model: &mut M, name: &str, i: usize, v: f64) {
    model.visit_params(&mut |n, p| {
        if n == name {
            p.value.data_mut()[i] = v;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Param};

    struct Scalar {
        w: Param,
    }

    impl ParamGroup for Scalar {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("w", &mut self.w);
        }
    }

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(w) = w^2 at w = 3: analytic gradient 6.
        let mut m = Scalar {
            w: Param::new(Matrix::filled(1, 1, 3.0)),
        };
        m.w.grad.set(0, 0, 6.0);
        let err = check_gradients(
            &mut m,
            &mut |m: &mut Scalar| m.w.value.at(0, 0).powi(2),
            &GradCheckCfg::default(),
            &|_| true,
        )
        .unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn constant_map_has_zero_error() {
        let mut m = Scalar {
            w: Param::new(Matrix::filled(1, 1, 1.7)),
        };
        // Analytic gradient of a constant map is zero; grad buffer stays zero.
        let err = check_gradients(
            &mut m,
            &mut |_: &mut Scalar| 4.25,
            &GradCheckCfg::default(),
            &|_| true,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut m = Scalar {
            w: Param::new(Matrix::filled(1, 1, 1.0)),
        };
        let cfg = GradCheckCfg {
            h: 1e-2,
            ..GradCheckCfg::default()
        };
        assert!(check_gradients(&mut m, &mut |_: &mut Scalar| 0.0, &cfg, &|_| true).is_err());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut m = Scalar {
            w: Param::new(Matrix::filled(1, 1, 3.0)),
        };
        m.w.grad.set(0, 0, 5.0); // deliberately wrong; truth is 6
        let err = check_gradients(
            &mut m,
            &mut |m: &mut Scalar| m.w.value.at(0, 0).powi(2),
            &GradCheckCfg::default(),
            &|_| true,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
