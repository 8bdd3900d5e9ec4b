//! Affine layer building block shared by the encoders and fusion stages.

use crate::tensor::{Matrix, Param, SeededRng};

/// `y = x · w + b` with `w: input x output`, `b: 1 x output`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        Linear {
            w: Param::new(rng.init_matrix(input, output, input)),
            b: Param::new(rng.init_matrix(1, output, input)),
        }
    }

    pub fn zero(input: usize, output: usize) -> Self {
        Linear {
            w: Param::new(Matrix::zeros(input, output)),
            b: Param::new(Matrix::zeros(1, output)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w.value);
        y.add_row_broadcast(self.b.value.row(0));
        y
    }

    /// Accumulates dw/db, returns dx.
    pub fn backward(&mut self, x: &Matrix, d_y: &Matrix) -> Matrix {
        self.w.grad.add_assign(&x.matmul_at(d_y));
        for r in 0..d_y.rows() {
            for (g, &d) in self.b.grad.row_mut(0).iter_mut().zip(d_y.row(r)) {
                *g += d;
            }
        }
        d_y.matmul_bt(&self.w.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}
