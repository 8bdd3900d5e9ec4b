//! Trainable parameter storage: every tensor keeps its gradient buffer next
//! to its value, and models expose them through a named visitor.

use crate::tensor::Matrix;

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Models enumerate their (name, tensor) pairs in a fixed, deterministic
/// order; the optimizer, checkpointing, and gradient checking all rely on it.
pub trait ParamGroup {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_scalars(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}
