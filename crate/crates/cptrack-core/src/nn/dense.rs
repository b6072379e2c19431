//! Fully connected layer applied to a `[batch x d_in]` slab.

use rand::Rng;

use super::linalg::{broadcast_bias, colsum_acc, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{glorot_uniform, NnError, Tensor};

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[d_in x d_out]`.
    pub w: Tensor,
    /// `[d_out]`.
    pub b: Tensor,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: glorot_uniform(rng, &[d_in, d_out], d_in, d_out),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// `y = x W + b` for `x: [batch x d_in]`.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.len() != batch * d_in {
            return Err(NnError::shape("dense", "input slab length"));
        }
        let mut y = vec![0.0; batch * d_out];
        broadcast_bias(self.b.data(), &mut y, batch, d_out);
        matmul_acc(x, self.w.data(), &mut y, batch, d_in, d_out);
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        grads: &mut Dense,
    ) -> Result<Vec<f64>, NnError> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.len() != batch * d_in || dy.len() != batch * d_out {
            return Err(NnError::shape("dense", "backward slab length"));
        }
        matmul_at_acc(x, dy, grads.w.data_mut(), batch, d_in, d_out);
        colsum_acc(dy, grads.b.data_mut(), batch, d_out);
        let mut dx = vec![0.0; batch * d_in];
        matmul_bt_acc(dy, self.w.data(), &mut dx, batch, d_in, d_out);
        Ok(dx)
    }
}
