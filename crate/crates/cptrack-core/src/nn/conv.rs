//! Same-padded 1-D convolution along the sequence axis.

use rand::Rng;

use super::linalg::{broadcast_bias, colsum_acc, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{glorot_uniform, NnError, SeqBatch, Tensor};

/// 1-D convolution with kernel `[k x d_in x f]` and bias `[f]`.
///
/// The kernel width `k` must be odd; the output has the same number of
/// steps as the input, with zero padding at the edges. Output position `t`
/// mixes inputs `t - k/2 ..= t + k/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn zeros(k: usize, d_in: usize, filters: usize) -> Self {
        Conv1d {
            kernel: Tensor::zeros(&[k, d_in, filters]),
            bias: Tensor::zeros(&[filters]),
        }
    }

    /// Glorot-initialized kernel, zero bias.
    pub fn init(k: usize, d_in: usize, filters: usize, rng: &mut impl Rng) -> Self {
        Conv1d {
            kernel: glorot_uniform(rng, &[k, d_in, filters], k * d_in, k * filters),
            bias: Tensor::zeros(&[filters]),
        }
    }

    pub fn width(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.kernel.shape()[2]
    }

    fn check_input(&self, x: &SeqBatch) -> Result<(), NnError> {
        if x.dim != self.d_in() {
            return Err(NnError::shape("conv1d", "input feature width"));
        }
        if self.width() % 2 == 0 {
            return Err(NnError::shape("conv1d", "kernel width must be odd"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &SeqBatch) -> Result<SeqBatch, NnError> {
        self.check_input(x)?;
        let (steps, batch) = (x.steps, x.batch);
        let (k, d, f) = (self.width(), self.d_in(), self.filters());
        let half = k / 2;
        let mut out = SeqBatch::zeros(steps, batch, f);
        for t in 0..steps {
            broadcast_bias(self.bias.data(), out.step_mut(t), batch, f);
            for tap in 0..k {
                let src = t as isize + tap as isize - half as isize;
                if src < 0 || src >= steps as isize {
                    continue;
                }
                let ker = &self.kernel.data()[tap * d * f..(tap + 1) * d * f];
                matmul_acc(x.step(src as usize), ker, out.step_mut(t), batch, d, f);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient. `dy` is the adjoint of the forward output.
    pub fn backward(
        &self,
        x: &SeqBatch,
        dy: &SeqBatch,
        grads: &mut Conv1d,
    ) -> Result<SeqBatch, NnError> {
        self.check_input(x)?;
        if dy.steps != x.steps || dy.batch != x.batch || dy.dim != self.filters() {
            return Err(NnError::shape("conv1d", "adjoint shape"));
        }
        let (steps, batch) = (x.steps, x.batch);
        let (k, d, f) = (self.width(), self.d_in(), self.filters());
        let half = k / 2;
        let mut dx = SeqBatch::zeros(steps, batch, d);
        for t in 0..steps {
            colsum_acc(dy.step(t), grads.bias.data_mut(), batch, f);
            for tap in 0..k {
                let src = t as isize + tap as isize - half as isize;
                if src < 0 || src >= steps as isize {
                    continue;
                }
                let src = src as usize;
                let gk = &mut grads.kernel.data_mut()[tap * d * f..(tap + 1) * d * f];
                matmul_at_acc(x.step(src), dy.step(t), gk, batch, d, f);
                let ker = &self.kernel.data()[tap * d * f..(tap + 1) * d * f];
                matmul_bt_acc(dy.step(t), ker, dx.step_mut(src), batch, d, f);
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn seq(steps: usize, dim: usize, vals: &[f64]) -> SeqBatch {
        SeqBatch {
            steps,
            batch: 1,
            dim,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // k = 1, d_in = f = 2, kernel = identity, zero bias.
        let mut conv = Conv1d::zeros(1, 2, 2);
        conv.kernel.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = seq(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn impulse_reproduces_kernel_taps() {
        // Single input feature, single filter, k = 3.
        let mut conv = Conv1d::zeros(3, 1, 1);
        conv.kernel.data_mut().copy_from_slice(&[0.25, 0.5, 0.125]);
        // Impulse at t = 2 of a length-5 sequence.
        let x = seq(5, 1, &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = conv.forward(&x).unwrap();
        // out[t] = sum_tap ker[tap] * x[t + tap - 1]; the impulse shows up
        // reversed around t = 2.
        assert_eq!(y.data, vec![0.0, 0.125, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn random_case_matches_naive_convolution() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (steps, d, f, k) = (6, 3, 4, 3);
        let conv = Conv1d::init(k, d, f, &mut rng);
        let x = SeqBatch {
            steps,
            batch: 1,
            dim: d,
            data: (0..steps * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let y = conv.forward(&x).unwrap();
        let half = k / 2;
        for t in 0..steps {
            for j in 0..f {
                let mut acc = conv.bias.data()[j];
                for tap in 0..k {
                    let src = t as isize + tap as isize - half as isize;
                    if src < 0 || src >= steps as isize {
                        continue;
                    }
                    for c in 0..d {
                        acc += x.at(src as usize, 0, c)
                            * conv.kernel.data()[(tap * d + c) * f + j];
                    }
                }
                assert!((y.at(t, 0, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_input_width() {
        let conv = Conv1d::zeros(3, 2, 1);
        let x = seq(2, 3, &[0.0; 6]);
        assert!(conv.forward(&x).is_err());
    }
}
