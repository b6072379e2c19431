//! One-directional gated recurrent layer with backpropagation through time.
//!
//! Standard GRU cell:
//!
//! ```text
//! z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
//! r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
//! c_t = tanh   (x_t W_h + (r_t . h_{t-1}) U_h + b_h)
//! h_t = (1 - z_t) . h_{t-1} + z_t . c_t
//! ```
//!
//! Input weights are `[d_in x h]`, recurrent weights `[h x h]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::linalg::{broadcast_bias, colsum_acc, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{glorot_uniform, sigmoid, tanh, NnError, SeqBatch, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

/// Intermediates kept by [`GruLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    /// Hidden states `h_0 ..= h_T`, each `[batch x h]`.
    pub hs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub rs: Vec<Vec<f64>>,
    /// Candidate activations `c_t`.
    pub cs: Vec<Vec<f64>>,
}

impl GruLayer {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        GruLayer {
            wz: Tensor::zeros(&[d_in, hidden]),
            uz: Tensor::zeros(&[hidden, hidden]),
            bz: Tensor::zeros(&[hidden]),
            wr: Tensor::zeros(&[d_in, hidden]),
            ur: Tensor::zeros(&[hidden, hidden]),
            br: Tensor::zeros(&[hidden]),
            wh: Tensor::zeros(&[d_in, hidden]),
            uh: Tensor::zeros(&[hidden, hidden]),
            bh: Tensor::zeros(&[hidden]),
        }
    }

    /// Glorot-initialized weights, zero biases.
    pub fn init(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut w = |fan_in: usize| glorot_uniform(rng, &[fan_in, hidden], fan_in, hidden);
        let wz = w(d_in);
        let uz = w(hidden);
        let wr = w(d_in);
        let ur = w(hidden);
        let wh = w(d_in);
        let uh = w(hidden);
        GruLayer {
            wz,
            uz,
            bz: Tensor::zeros(&[hidden]),
            wr,
            ur,
            br: Tensor::zeros(&[hidden]),
            wh,
            uh,
            bh: Tensor::zeros(&[hidden]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.wz.shape()[1]
    }

    fn check_input(&self, x: &SeqBatch) -> Result<(), NnError> {
        if x.dim != self.d_in() {
            return Err(NnError::shape("gru", "input feature width"));
        }
        if x.steps == 0 {
            return Err(NnError::shape("gru", "empty sequence"));
        }
        Ok(())
    }

    /// Runs the layer over the whole batch, starting from `h_0 = 0`.
    ///
    /// Returns all hidden states `h_1 ..= h_T` as a sequence plus the cache
    /// needed by [`GruLayer::backward`].
    pub fn forward(&self, x: &SeqBatch) -> Result<(SeqBatch, GruCache), NnError> {
        self.check_input(x)?;
        let (steps, batch, h) = (x.steps, x.batch, self.hidden());
        let d = self.d_in();
        let slab = batch * h;

        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
        hs.push(vec![0.0; slab]);
        let mut zs = Vec::with_capacity(steps);
        let mut rs = Vec::with_capacity(steps);
        let mut cs = Vec::with_capacity(steps);
        let mut out = SeqBatch::zeros(steps, batch, h);

        let mut rh = vec![0.0; slab];
        for t in 0..steps {
            let x_t = x.step(t);
            let h_prev = hs[t].clone();

            let mut z = vec![0.0; slab];
            broadcast_bias(self.bz.data(), &mut z, batch, h);
            matmul_acc(x_t, self.wz.data(), &mut z, batch, d, h);
            matmul_acc(&h_prev, self.uz.data(), &mut z, batch, h, h);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));

            let mut r = vec![0.0; slab];
            broadcast_bias(self.br.data(), &mut r, batch, h);
            matmul_acc(x_t, self.wr.data(), &mut r, batch, d, h);
            matmul_acc(&h_prev, self.ur.data(), &mut r, batch, h, h);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));

            for i in 0..slab {
                rh[i] = r[i] * h_prev[i];
            }
            let mut c = vec![0.0; slab];
            broadcast_bias(self.bh.data(), &mut c, batch, h);
            matmul_acc(x_t, self.wh.data(), &mut c, batch, d, h);
            matmul_acc(&rh, self.uh.data(), &mut c, batch, h, h);
            c.iter_mut().for_each(|v| *v = tanh(*v));

            let mut h_t = vec![0.0; slab];
            for i in 0..slab {
                h_t[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
            }
            out.step_mut(t).copy_from_slice(&h_t);
            hs.push(h_t);
            zs.push(z);
            rs.push(r);
            cs.push(c);
        }

        Ok((out, GruCache { hs, zs, rs, cs }))
    }

    /// BPTT. `d_out` holds the adjoint of every hidden state `h_1 ..= h_T`;
    /// parameter gradients accumulate into `grads`; the input gradient is
    /// returned.
    pub fn backward(
        &self,
        x: &SeqBatch,
        cache: &GruCache,
        d_out: &SeqBatch,
        grads: &mut GruLayer,
    ) -> Result<SeqBatch, NnError> {
        self.check_input(x)?;
        if d_out.steps != x.steps || d_out.batch != x.batch || d_out.dim != self.hidden() {
            return Err(NnError::shape("gru", "adjoint shape"));
        }
        let (steps, batch, h) = (x.steps, x.batch, self.hidden());
        let d = self.d_in();
        let slab = batch * h;

        let mut dx = SeqBatch::zeros(steps, batch, d);
        // Adjoint carried to the previous step's hidden state.
        let mut carry = vec![0.0; slab];
        let mut rh = vec![0.0; slab];

        for t in (0..steps).rev() {
            let h_prev = &cache.hs[t];
            let z = &cache.zs[t];
            let r = &cache.rs[t];
            let c = &cache.cs[t];

            // dh_t = upstream adjoint + recurrent carry.
            let mut dh = carry;
            for (o, &u) in dh.iter_mut().zip(d_out.step(t).iter()) {
                *o += u;
            }

            // h_t = (1 - z) . h_prev + z . c
            let mut da_z = vec![0.0; slab];
            let mut da_c = vec![0.0; slab];
            let mut dh_prev = vec![0.0; slab];
            for i in 0..slab {
                let dz = dh[i] * (c[i] - h_prev[i]);
                da_z[i] = dz * z[i] * (1.0 - z[i]);
                let dc = dh[i] * z[i];
                da_c[i] = dc * (1.0 - c[i] * c[i]);
                dh_prev[i] = dh[i] * (1.0 - z[i]);
            }

            // c_t path: a_c = x W_h + (r . h_prev) U_h + b_h
            let mut d_rh = vec![0.0; slab];
            matmul_bt_acc(&da_c, self.uh.data(), &mut d_rh, batch, h, h);
            let mut da_r = vec![0.0; slab];
            for i in 0..slab {
                da_r[i] = d_rh[i] * h_prev[i] * r[i] * (1.0 - r[i]);
                dh_prev[i] += d_rh[i] * r[i];
            }

            matmul_bt_acc(&da_z, self.uz.data(), &mut dh_prev, batch, h, h);
            matmul_bt_acc(&da_r, self.ur.data(), &mut dh_prev, batch, h, h);

            let x_t = x.step(t);
            let dx_t = dx.step_mut(t);
            matmul_bt_acc(&da_z, self.wz.data(), dx_t, batch, d, h);
            matmul_bt_acc(&da_r, self.wr.data(), dx_t, batch, d, h);
            matmul_bt_acc(&da_c, self.wh.data(), dx_t, batch, d, h);

            matmul_at_acc(x_t, &da_z, grads.wz.data_mut(), batch, d, h);
            matmul_at_acc(x_t, &da_r, grads.wr.data_mut(), batch, d, h);
            matmul_at_acc(x_t, &da_c, grads.wh.data_mut(), batch, d, h);
            matmul_at_acc(h_prev, &da_z, grads.uz.data_mut(), batch, h, h);
            matmul_at_acc(h_prev, &da_r, grads.ur.data_mut(), batch, h, h);
            for i in 0..slab {
                rh[i] = r[i] * h_prev[i];
            }
            matmul_at_acc(&rh, &da_c, grads.uh.data_mut(), batch, h, h);
            colsum_acc(&da_z, grads.bz.data_mut(), batch, h);
            colsum_acc(&da_r, grads.br.data_mut(), batch, h);
            colsum_acc(&da_c, grads.bh.data_mut(), batch, h);

            carry = dh_prev;
        }

        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_keep_hidden_at_zero() {
        // z = 0.5, c = 0, so h stays exactly zero.
        let gru = GruLayer::zeros(2, 3);
        let x = SeqBatch {
            steps: 4,
            batch: 1,
            dim: 2,
            data: (0..8).map(|i| i as f64).collect(),
        };
        let (h, _) = gru.forward(&x).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // T = 1, d_in = 1, h = 2, hand-set weights; h_prev = 0 so the
        // recurrent terms drop and the gate equations can be evaluated
        // directly.
        let mut gru = GruLayer::zeros(1, 2);
        gru.wz.data_mut().copy_from_slice(&[0.3, -0.2]);
        gru.bz.data_mut().copy_from_slice(&[0.1, 0.4]);
        gru.wr.data_mut().copy_from_slice(&[-0.5, 0.25]);
        gru.br.data_mut().copy_from_slice(&[0.0, -0.3]);
        gru.wh.data_mut().copy_from_slice(&[0.7, -0.6]);
        gru.bh.data_mut().copy_from_slice(&[-0.1, 0.2]);
        let x_val = 0.8;
        let x = SeqBatch {
            steps: 1,
            batch: 1,
            dim: 1,
            data: alloc::vec![x_val],
        };
        let (h, _) = gru.forward(&x).unwrap();
        for j in 0..2 {
            let z = sigmoid(gru.wz.data()[j] * x_val + gru.bz.data()[j]);
            let c = tanh(gru.wh.data()[j] * x_val + gru.bh.data()[j]);
            let expect = z * c;
            assert!((h.at(0, 0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let gru = GruLayer::zeros(3, 2);
        let x = SeqBatch::zeros(2, 1, 2);
        assert!(gru.forward(&x).is_err());
    }
}
