//! Minimal dense-tensor neural kernel.
//!
//! Provides exactly what the track-finding model needs: a same-padded 1-D
//! convolution, gated recurrent layers with backpropagation through time,
//! dense heads, numerically safe activations, Adam, and a finite-difference
//! gradient checker. Everything is `f64` and deterministic: a fixed seed
//! gives bitwise-reproducible forward, backward, and update results.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;

pub mod adam;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod gru;
mod linalg;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::Conv1d;
pub use dense::Dense;
pub use gru::{GruCache, GruLayer};
pub use tensor::Tensor;

/// Error raised by kernel operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NnError {
    /// Tensor shapes do not agree; `layer` names the offending layer.
    Shape { layer: &'static str, detail: String },
}

impl NnError {
    pub(crate) fn shape(layer: &'static str, detail: &str) -> Self {
        NnError::Shape {
            layer,
            detail: String::from(detail),
        }
    }
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Shape { layer, detail } => {
                write!(f, "shape mismatch in {layer}: {detail}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NnError {}

/// Logistic sigmoid, safe for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fmath::exp(-x))
    } else {
        let e = fmath::exp(x);
        e / (1.0 + e)
    }
}

/// Softplus `ln(1 + e^x)` in the overflow-safe form
/// `max(x, 0) + ln(1 + e^-|x|)`; strictly positive for finite input.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + fmath::ln_1p(fmath::exp(-fmath::abs(x)))
}

/// Elementwise softplus over a tensor.
pub fn softplus_tensor(t: &Tensor) -> Tensor {
    t.map(softplus)
}

/// Hyperbolic tangent.
pub fn tanh(x: f64) -> f64 {
    fmath::tanh(x)
}

/// A batch of equal-length sequences, time-major: `data[t][b][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub steps: usize,
    pub batch: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SeqBatch {
    pub fn zeros(steps: usize, batch: usize, dim: usize) -> Self {
        SeqBatch {
            steps,
            batch,
            dim,
            data: vec![0.0; steps * batch * dim],
        }
    }

    /// The `[batch x dim]` slab for one time step.
    pub fn step(&self, t: usize) -> &[f64] {
        let s = self.batch * self.dim;
        &self.data[t * s..(t + 1) * s]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.batch * self.dim;
        &mut self.data[t * s..(t + 1) * s]
    }

    pub fn at(&self, t: usize, b: usize, d: usize) -> f64 {
        self.data[(t * self.batch + b) * self.dim + d]
    }

    pub fn at_mut(&mut self, t: usize, b: usize, d: usize) -> &mut f64 {
        &mut self.data[(t * self.batch + b) * self.dim + d]
    }
}

/// Uniform Glorot initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform(
    rng: &mut impl rand::Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent")
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
///
/// Returns the pre-clip norm. A `None` max disables clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: Option<f64>) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = fmath::sqrt(sq);
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            let scale = max / norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}
