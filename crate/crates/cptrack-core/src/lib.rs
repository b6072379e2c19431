//! Core algorithms for recurrent track finding on a toy strip detector.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`detector`] — toy multi-station planar detector: parametric tracks,
//!   Gaussian hit smearing, and combinatorial fake hits from strip crossings.
//! - [`seed`] — directed combinatorial search producing labelled
//!   track candidates (true tracks vs ghosts).
//! - [`nn`] — minimal dense-tensor neural kernel: 1-D convolution, GRU
//!   layers, dense heads, reverse-mode gradients, Adam, and a
//!   finite-difference gradient checker.
//! - [`model`] — the track-finding network: conv + two one-directional GRU
//!   layers, a sigmoid classification neuron and a four-neuron regression
//!   head predicting an elliptical search window on the next station.
//! - [`loss`] — the joint cost: balanced focal loss gated by
//!   `max(lambda1, 1 - p)` plus label-masked point-in-ellipse and
//!   ellipse-area terms, with exact gradients.
//! - [`train`] — prefix expansion of candidates into length-grouped
//!   training samples, the deterministic optimization loop, and the
//!   per-length metrics table.
//! - [`follow`] — inference: grows candidates station by station through
//!   predicted ellipses and resolves hit-sharing conflicts.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all floating-point
//! math goes through [`libm`] so results are identical with and without the
//! `std` feature. File formats, configuration loading, and the CLI live in
//! the companion `cptrack-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod detector;
pub mod follow;
mod fmath;
pub mod loss;
pub mod model;
pub mod nn;
pub mod seed;
pub mod seeding;
pub mod train;
