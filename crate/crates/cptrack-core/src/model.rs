//! The track-finding network.
//!
//! A candidate prefix (target plus the hits found so far, each a
//! normalized `(x, y, z)` triple) runs through a same-padded 1-D
//! convolution and two one-directional GRU layers; two heads read the
//! final hidden state:
//!
//! - a single sigmoid neuron scoring the prefix as a true track, and
//! - four regression neurons for the search ellipse on the next station:
//!   two linear outputs for the center, two softplus outputs for the
//!   semiaxes (strictly positive by construction).
//!
//! Both heads are always computed; presence is decided at the interface by
//! the prefix length. A two-point prefix carries too little shape
//! information to classify, so only the ellipse is exposed; a full-length
//! prefix has no next station, so only the probability is exposed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::loss::{ellipse_from_raw, HeadScales};
use crate::nn::{
    sigmoid, Conv1d, Dense, GruCache, GruLayer, NnError, SeqBatch, Tensor,
};
use crate::seeding;

/// Input width: one `(x, y, z)` triple per sequence position.
pub const INPUT_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_filters: usize,
    /// Convolution width; must be odd (same padding).
    pub conv_kernel: usize,
    pub gru1_hidden: usize,
    pub gru2_hidden: usize,
    /// Longest admissible prefix, `n_stations + 1`. Derived from the
    /// detector when absent.
    pub max_seq_len: Option<usize>,
    /// Normalization divisors for x, y, z in cm. Derived from the detector
    /// (largest half-extents, last plane z) when absent.
    pub scale_x: Option<f64>,
    pub scale_y: Option<f64>,
    pub scale_z: Option<f64>,
    /// Multiplier applied to the convolution kernel at initialization.
    ///
    /// The two candidate classes differ only in even-order statistics of the
    /// prefix geometry: ghosts kink where true tracks run smooth, but the
    /// *signed* means of every coordinate feature coincide across classes.
    /// With normalized inputs a standard small-variance start leaves every
    /// gate at its odd-symmetric point, where a first-order read-out carries
    /// no class signal and the classifier collapses to a constant output.
    /// Amplifying the input paths at initialization pushes the recurrent
    /// gates into their curved regions so magnitude differences are visible
    /// to the very first gradient steps; the reachable function space is
    /// unchanged.
    pub conv_init_gain: f64,
    /// Multiplier applied to the GRU input kernels (both layers) at
    /// initialization; same rationale as `conv_init_gain`.
    pub gru_init_gain: f64,
    /// Initial bias of the two semiaxis outputs (pre-softplus).
    ///
    /// A semiaxis is `scale * softplus(raw)`, so a zero bias starts the
    /// search windows at ~0.7 of a station half-extent. The cost pushes the
    /// window center toward the target with a force inversely proportional
    /// to the semiaxes, so oversized windows stall center learning while
    /// they slowly deflate. Starting the pre-activation negative (windows
    /// of a few cm) lets the center and size converge together.
    pub radius_raw_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_filters: 32,
            conv_kernel: 3,
            gru1_hidden: 32,
            gru2_hidden: 32,
            max_seq_len: None,
            scale_x: None,
            scale_y: None,
            scale_z: None,
            conv_init_gain: 16.0,
            gru_init_gain: 4.0,
            radius_raw_init: 0.0,
        }
    }
}

/// Axis-aligned search ellipse on a station plane, cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Ellipse {
    /// Area, reported in cm^2.
    pub fn area(&self) -> f64 {
        core::f64::consts::PI * self.r1 * self.r2
    }

    /// Closed-region membership test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.r1;
        let dy = (y - self.cy) / self.r2;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    /// True-track probability; absent for two-point prefixes.
    pub prob: Option<f64>,
    /// Search window on the next station; absent at full length.
    pub ellipse: Option<Ellipse>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv: Conv1d,
    pub gru1: GruLayer,
    pub gru2: GruLayer,
    pub prob_head: Dense,
    pub reg_head: Dense,
}

impl ModelParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ModelParams {
            conv: Conv1d::init(cfg.conv_kernel, INPUT_FEATURES, cfg.conv_filters, rng),
            gru1: GruLayer::init(cfg.conv_filters, cfg.gru1_hidden, rng),
            gru2: GruLayer::init(cfg.gru1_hidden, cfg.gru2_hidden, rng),
            prob_head: Dense::init(cfg.gru2_hidden, 1, rng),
            reg_head: Dense::init(cfg.gru2_hidden, 4, rng),
        };
        let scale = |t: &mut Tensor, g: f64| {
            for v in t.data_mut() {
                *v *= g;
            }
        };
        scale(&mut params.conv.kernel, cfg.conv_init_gain);
        for gru in [&mut params.gru1, &mut params.gru2] {
            scale(&mut gru.wz, cfg.gru_init_gain);
            scale(&mut gru.wr, cfg.gru_init_gain);
            scale(&mut gru.wh, cfg.gru_init_gain);
        }
        // Regression outputs are [cx, cy, r1_raw, r2_raw].
        params.reg_head.b.data_mut()[2] = cfg.radius_raw_init;
        params.reg_head.b.data_mut()[3] = cfg.radius_raw_init;
        params
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            conv: Conv1d::zeros(self.conv.width(), self.conv.d_in(), self.conv.filters()),
            gru1: GruLayer::zeros(self.gru1.d_in(), self.gru1.hidden()),
            gru2: GruLayer::zeros(self.gru2.d_in(), self.gru2.hidden()),
            prob_head: Dense::zeros(self.prob_head.d_in(), self.prob_head.d_out()),
            reg_head: Dense::zeros(self.reg_head.d_in(), self.reg_head.d_out()),
        }
    }

    /// All tensors in a fixed canonical order with stable names. The order
    /// defines optimizer slots and the checkpoint layout.
    pub fn visit(&self) -> Vec<(&'static str, &Tensor)> {
        alloc::vec![
            ("conv.kernel", &self.conv.kernel),
            ("conv.bias", &self.conv.bias),
            ("gru1.wz", &self.gru1.wz),
            ("gru1.uz", &self.gru1.uz),
            ("gru1.bz", &self.gru1.bz),
            ("gru1.wr", &self.gru1.wr),
            ("gru1.ur", &self.gru1.ur),
            ("gru1.br", &self.gru1.br),
            ("gru1.wh", &self.gru1.wh),
            ("gru1.uh", &self.gru1.uh),
            ("gru1.bh", &self.gru1.bh),
            ("gru2.wz", &self.gru2.wz),
            ("gru2.uz", &self.gru2.uz),
            ("gru2.bz", &self.gru2.bz),
            ("gru2.wr", &self.gru2.wr),
            ("gru2.ur", &self.gru2.ur),
            ("gru2.br", &self.gru2.br),
            ("gru2.wh", &self.gru2.wh),
            ("gru2.uh", &self.gru2.uh),
            ("gru2.bh", &self.gru2.bh),
            ("prob.w", &self.prob_head.w),
            ("prob.b", &self.prob_head.b),
            ("reg.w", &self.reg_head.w),
            ("reg.b", &self.reg_head.b),
        ]
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order.
    pub fn visit_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let ModelParams {
            conv,
            gru1,
            gru2,
            prob_head,
            reg_head,
        } = self;
        alloc::vec![
            ("conv.kernel", &mut conv.kernel),
            ("conv.bias", &mut conv.bias),
            ("gru1.wz", &mut gru1.wz),
            ("gru1.uz", &mut gru1.uz),
            ("gru1.bz", &mut gru1.bz),
            ("gru1.wr", &mut gru1.wr),
            ("gru1.ur", &mut gru1.ur),
            ("gru1.br", &mut gru1.br),
            ("gru1.wh", &mut gru1.wh),
            ("gru1.uh", &mut gru1.uh),
            ("gru1.bh", &mut gru1.bh),
            ("gru2.wz", &mut gru2.wz),
            ("gru2.uz", &mut gru2.uz),
            ("gru2.bz", &mut gru2.bz),
            ("gru2.wr", &mut gru2.wr),
            ("gru2.ur", &mut gru2.ur),
            ("gru2.br", &mut gru2.br),
            ("gru2.wh", &mut gru2.wh),
            ("gru2.uh", &mut gru2.uh),
            ("gru2.bh", &mut gru2.bh),
            ("prob.w", &mut prob_head.w),
            ("prob.b", &mut prob_head.b),
            ("reg.w", &mut reg_head.w),
            ("reg.b", &mut reg_head.b),
        ]
    }
}

/// Resolved normalization divisors, cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Prefix length outside `[2, max_seq_len]`.
    BadLength { len: usize, max: usize },
    /// `forward_batch` requires equal-length prefixes.
    MixedLengths,
    BadInput(String),
    BadConfig(String),
    Kernel(NnError),
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        ModelError::Kernel(e)
    }
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadLength { len, max } => {
                write!(f, "prefix length {len} outside the supported range [2, {max}]")
            }
            ModelError::MixedLengths => {
                write!(f, "batch mixes prefix lengths; group by length first")
            }
            ModelError::BadInput(d) => write!(f, "bad model input: {d}"),
            ModelError::BadConfig(d) => write!(f, "bad model config: {d}"),
            ModelError::Kernel(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// Raw head outputs for a same-length batch, before activation and
/// presence masking: one logit and four regression values per sample.
#[derive(Debug, Clone)]
pub struct RawHeadsBatch {
    pub logits: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Forward-pass intermediates for one same-length batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    len: usize,
    x: SeqBatch,
    conv_out: SeqBatch,
    g1_cache: GruCache,
    g1_out: SeqBatch,
    g2_cache: GruCache,
    g2_out: SeqBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    scales: Scales,
    max_seq_len: usize,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model with Glorot-initialized weights, normalization derived
    /// from the detector unless pinned in the config.
    pub fn init(cfg: &ModelConfig, det: &DetectorConfig, seed: u64) -> Result<Model, ModelError> {
        det.validate()
            .map_err(|e| ModelError::BadConfig(format!("{e}")))?;
        let max_seq_len = cfg.max_seq_len.unwrap_or(det.n_stations() + 1);
        if max_seq_len != det.n_stations() + 1 {
            return Err(ModelError::BadConfig(String::from(
                "max_seq_len must equal the station count plus one",
            )));
        }
        let max_of = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        let scales = Scales {
            x: cfg.scale_x.unwrap_or_else(|| max_of(&det.half_extent_x)),
            y: cfg.scale_y.unwrap_or_else(|| max_of(&det.half_extent_y)),
            z: cfg.scale_z.unwrap_or(det.station_z[det.n_stations() - 1]),
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(seed, seeding::stream::MODEL_INIT));
        let params = ModelParams::init(cfg, &mut rng);
        Model::from_parts(*cfg, scales, max_seq_len, params)
    }

    /// Reassembles a model (e.g. from a checkpoint), validating dimensions.
    pub fn from_parts(
        cfg: ModelConfig,
        scales: Scales,
        max_seq_len: usize,
        params: ModelParams,
    ) -> Result<Model, ModelError> {
        if cfg.conv_kernel % 2 == 0 || cfg.conv_kernel == 0 {
            return Err(ModelError::BadConfig(String::from(
                "conv kernel width must be odd",
            )));
        }
        if cfg.conv_filters == 0 || cfg.gru1_hidden == 0 || cfg.gru2_hidden == 0 {
            return Err(ModelError::BadConfig(String::from(
                "layer widths must be positive",
            )));
        }
        if max_seq_len < 3 {
            return Err(ModelError::BadConfig(String::from(
                "max_seq_len must be at least 3",
            )));
        }
        if !(scales.x > 0.0 && scales.y > 0.0 && scales.z > 0.0) {
            return Err(ModelError::BadConfig(String::from(
                "normalization scales must be positive",
            )));
        }
        if !(cfg.conv_init_gain.is_finite()
            && cfg.conv_init_gain > 0.0
            && cfg.gru_init_gain.is_finite()
            && cfg.gru_init_gain > 0.0)
        {
            return Err(ModelError::BadConfig(String::from(
                "initialization gains must be positive and finite",
            )));
        }
        if !cfg.radius_raw_init.is_finite() {
            return Err(ModelError::BadConfig(String::from(
                "radius_raw_init must be finite",
            )));
        }
        let want = [
            (params.conv.width(), cfg.conv_kernel),
            (params.conv.d_in(), INPUT_FEATURES),
            (params.conv.filters(), cfg.conv_filters),
            (params.gru1.d_in(), cfg.conv_filters),
            (params.gru1.hidden(), cfg.gru1_hidden),
            (params.gru2.d_in(), cfg.gru1_hidden),
            (params.gru2.hidden(), cfg.gru2_hidden),
            (params.prob_head.d_in(), cfg.gru2_hidden),
            (params.prob_head.d_out(), 1),
            (params.reg_head.d_in(), cfg.gru2_hidden),
            (params.reg_head.d_out(), 4),
        ];
        if want.iter().any(|&(got, expect)| got != expect) {
            return Err(ModelError::BadConfig(String::from(
                "parameter shapes do not match the config",
            )));
        }
        Ok(Model {
            cfg,
            scales,
            max_seq_len,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &Scales {
        &self.scales
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn n_stations(&self) -> usize {
        self.max_seq_len - 1
    }

    /// De-normalization factors for the regression head.
    pub fn head_scales(&self) -> HeadScales {
        HeadScales {
            sx: self.scales.x,
            sy: self.scales.y,
        }
    }

    /// Whether a prefix of `len` points exposes a probability.
    pub fn has_prob(&self, len: usize) -> bool {
        len >= 3
    }

    /// Whether a prefix of `len` points exposes an ellipse (a next station
    /// exists).
    pub fn has_ellipse(&self, len: usize) -> bool {
        len <= self.n_stations()
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len < 2 || len > self.max_seq_len {
            return Err(ModelError::BadLength {
                len,
                max: self.max_seq_len,
            });
        }
        Ok(())
    }

    /// Runs the network on a same-length batch of prefixes stored
    /// sample-major (`pts[b * len * 3 ..]` is sample `b`, cm units) and
    /// returns raw head outputs plus the cache for [`Model::backward`].
    pub fn forward_raw(
        &self,
        pts: &[f64],
        batch: usize,
        len: usize,
    ) -> Result<(RawHeadsBatch, ForwardCache), ModelError> {
        self.check_len(len)?;
        if pts.len() != batch * len * INPUT_FEATURES {
            return Err(ModelError::BadInput(format!(
                "expected {} coordinates, got {}",
                batch * len * INPUT_FEATURES,
                pts.len()
            )));
        }
        let mut x = SeqBatch::zeros(len, batch, INPUT_FEATURES);
        for t in 0..len {
            let step = x.step_mut(t);
            for b in 0..batch {
                let src = (b * len + t) * INPUT_FEATURES;
                let dst = b * INPUT_FEATURES;
                step[dst] = pts[src] / self.scales.x;
                step[dst + 1] = pts[src + 1] / self.scales.y;
                step[dst + 2] = pts[src + 2] / self.scales.z;
            }
        }
        let conv_out = self.params.conv.forward(&x)?;
        let (g1_out, g1_cache) = self.params.gru1.forward(&conv_out)?;
        let (g2_out, g2_cache) = self.params.gru2.forward(&g1_out)?;
        let last = g2_out.step(len - 1);
        let logits = self.params.prob_head.forward(last, batch)?;
        let reg = self.params.reg_head.forward(last, batch)?;
        Ok((
            RawHeadsBatch { logits, reg },
            ForwardCache {
                batch,
                len,
                x,
                conv_out,
                g1_cache,
                g1_out,
                g2_cache,
                g2_out,
            },
        ))
    }

    /// Accumulates parameter gradients for a batch given the adjoints of
    /// the raw head outputs (`d_logits`: one per sample, `d_reg`: four per
    /// sample). Heads absent at this length are masked by passing zeros.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        d_reg: &[f64],
        grads: &mut ModelParams,
    ) -> Result<(), ModelError> {
        let (batch, len) = (cache.batch, cache.len);
        if d_logits.len() != batch || d_reg.len() != batch * 4 {
            return Err(ModelError::BadInput(String::from(
                "adjoint lengths do not match the cached batch",
            )));
        }
        let last = cache.g2_out.step(len - 1);
        let mut d_last = self
            .params
            .prob_head
            .backward(last, d_logits, batch, &mut grads.prob_head)?;
        let d_last_reg = self
            .params
            .reg_head
            .backward(last, d_reg, batch, &mut grads.reg_head)?;
        for (a, b) in d_last.iter_mut().zip(d_last_reg.iter()) {
            *a += b;
        }
        let mut d_g2 = SeqBatch::zeros(len, batch, self.cfg.gru2_hidden);
        d_g2.step_mut(len - 1).copy_from_slice(&d_last);
        let d_g1 = self
            .params
            .gru2
            .backward(&cache.g1_out, &cache.g2_cache, &d_g2, &mut grads.gru2)?;
        let d_conv = self
            .params
            .gru1
            .backward(&cache.conv_out, &cache.g1_cache, &d_g1, &mut grads.gru1)?;
        self.params.conv.backward(&cache.x, &d_conv, &mut grads.conv)?;
        Ok(())
    }

    /// Applies activations, de-normalization, and the presence contract to
    /// raw head outputs. The raw center is an offset from `anchor` (see
    /// [`center_anchor`]); the returned ellipse is absolute, in cm.
    pub fn mask_output(
        &self,
        raw_logit: f64,
        raw_reg: &[f64; 4],
        len: usize,
        anchor: [f64; 2],
    ) -> ModelOutput {
        ModelOutput {
            prob: self.has_prob(len).then(|| sigmoid(raw_logit)),
            ellipse: self.has_ellipse(len).then(|| {
                let mut e = ellipse_from_raw(raw_reg, &self.head_scales());
                e.cx += anchor[0];
                e.cy += anchor[1];
                e
            }),
        }
    }

    /// Scores a batch of equal-length prefixes (points in cm).
    pub fn forward_batch(&self, prefixes: &[&[[f64; 3]]]) -> Result<Vec<ModelOutput>, ModelError> {
        let Some(first) = prefixes.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if prefixes.iter().any(|p| p.len() != len) {
            return Err(ModelError::MixedLengths);
        }
        self.check_len(len)?;
        let mut pts = Vec::with_capacity(prefixes.len() * len * INPUT_FEATURES);
        for p in prefixes {
            for q in *p {
                pts.extend_from_slice(q);
            }
        }
        let (raw, _) = self.forward_raw(&pts, prefixes.len(), len)?;
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let reg: [f64; 4] = raw.reg[b * 4..b * 4 + 4].try_into().expect("4 per sample");
                let anchor = center_anchor(&p[len - 2], &p[len - 1]);
                self.mask_output(raw.logits[b], &reg, len, anchor)
            })
            .collect())
    }

    /// Scores a single prefix.
    pub fn forward(&self, prefix: &[[f64; 3]]) -> Result<ModelOutput, ModelError> {
        let mut out = self.forward_batch(&[prefix])?;
        Ok(out.pop().expect("one output per prefix"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            conv_filters: 4,
            conv_kernel: 3,
            gru1_hidden: 5,
            gru2_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn test_model(seed: u64) -> Model {
        Model::init(&small_cfg(), &DetectorConfig::default(), seed).unwrap()
    }

    fn random_prefix(rng: &mut impl Rng, len: usize) -> Vec<[f64; 3]> {
        let mut p = alloc::vec![[0.0, 0.0, 0.0]];
        for i in 0..len - 1 {
            p.push([
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-20.0..20.0),
                30.0 + 20.0 * i as f64,
            ]);
        }
        p
    }

    #[test]
    fn head_presence_follows_prefix_length() {
        let m = test_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in 2..=m.max_seq_len() {
            let p = random_prefix(&mut rng, len);
            let out = m.forward(&p).unwrap();
            assert_eq!(out.prob.is_some(), len >= 3, "len {len}");
            assert_eq!(out.ellipse.is_some(), len <= m.n_stations(), "len {len}");
            if let Some(prob) = out.prob {
                assert!(prob > 0.0 && prob < 1.0);
            }
            if let Some(e) = out.ellipse {
                assert!(e.r1 > 0.0 && e.r2 > 0.0);
            }
        }
    }

    #[test]
    fn out_of_range_lengths_are_rejected() {
        let m = test_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let short = random_prefix(&mut rng, 1);
        let long = random_prefix(&mut rng, m.max_seq_len() + 1);
        assert!(matches!(
            m.forward(&short),
            Err(ModelError::BadLength { .. })
        ));
        assert!(matches!(m.forward(&long), Err(ModelError::BadLength { .. })));
    }

    #[test]
    fn batch_outputs_are_bitwise_equal_to_single_forward() {
        let m = test_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prefixes: Vec<Vec<[f64; 3]>> = (0..9).map(|_| random_prefix(&mut rng, 4)).collect();
        let refs: Vec<&[[f64; 3]]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let batched = m.forward_batch(&refs).unwrap();
        for (p, out) in prefixes.iter().zip(batched) {
            let single = m.forward(p).unwrap();
            let (a, b) = (single.prob.unwrap(), out.prob.unwrap());
            assert_eq!(a.to_bits(), b.to_bits());
            let (ea, eb) = (single.ellipse.unwrap(), out.ellipse.unwrap());
            for (u, v) in [(ea.cx, eb.cx), (ea.cy, eb.cy), (ea.r1, eb.r1), (ea.r2, eb.r2)] {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn mixed_length_batches_are_rejected() {
        let m = test_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_prefix(&mut rng, 3);
        let b = random_prefix(&mut rng, 4);
        let refs: Vec<&[[f64; 3]]> = alloc::vec![a.as_slice(), b.as_slice()];
        assert!(matches!(
            m.forward_batch(&refs),
            Err(ModelError::MixedLengths)
        ));
    }

    #[test]
    fn empty_batch_yields_empty_output() {
        let m = test_model(4);
        assert!(m.forward_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn output_depends_only_on_the_prefix() {
        let m = test_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let full = random_prefix(&mut rng, m.max_seq_len());
        for len in 3..m.max_seq_len() {
            let replayed: Vec<[f64; 3]> = full[..len].to_vec();
            let fresh = replayed.clone();
            let a = m.forward(&replayed).unwrap();
            let b = m.forward(&fresh).unwrap();
            assert_eq!(
                a.prob.unwrap().to_bits(),
                b.prob.unwrap().to_bits()
            );
        }
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = test_model(99);
        let b = test_model(99);
        let c = test_model(100);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn semiaxes_stay_positive_for_extreme_coordinates() {
        let m = test_model(13);
        let p = [
            [0.0, 0.0, 0.0],
            [1e6, -1e6, 30.0],
            [-1e6, 1e6, 50.0],
        ];
        let out = m.forward(&p).unwrap();
        let e = out.ellipse.unwrap();
        assert!(e.r1 > 0.0 && e.r2 > 0.0 && e.r1.is_finite() && e.r2.is_finite());
    }

    #[test]
    fn visit_orders_match() {
        let m = test_model(21);
        let mut params = m.params.clone();
        let names_ref: Vec<&str> = m.params.visit().iter().map(|(n, _)| *n).collect();
        let names_mut: Vec<&str> = params.visit_mut().iter().map(|(n, _)| *n).collect();
        assert_eq!(names_ref, names_mut);
        assert_eq!(names_ref.len(), 24);
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let det = DetectorConfig::default();
        let bad = ModelConfig {
            conv_kernel: 2,
            ..small_cfg()
        };
        assert!(Model::init(&bad, &det, 0).is_err());
        let m = test_model(1);
        let mut wrong = m.params.clone();
        wrong.prob_head = Dense::zeros(3, 1);
        assert!(Model::from_parts(
            *m.config(),
            *m.scales(),
            m.max_seq_len(),
            wrong
        )
        .is_err());
    }
}
