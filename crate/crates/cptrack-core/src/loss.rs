//! Joint classification/regression cost and its exact gradients.
//!
//! For a sample with label `p` in {0, 1}, predicted probability `p_hat`,
//! predicted ellipse (center `(cx, cy)`, semiaxes `R1, R2`) and true next
//! point `(x, y)`:
//!
//! ```text
//! J = max(lambda1, 1 - p) * FL(p, p_hat)
//!   + p * ( lambda2 * sqrt(((x - cx)/R1)^2 + ((y - cy)/R2)^2 + eps_d)
//!         + lambda3 * R1 * R2 )
//! ```
//!
//! where FL is the balanced focal loss. The label masks the regression
//! part entirely for ghosts; the `max` gate keeps classification pressure
//! on ghosts at full weight while true tracks share weight with the
//! regression terms. Heads can be absent (short prefixes have no
//! probability, full-length prefixes no ellipse); absent heads contribute
//! nothing.
//!
//! `eps_d` regularizes the square root's gradient at zero center error;
//! `prob_clamp` keeps the logarithms finite. Both are invisible at
//! reporting precision.

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::model::Ellipse;
use crate::nn::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Focal-loss weight of the positive (true-track) class.
    pub alpha: f64,
    pub gamma: f64,
    /// Probabilities are clamped into `[prob_clamp, 1 - prob_clamp]`.
    pub prob_clamp: f64,
    /// Added under the distance square root.
    pub sqrt_reg: f64,
    /// How per-sample losses combine into a batch loss.
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.5,
            lambda2: 0.35,
            lambda3: 0.15,
            alpha: 0.95,
            gamma: 2.0,
            prob_clamp: 1e-7,
            sqrt_reg: 1e-12,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.lambda3 >= 0.0
            && (0.0..=1.0).contains(&self.alpha)
            && self.gamma >= 0.0
            && self.prob_clamp > 0.0
            && self.prob_clamp < 0.5
            && self.sqrt_reg > 0.0;
        if ok {
            Ok(())
        } else {
            Err(LossError::BadConfig)
        }
    }
}

/// One scored sample as the loss sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    /// True-track label (`p = 1`) or ghost (`p = 0`).
    pub label: bool,
    pub prob: Option<f64>,
    pub ellipse: Option<Ellipse>,
    /// True next point on the following station; required iff the sample
    /// is labelled true and an ellipse is present.
    pub target: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossError {
    /// A labelled-true sample with an ellipse has no true next point.
    MissingTarget,
    /// Neither head present: nothing to score.
    NoHeads,
    /// Ellipse semiaxes must be strictly positive.
    NonPositiveSemiaxis,
    BadConfig,
}

impl core::fmt::Display for LossError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossError::MissingTarget => {
                write!(f, "true-track sample with an ellipse needs a true next point")
            }
            LossError::NoHeads => write!(f, "sample has neither probability nor ellipse"),
            LossError::NonPositiveSemiaxis => write!(f, "ellipse semiaxes must be positive"),
            LossError::BadConfig => write!(f, "loss configuration out of range"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LossError {}

fn clamp_prob(p_hat: f64, eps: f64) -> f64 {
    p_hat.max(eps).min(1.0 - eps)
}

/// Balanced focal loss for a hard binary label.
///
/// `label = true`: `-alpha * (1 - q)^gamma * ln(q)`;
/// `label = false`: `-(1 - alpha) * q^gamma * ln(1 - q)`,
/// with `q` the prediction clamped into `[eps, 1 - eps]`.
pub fn focal_loss(label: bool, p_hat: f64, alpha: f64, gamma: f64, eps: f64) -> f64 {
    let q = clamp_prob(p_hat, eps);
    if label {
        -alpha * fmath::pow(1.0 - q, gamma) * fmath::ln(q)
    } else {
        -(1.0 - alpha) * fmath::pow(q, gamma) * fmath::ln(1.0 - q)
    }
}

/// Evaluates the joint cost for one sample.
pub fn joint_loss(sample: &LossSample, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    if sample.prob.is_none() && sample.ellipse.is_none() {
        return Err(LossError::NoHeads);
    }
    let p = if sample.label { 1.0 } else { 0.0 };
    let mut j = 0.0;

    if let Some(p_hat) = sample.prob {
        let gate = cfg.lambda1.max(1.0 - p);
        j += gate * focal_loss(sample.label, p_hat, cfg.alpha, cfg.gamma, cfg.prob_clamp);
    }

    if let Some(e) = sample.ellipse {
        if !(e.r1 > 0.0 && e.r2 > 0.0) {
            return Err(LossError::NonPositiveSemiaxis);
        }
        if sample.label {
            let [x, y] = sample.target.ok_or(LossError::MissingTarget)?;
            let dx = (x - e.cx) / e.r1;
            let dy = (y - e.cy) / e.r2;
            j += cfg.lambda2 * fmath::sqrt(dx * dx + dy * dy + cfg.sqrt_reg)
                + cfg.lambda3 * e.r1 * e.r2;
        }
    }

    Ok(j)
}

/// Raw (pre-activation) head outputs for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawHeads {
    /// Classification logit; probability is `sigmoid(logit)`.
    pub logit: Option<f64>,
    /// `[cx, cy, r1, r2]` pre-activations in normalized units.
    pub reg: Option<[f64; 4]>,
}

/// Per-axis factors mapping normalized head outputs back to cm: the center
/// is `scale * raw`, each semiaxis `scale * softplus(raw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScales {
    pub sx: f64,
    pub sy: f64,
}

/// Gradient of the joint cost w.r.t. the raw head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadGrads {
    pub d_logit: f64,
    pub d_reg: [f64; 4],
}

/// De-normalizes raw regression outputs into an ellipse in cm.
pub fn ellipse_from_raw(reg: &[f64; 4], scales: &HeadScales) -> Ellipse {
    Ellipse {
        cx: scales.sx * reg[0],
        cy: scales.sy * reg[1],
        r1: scales.sx * softplus(reg[2]),
        r2: scales.sy * softplus(reg[3]),
    }
}

/// Joint cost and its exact gradient w.r.t. the raw heads, with the
/// sigmoid/softplus/de-normalization chain folded in. The target is in cm.
pub fn joint_loss_value_grad(
    label: bool,
    target: Option<[f64; 2]>,
    heads: &RawHeads,
    scales: &HeadScales,
    cfg: &LossConfig,
) -> Result<(f64, HeadGrads), LossError> {
    cfg.validate()?;
    if heads.logit.is_none() && heads.reg.is_none() {
        return Err(LossError::NoHeads);
    }
    let p = if label { 1.0 } else { 0.0 };
    let mut j = 0.0;
    let mut grads = HeadGrads::default();

    if let Some(a) = heads.logit {
        let s = sigmoid(a);
        let q = clamp_prob(s, cfg.prob_clamp);
        let gate = cfg.lambda1.max(1.0 - p);
        j += gate * focal_loss(label, s, cfg.alpha, cfg.gamma, cfg.prob_clamp);
        // d q / d a is sigmoid' unless the clamp is active, where the loss
        // is locally constant in a.
        let dq_da = if s == q { s * (1.0 - s) } else { 0.0 };
        let dfl_dq = if label {
            // FL = -alpha (1-q)^g ln q
            cfg.alpha
                * (cfg.gamma * fmath::pow(1.0 - q, cfg.gamma - 1.0) * fmath::ln(q)
                    - fmath::pow(1.0 - q, cfg.gamma) / q)
        } else {
            // FL = -(1-alpha) q^g ln(1-q)
            (1.0 - cfg.alpha)
                * (fmath::pow(q, cfg.gamma) / (1.0 - q)
                    - cfg.gamma * fmath::pow(q, cfg.gamma - 1.0) * fmath::ln(1.0 - q))
        };
        grads.d_logit = gate * dfl_dq * dq_da;
    }

    if let Some(reg) = heads.reg {
        if label {
            let [x, y] = target.ok_or(LossError::MissingTarget)?;
            let e = ellipse_from_raw(&reg, scales);
            let dx = (x - e.cx) / e.r1;
            let dy = (y - e.cy) / e.r2;
            let dist = fmath::sqrt(dx * dx + dy * dy + cfg.sqrt_reg);
            j += cfg.lambda2 * dist + cfg.lambda3 * e.r1 * e.r2;

            // d J / d center (cm): -lambda2 * dx / (dist * R1), then the
            // center de-normalization contributes the scale factor.
            grads.d_reg[0] = -cfg.lambda2 * dx / (dist * e.r1) * scales.sx;
            grads.d_reg[1] = -cfg.lambda2 * dy / (dist * e.r2) * scales.sy;
            // d J / d R1 = -lambda2 dx^2/(dist R1) + lambda3 R2, chained
            // through R1 = sx * softplus(raw): d R1 / d raw = sx * sigmoid.
            let dj_dr1 = -cfg.lambda2 * dx * dx / (dist * e.r1) + cfg.lambda3 * e.r2;
            let dj_dr2 = -cfg.lambda2 * dy * dy / (dist * e.r2) + cfg.lambda3 * e.r1;
            grads.d_reg[2] = dj_dr1 * scales.sx * sigmoid(reg[2]);
            grads.d_reg[3] = dj_dr2 * scales.sy * sigmoid(reg[3]);
        }
    }

    Ok((j, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use rand::Rng;
    use rand::SeedableRng;

    const LN2: f64 = core::f64::consts::LN_2;

    fn ell(cx: f64, cy: f64, r1: f64, r2: f64) -> Ellipse {
        Ellipse { cx, cy, r1, r2 }
    }

    #[test]
    fn focal_loss_vanishes_for_confident_correct_predictions() {
        let cfg = LossConfig::default();
        assert!(focal_loss(true, 1.0, cfg.alpha, cfg.gamma, cfg.prob_clamp) < 1e-5);
        assert!(focal_loss(false, 0.0, cfg.alpha, cfg.gamma, cfg.prob_clamp) < 1e-5);
    }

    #[test]
    fn focal_loss_matches_closed_form_at_half() {
        let v = focal_loss(true, 0.5, 0.95, 2.0, 1e-7);
        assert!((v - 0.95 * 0.25 * LN2).abs() < 1e-12);
        assert!((v - 0.164623).abs() < 1e-6);
    }

    #[test]
    fn ghost_at_half_matches_closed_form() {
        let cfg = LossConfig::default();
        let s = LossSample {
            label: false,
            prob: Some(0.5),
            ellipse: Some(ell(3.0, -2.0, 0.7, 0.9)),
            target: None,
        };
        let j = joint_loss(&s, &cfg).unwrap();
        // Gate max(0.5, 1) = 1; regression fully masked.
        assert!((j - 0.05 * 0.25 * LN2).abs() < 1e-12);
    }

    #[test]
    fn worked_example_matches_independent_evaluation() {
        let cfg = LossConfig::default();
        let s = LossSample {
            label: true,
            prob: Some(0.5),
            ellipse: Some(ell(1.0, 0.5, 0.5, 0.4)),
            target: Some([1.2, 0.6]),
        };
        let j = joint_loss(&s, &cfg).unwrap();
        assert!((j - 0.277406).abs() < 1e-6, "j = {j}");
    }

    #[test]
    fn regression_only_sample_uses_second_term_alone() {
        let cfg = LossConfig::default();
        let s = LossSample {
            label: true,
            prob: None,
            ellipse: Some(ell(0.0, 0.0, 0.5, 0.5)),
            target: Some([0.0, 0.0]),
        };
        let j = joint_loss(&s, &cfg).unwrap();
        // Center on truth: distance collapses to sqrt(sqrt_reg), leaving
        // the pure size penalty.
        assert!((j - cfg.lambda3 * 0.25).abs() < cfg.lambda2 * 1e-5);
    }

    #[test]
    fn masking_ignores_ghost_ellipses() {
        let cfg = LossConfig::default();
        let mk = |e| LossSample {
            label: false,
            prob: Some(0.8),
            ellipse: Some(e),
            target: None,
        };
        let a = joint_loss(&mk(ell(0.0, 0.0, 1.0, 1.0)), &cfg).unwrap();
        let b = joint_loss(&mk(ell(9.0, -9.0, 0.01, 5.0)), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn growing_both_semiaxes_trades_distance_for_area() {
        let base = LossConfig::default();
        let sample = |r: f64| LossSample {
            label: true,
            prob: None,
            ellipse: Some(ell(0.0, 0.0, r, r)),
            target: Some([0.3, -0.2]),
        };
        let dist_only = LossConfig {
            lambda3: 0.0,
            ..base
        };
        let area_only = LossConfig {
            lambda2: 0.0,
            ..base
        };
        let (small, big) = (sample(0.5), sample(1.0));
        assert!(joint_loss(&big, &dist_only).unwrap() < joint_loss(&small, &dist_only).unwrap());
        assert!(joint_loss(&big, &area_only).unwrap() > joint_loss(&small, &area_only).unwrap());
    }

    #[test]
    fn contract_violations_are_errors() {
        let cfg = LossConfig::default();
        let no_target = LossSample {
            label: true,
            prob: None,
            ellipse: Some(ell(0.0, 0.0, 1.0, 1.0)),
            target: None,
        };
        assert_eq!(joint_loss(&no_target, &cfg), Err(LossError::MissingTarget));
        let headless = LossSample {
            label: true,
            prob: None,
            ellipse: None,
            target: None,
        };
        assert_eq!(joint_loss(&headless, &cfg), Err(LossError::NoHeads));
        let degenerate = LossSample {
            label: true,
            prob: None,
            ellipse: Some(ell(0.0, 0.0, 0.0, 1.0)),
            target: Some([0.0, 0.0]),
        };
        assert_eq!(
            joint_loss(&degenerate, &cfg),
            Err(LossError::NonPositiveSemiaxis)
        );
    }

    #[test]
    fn value_grad_agrees_with_joint_loss() {
        let cfg = LossConfig::default();
        let scales = HeadScales { sx: 1.5, sy: 0.8 };
        let heads = RawHeads {
            logit: Some(0.3),
            reg: Some([0.4, -0.2, 0.1, 0.5]),
        };
        let target = Some([0.9, -0.1]);
        let (j, _) = joint_loss_value_grad(true, target, &heads, &scales, &cfg).unwrap();
        let sample = LossSample {
            label: true,
            prob: Some(sigmoid(0.3)),
            ellipse: Some(ellipse_from_raw(&heads.reg.unwrap(), &scales)),
            target,
        };
        assert!((j - joint_loss(&sample, &cfg).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let scales = HeadScales { sx: 2.0, sy: 0.7 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for case in 0..200 {
            let label = rng.gen::<bool>();
            let with_logit = case % 3 != 0;
            let with_reg = case % 4 != 0 || !with_logit;
            let logit = with_logit.then(|| rng.gen_range(-3.0..3.0));
            let reg = with_reg.then(|| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.5),
                    rng.gen_range(-1.0..1.5),
                ]
            });
            let target = Some([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let heads = RawHeads { logit, reg };
            let (_, grads) =
                joint_loss_value_grad(label, target, &heads, &scales, &cfg).unwrap();

            if let Some(a) = logit {
                let fd = central_diff(
                    |v| {
                        let h = RawHeads {
                            logit: Some(v),
                            reg,
                        };
                        joint_loss_value_grad(label, target, &h, &scales, &cfg)
                            .unwrap()
                            .0
                    },
                    a,
                    1e-6,
                );
                assert!(
                    rel_err(fd, grads.d_logit) < 1e-6,
                    "logit grad: fd {fd} vs {g}",
                    g = grads.d_logit
                );
            }
            if let Some(r) = reg {
                for k in 0..4 {
                    let fd = central_diff(
                        |v| {
                            let mut r2 = r;
                            r2[k] = v;
                            let h = RawHeads {
                                logit,
                                reg: Some(r2),
                            };
                            joint_loss_value_grad(label, target, &h, &scales, &cfg)
                                .unwrap()
                                .0
                        },
                        r[k],
                        1e-6,
                    );
                    assert!(
                        rel_err(fd, grads.d_reg[k]) < 1e-6,
                        "reg[{k}] grad: fd {fd} vs {g}",
                        g = grads.d_reg[k]
                    );
                }
            }
        }
    }

    #[test]
    fn ghost_samples_have_zero_regression_gradient() {
        let cfg = LossConfig::default();
        let scales = HeadScales { sx: 1.0, sy: 1.0 };
        let heads = RawHeads {
            logit: Some(-0.4),
            reg: Some([0.2, 0.1, 0.3, 0.4]),
        };
        let (_, grads) = joint_loss_value_grad(false, None, &heads, &scales, &cfg).unwrap();
        assert_eq!(grads.d_reg, [0.0; 4]);
        assert!(grads.d_logit != 0.0);
    }

    #[test]
    fn gradient_finite_with_center_on_truth() {
        let cfg = LossConfig::default();
        let scales = HeadScales { sx: 1.0, sy: 1.0 };
        // Raw center (0.5, -0.25) equals the target exactly.
        let heads = RawHeads {
            logit: None,
            reg: Some([0.5, -0.25, 0.0, 0.0]),
        };
        let (j, grads) =
            joint_loss_value_grad(true, Some([0.5, -0.25]), &heads, &scales, &cfg).unwrap();
        assert!(j.is_finite());
        assert!(grads.d_reg.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gamma_zero_reduces_to_weighted_cross_entropy() {
        let v = focal_loss(true, 0.3, 0.95, 0.0, 1e-7);
        assert!((v + 0.95 * 0.3f64.ln()).abs() < 1e-12);
        // The gradient formula must stay finite when gamma = 0.
        let cfg = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        let heads = RawHeads {
            logit: Some(0.2),
            reg: None,
        };
        let scales = HeadScales { sx: 1.0, sy: 1.0 };
        let (_, g) = joint_loss_value_grad(true, None, &heads, &scales, &cfg).unwrap();
        let fd = central_diff(
            |v| {
                let h = RawHeads {
                    logit: Some(v),
                    reg: None,
                };
                joint_loss_value_grad(true, None, &h, &scales, &cfg).unwrap().0
            },
            0.2,
            1e-6,
        );
        assert!(rel_err(fd, g.d_logit) < 1e-6);
    }
}
