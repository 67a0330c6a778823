//! Lightweight perturbation-based validity check for cached explanations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XaasError};
use crate::explain::{fidelity, Explanation, Predictor};
use crate::rng::{local_probes, orthogonal_probes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    pub n_perturbations: usize,
    pub fidelity_threshold: f64,
    pub perturbation_scale: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            n_perturbations: 15,
            fidelity_threshold: 0.90,
            perturbation_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub valid: bool,
    pub measured_fidelity: f64,
    pub evals_used: u64,
}

/// Estimate the fidelity of `expl` around `x_q` against the current model
/// from `n_perturbations` seeded probes drawn with [`orthogonal_probes`].
pub fn verify<P: Predictor + ?Sized>(
    expl: &Explanation,
    x_q: &[f64],
    model: &P,
    cfg: &VerificationConfig,
    seed: u64,
) -> Result<VerificationResult> {
    verify_with_threshold(expl, x_q, model, cfg, cfg.fidelity_threshold, seed)
}

/// As [`verify`] with an explicit pass threshold.
pub fn verify_with_threshold<P: Predictor + ?Sized>(
    expl: &Explanation,
    x_q: &[f64],
    model: &P,
    cfg: &VerificationConfig,
    threshold: f64,
    seed: u64,
) -> Result<VerificationResult> {
    if x_q.len() != model.input_dim() {
        return Err(XaasError::DimensionMismatch {
            expected: model.input_dim(),
            got: x_q.len(),
        });
    }
    let n = cfg.n_perturbations.max(1);
    let probes = orthogonal_probes(x_q, n, cfg.perturbation_scale, seed);
    let measured = fidelity(expl, model, &probes)?;
    Ok(VerificationResult {
        valid: measured >= threshold,
        measured_fidelity: measured,
        evals_used: n as u64,
    })
}

/// One cached explanation with the model it was generated under and the
/// model it is checked against.
pub struct DetectionCase<'a, P: ?Sized> {
    pub x: &'a [f64],
    pub explanation: &'a Explanation,
    pub drifted: &'a P,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Fraction of truly invalid explanations rejected. `None` when no case
    /// was truly invalid.
    pub detection: Option<f64>,
    /// Fraction of truly valid explanations rejected. `None` when no case was
    /// truly valid.
    pub false_positive: Option<f64>,
    pub cost_ratio: f64,
    pub n: usize,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub truly_invalid: usize,
    pub truly_valid: usize,
}

/// Probes used for the ground-truth fidelity of each case.
pub const GROUND_TRUTH_PROBES: usize = 200;

/// Compare verification decisions with ground truth: a case is truly invalid
/// iff its fidelity on [`GROUND_TRUTH_PROBES`] fresh probes against the
/// drifted model is below the threshold. `regen_cost` is the mean base cost
/// of regenerating an explanation.
pub fn detection_rate_experiment<P: Predictor + ?Sized>(
    cases: &[DetectionCase<'_, P>],
    cfg: &VerificationConfig,
    regen_cost: f64,
    seeds: Vec<u64>,
) -> Result<DetectionReport> {
    if cases.is_empty() {
        return Err(XaasError::Empty("detection cases"));
    }
    let mut invalid = 0usize;
    let mut valid = 0usize;
    let mut caught = 0usize;
    let mut false_pos = 0usize;
    for c in cases {
        let probes = local_probes(
            c.x,
            GROUND_TRUTH_PROBES,
            cfg.perturbation_scale,
            crate::rng::derive(c.seed, 0x6A0D),
        );
        let truth = fidelity(c.explanation, c.drifted, &probes)?;
        let res = verify(c.explanation, c.x, c.drifted, cfg, c.seed)?;
        if truth < cfg.fidelity_threshold {
            invalid += 1;
            caught += usize::from(!res.valid);
        } else {
            valid += 1;
            false_pos += usize::from(!res.valid);
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(DetectionReport {
        detection: rate(caught, invalid),
        false_positive: rate(false_pos, valid),
        cost_ratio: cfg.n_perturbations as f64 / regen_cost,
        n: cfg.n_perturbations,
        threshold: cfg.fidelity_threshold,
        seeds,
        truly_invalid: invalid,
        truly_valid: valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{explain_gradient, ExplainerConfig, Surrogate};
    use crate::model::ModelHandle;

    #[test]
    fn taylor_surrogate_of_linear_model_passes() {
        let m = ModelHandle::random_linear("l", 6, 2, 3, 0.5).unwrap();
        let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.6];
        let e = explain_gradient(&m, &x, 1, &ExplainerConfig::default()).unwrap();
        let r = verify(&e, &x, &m, &VerificationConfig::default(), 9).unwrap();
        assert!(r.valid);
        assert!(r.measured_fidelity >= 0.99);
        assert_eq!(r.evals_used, 15);
    }

    #[test]
    fn threshold_monotone() {
        let m = ModelHandle::random_mlp2("m", 4, 8, 2, 3, 4.0).unwrap();
        let x = [0.5, -0.5, 0.2, 0.1];
        let mut e = explain_gradient(&m, &x, 1, &ExplainerConfig::default()).unwrap();
        e.surrogate = Surrogate {
            w: e.surrogate.w.iter().map(|v| -v).collect(),
            b: e.surrogate.b,
        };
        let cfg = VerificationConfig::default();
        let mut prev = true;
        for t in [0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0] {
            let r = verify_with_threshold(&e, &x, &m, &cfg, t, 4).unwrap();
            assert!(prev || !r.valid);
            prev = r.valid;
        }
    }

    #[test]
    fn empty_experiment_is_an_error() {
        let cases: Vec<DetectionCase<'_, ModelHandle>> = Vec::new();
        assert!(detection_rate_experiment(&cases, &VerificationConfig::default(), 500.0, vec![]).is_err());
    }
}
