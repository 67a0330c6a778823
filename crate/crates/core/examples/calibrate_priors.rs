//! Measure per-method fidelity priors on the calibration models.
//!
//! `cargo run --release -p xaas-core --example calibrate_priors [points]`

use xaas_core::explain::{calibrate_fidelity_priors, calibration_models, CALIBRATION_MIN_CONFIDENCE, ExplainerConfig, SampleBudgets};

fn main() -> xaas_core::Result<()> {
    let points = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(250);
    let priors = calibrate_fidelity_priors(
        &calibration_models(),
        points,
        CALIBRATION_MIN_CONFIDENCE,
        0xCA1B,
        &SampleBudgets::default(),
        &ExplainerConfig::default(),
    )?;
    for (method, prior) in priors {
        println!("{method:>14} {prior:.4}");
    }
    Ok(())
}
