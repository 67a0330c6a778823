//! Verification detection benchmark on the scenario model family.

use xaas_core::explain::{confident_input, MethodId, MethodProfile};
use xaas_core::model::ModelHandle;
use xaas_core::rng::{derive, seeded};
use xaas_core::verify::{detection_rate_experiment, DetectionCase, DetectionReport};

use crate::config::{sim_budgets, SimConfig};
use crate::engine::scenario_model;
use crate::error::{Result, SimError};

/// Cached explanations per seed.
pub const BENCH_CASES_PER_SEED: usize = 1000;

/// Generate explanations under the scenario model, drift it by `magnitude`
/// and score verification against full-probe ground truth. Only
/// explanations the cache could actually serve (generation-time fidelity at
/// or above the workload's fidelity requirement) become cases. The cost
/// ratio is taken against the kernel SHAP base cost.
pub fn verify_bench(cfg: &SimConfig, magnitude: f64, seeds: &[u64]) -> Result<DetectionReport> {
    if seeds.is_empty() {
        return Err(SimError::Config("verify bench needs at least one seed".into()));
    }
    let base = scenario_model(cfg)?;
    let vcfg = &cfg.pipeline.verification;
    let budgets = sim_budgets();
    let mut pipeline = cfg.pipeline.clone();
    pipeline.budgets = budgets;

    let mut stored: Vec<(Vec<f64>, xaas_core::explain::Explanation, usize, u64)> = Vec::new();
    let mut drifted: Vec<ModelHandle> = Vec::with_capacity(seeds.len());
    for (si, &seed) in seeds.iter().enumerate() {
        drifted.push(base.update_model(derive(seed, 0xD1F7), magnitude));
        let mut rng = seeded(derive(seed, 0xBE4C));
        for j in 0..BENCH_CASES_PER_SEED {
            let x = confident_input(&base, &mut rng, cfg.workload.min_confidence);
            let method = MethodId::ALL[j % MethodId::ALL.len()];
            let case_seed = derive(seed, j as u64);
            let e = pipeline.generate(method, &base, &x, case_seed)?;
            if e.fidelity >= cfg.workload.rho_fid {
                stored.push((x, e, si, derive(case_seed, 0x5EED)));
            }
        }
    }
    let cases: Vec<DetectionCase<'_, ModelHandle>> = stored
        .iter()
        .map(|(x, e, si, s)| DetectionCase {
            x,
            explanation: e,
            drifted: &drifted[*si],
            seed: *s,
        })
        .collect();
    let regen = MethodProfile::defaults()
        .into_iter()
        .find(|p| p.method == MethodId::KernelShap)
        .map_or(500.0, |p| p.base_cost as f64);
    Ok(detection_rate_experiment(&cases, vcfg, regen, seeds.to_vec())?)
}
