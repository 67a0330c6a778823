//! Parameter sweeps over the base scenario, written as CSV rows.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Mode, SimConfig};
use crate::engine::{run_simulation, RunOptions};
use crate::error::{Result, SimError};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Capacity of both tiers, on a larger cluster pool.
    CacheSize,
    /// Fleet size at a fixed per-device request rate.
    DeviceScale,
    /// Aggregate request rate at a fixed fleet.
    LoadScale,
    /// Fraction of low-tier devices, the rest split evenly.
    Heterogeneity,
    /// Fixed similarity threshold (adaptation disabled).
    EpsSim,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::CacheSize,
        Experiment::DeviceScale,
        Experiment::LoadScale,
        Experiment::Heterogeneity,
        Experiment::EpsSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::CacheSize => "cache_size",
            Experiment::DeviceScale => "device_scale",
            Experiment::LoadScale => "load_scale",
            Experiment::Heterogeneity => "heterogeneity",
            Experiment::EpsSim => "eps_sim",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Experiment::CacheSize => vec![500.0, 1000.0, 2000.0],
            Experiment::DeviceScale => vec![10.0, 100.0, 1000.0],
            Experiment::LoadScale => vec![150.0, 200.0, 250.0, 300.0],
            Experiment::Heterogeneity => vec![0.2, 0.5, 0.8],
            Experiment::EpsSim => vec![0.08, 0.12, 0.16, 0.2],
        }
    }

    pub fn default_modes(self) -> Vec<Mode> {
        match self {
            Experiment::CacheSize | Experiment::EpsSim => vec![Mode::Xaas],
            Experiment::DeviceScale | Experiment::Heterogeneity => vec![Mode::Xaas, Mode::Edgexai],
            Experiment::LoadScale => vec![Mode::Xaas, Mode::Edgexai, Mode::Cloudxai, Mode::Localgen],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SimError::Config(format!("unknown experiment {s:?}")))
    }
}

/// The base config with one grid value applied.
pub fn sweep_config(base: &SimConfig, exp: Experiment, value: f64) -> Result<SimConfig> {
    let mut cfg = base.clone();
    let sw = &base.sweep;
    let w = &mut cfg.workload;
    match exp {
        Experiment::CacheSize => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(SimError::Config(format!("cache size must be a positive integer, got {value}")));
            }
            // Both tiers: a larger shared tier would absorb every local
            // eviction and hide the capacity.
            cfg.pipeline.cache.local_capacity = value as usize;
            cfg.pipeline.cache.global_capacity = value as usize;
            w.cluster_count = sw.cache_size_cluster_count;
        }
        Experiment::DeviceScale => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(SimError::Config(format!("device count must be a positive integer, got {value}")));
            }
            w.num_devices = value as usize;
            w.arrival_rate = sw.device_scale_rate_per_device * value;
            w.duration_hours = sw.device_scale_hours;
            w.warmup_hours = sw.device_scale_warmup_hours;
            w.bucket_hours = w.bucket_hours.min(sw.device_scale_hours);
        }
        Experiment::LoadScale => {
            w.arrival_rate = value;
            w.duration_hours = sw.load_scale_hours;
            w.warmup_hours = sw.load_scale_warmup_hours;
            w.bucket_hours = w.bucket_hours.min(sw.load_scale_hours);
        }
        Experiment::Heterogeneity => {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::Config(format!("low-tier fraction must be in [0, 1], got {value}")));
            }
            let rest = (1.0 - value) / 2.0;
            w.tier_mix = [value, rest, rest];
            w.duration_hours = sw.heterogeneity_hours;
        }
        Experiment::EpsSim => {
            let c = &mut cfg.pipeline.cache;
            c.eps_sim = value;
            c.eps_min = value;
            c.eps_max = value;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One CSV line: a grid point, a mode and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: Experiment,
    pub grid_value: f64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub seed: u64,
    pub issued: usize,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub hit_rate: f64,
    pub hit_rate_local: f64,
    pub hit_rate_global: f64,
    pub throughput_rps: f64,
    pub success_rate: f64,
    pub sla_rate: f64,
    pub mean_fidelity: f64,
    pub config_hash: String,
}

impl SweepRow {
    pub fn new(experiment: Experiment, grid_value: f64, mode: Mode, ablation: Ablation, r: &MetricsReport) -> Self {
        Self {
            experiment,
            grid_value,
            mode,
            ablation,
            seed: r.seed,
            issued: r.issued,
            mean_latency_ms: r.mean_latency_ms,
            p50_latency_ms: r.p50_latency_ms,
            p95_latency_ms: r.p95_latency_ms,
            hit_rate: r.hit_rate,
            hit_rate_local: r.hit_rate_local,
            hit_rate_global: r.hit_rate_global,
            throughput_rps: r.throughput_rps,
            success_rate: r.success_rate,
            sla_rate: r.sla_rate,
            mean_fidelity: r.mean_fidelity,
            config_hash: r.config_hash.clone(),
        }
    }
}

/// Run every (grid value, mode, seed) combination in that order.
pub fn run_sweep(
    base: &SimConfig,
    exp: Experiment,
    grid: &[f64],
    modes: &[Mode],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len() * modes.len() * seeds.len());
    for &value in grid {
        let cfg = sweep_config(base, exp, value)?;
        for &mode in modes {
            for &seed in seeds {
                let out = run_simulation(&cfg, RunOptions::new(mode, Ablation::None, seed))?;
                rows.push(SweepRow::new(exp, value, mode, Ablation::None, &out.report));
            }
        }
    }
    Ok(rows)
}

/// Mean steady-state hit rate at one revisit probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub revisit_prob: f64,
    pub mean_hit_rate: f64,
    pub target_hit_rate: f64,
}

/// Sweep the workload revisit probability for the scenario's locality
/// calibration. Returns one point per grid value plus the index of the one
/// closest to the scenario target.
pub fn calibrate_revisit(base: &SimConfig, grid: &[f64], seeds: &[u64]) -> Result<(Vec<CalibrationPoint>, usize)> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(SimError::Config("calibration needs a grid and seeds".into()));
    }
    let target = base.workload.scenario.target_hit_rate();
    let mut points = Vec::with_capacity(grid.len());
    for &p in grid {
        let mut cfg = base.clone();
        cfg.workload.revisit_prob = p;
        cfg.validate()?;
        let mut total = 0.0;
        for &seed in seeds {
            total += run_simulation(&cfg, RunOptions::new(Mode::Xaas, Ablation::None, seed))?
                .report
                .hit_rate;
        }
        points.push(CalibrationPoint {
            revisit_prob: p,
            mean_hit_rate: total / seeds.len() as f64,
            target_hit_rate: target,
        });
    }
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1.mean_hit_rate - target)
                .abs()
                .total_cmp(&(b.1.mean_hit_rate - target).abs())
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok((points, best))
}

pub fn write_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(SimError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values_map_onto_config() {
        let base = SimConfig::default();
        let c = sweep_config(&base, Experiment::CacheSize, 2000.0).unwrap();
        assert_eq!(c.pipeline.cache.local_capacity, 2000);
        assert_eq!(c.pipeline.cache.global_capacity, 2000);
        let c = sweep_config(&base, Experiment::DeviceScale, 100.0).unwrap();
        assert_eq!(c.workload.num_devices, 100);
        assert!((c.workload.arrival_rate - 100.0 * base.sweep.device_scale_rate_per_device).abs() < 1e-12);
        let c = sweep_config(&base, Experiment::Heterogeneity, 0.8).unwrap();
        let mix = c.workload.tier_mix;
        assert_eq!(mix[0], 0.8);
        assert!((mix[1] - 0.1).abs() < 1e-12 && mix[1] == mix[2]);
        let c = sweep_config(&base, Experiment::EpsSim, 0.1).unwrap();
        assert_eq!((c.pipeline.cache.eps_min, c.pipeline.cache.eps_max), (0.1, 0.1));
        assert!(sweep_config(&base, Experiment::CacheSize, 0.5).is_err());
        assert!(sweep_config(&base, Experiment::Heterogeneity, 1.5).is_err());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
    }
}
