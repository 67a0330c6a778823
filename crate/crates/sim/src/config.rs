//! Experiment configuration. One JSON document holds the workload, the
//! system constants and the shared pipeline settings; every field has a
//! default so partial documents are accepted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xaas_core::explain::SampleBudgets;
use xaas_core::pipeline::PipelineConfig;
use xaas_core::selector::DeviceTier;

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Manufacturing quality control.
    Mqc,
    /// Autonomous vehicle fleet.
    Avf,
    /// Healthcare monitoring.
    Hcm,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Mqc, Scenario::Avf, Scenario::Hcm];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Mqc => "mqc",
            Scenario::Avf => "avf",
            Scenario::Hcm => "hcm",
        }
    }

    /// Steady-state combined hit rate the preset is calibrated towards.
    pub fn target_hit_rate(self) -> f64 {
        match self {
            Scenario::Mqc => 0.742,
            Scenario::Avf => 0.685,
            Scenario::Hcm => 0.738,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SimError::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Xaas,
    Localgen,
    Cloudxai,
    Edgexai,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Xaas, Mode::Localgen, Mode::Cloudxai, Mode::Edgexai];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Xaas => "xaas",
            Mode::Localgen => "localgen",
            Mode::Cloudxai => "cloudxai",
            Mode::Edgexai => "edgexai",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SimError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoCache,
    NoVerify,
    NoAdaptive,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoCache,
        Ablation::NoVerify,
        Ablation::NoAdaptive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoCache => "no_cache",
            Ablation::NoVerify => "no_verify",
            Ablation::NoAdaptive => "no_adaptive",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SimError::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub scenario: Scenario,
    pub num_devices: usize,
    /// Requests per second over the whole fleet.
    pub arrival_rate: f64,
    /// Total simulated time, warm-up included.
    pub duration_hours: f64,
    /// Leading period excluded from steady-state metrics.
    pub warmup_hours: f64,
    /// Width of the time-series buckets.
    pub bucket_hours: f64,
    /// Size of the pool of recurring input clusters.
    pub cluster_count: usize,
    /// Probability that a request is drawn from the cluster pool rather than
    /// being a one-off input.
    pub revisit_prob: f64,
    /// Zipf exponent of cluster popularity.
    pub zipf_exponent: f64,
    /// Per-coordinate standard deviation of cluster members.
    pub cluster_spread: f64,
    /// Minimum embedding distance between cluster centers.
    pub min_center_separation: f64,
    /// Minimum predicted-class probability of generated inputs.
    pub min_confidence: f64,
    pub input_dim: usize,
    pub rho_fid: f64,
    pub rho_lat: f64,
    pub seed: u64,
    /// Fractions of low, mid and high tier devices.
    pub tier_mix: [f64; 3],
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Mqc,
            num_devices: 150,
            arrival_rate: 0.15,
            duration_hours: 24.0,
            warmup_hours: 2.0,
            bucket_hours: 1.0,
            cluster_count: 120,
            revisit_prob: 0.9,
            zipf_exponent: 1.0,
            cluster_spread: 0.02,
            min_center_separation: 0.3,
            min_confidence: xaas_core::explain::CALIBRATION_MIN_CONFIDENCE,
            input_dim: 8,
            rho_fid: 0.945,
            rho_lat: 250.0,
            seed: 1,
            tier_mix: [0.4, 0.4, 0.2],
        }
    }
}

/// Per-tier device constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierValues {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl TierValues {
    pub fn get(&self, tier: DeviceTier) -> f64 {
        match tier {
            DeviceTier::Low => self.low,
            DeviceTier::Mid => self.mid,
            DeviceTier::High => self.high,
        }
    }
}

/// The served model: an 8-class tanh network like the calibration family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub model_id: String,
    pub hidden: usize,
    pub num_classes: usize,
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            model_id: "scenario".into(),
            hidden: 32,
            num_classes: 8,
            weight_scale: 5.0,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub num_edges: usize,
    /// Evaluations per ms of one edge worker.
    pub edge_capacity: f64,
    pub edge_workers: usize,
    pub cloud_capacity: f64,
    pub cloud_workers: usize,
    pub device_capacity: TierValues,
    /// KB per ms.
    pub device_bandwidth: TierValues,
    /// Device to home edge round trip.
    pub rtt_edge_ms: f64,
    /// Extra round trip from the home edge to another edge.
    pub rtt_inter_edge_ms: f64,
    /// Device to cloud round trip.
    pub rtt_cloud_ms: f64,
    pub jitter_frac: f64,
    pub drift_period_hours: f64,
    pub drift_magnitude: f64,
    pub model: ModelSpec,
    /// Probes used to measure the fidelity of every served cache hit.
    pub served_fidelity_probes: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_edges: 5,
            edge_capacity: 3.7,
            edge_workers: 9,
            cloud_capacity: 40.0,
            cloud_workers: 16,
            device_capacity: TierValues {
                low: DeviceTier::Low.default_capacity(),
                mid: DeviceTier::Mid.default_capacity(),
                high: DeviceTier::High.default_capacity(),
            },
            device_bandwidth: TierValues {
                low: 0.5,
                mid: 2.0,
                high: 10.0,
            },
            rtt_edge_ms: 10.0,
            rtt_inter_edge_ms: 6.0,
            rtt_cloud_ms: 200.0,
            jitter_frac: 0.3,
            drift_period_hours: 6.0,
            drift_magnitude: 0.3,
            model: ModelSpec::default(),
            served_fidelity_probes: 32,
        }
    }
}

/// Settings of the sweep experiments that differ from the base scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Pool size for the cache-size sweep; the base pool fits in any of
    /// the swept capacities.
    pub cache_size_cluster_count: usize,
    /// Requests per second per device.
    pub device_scale_rate_per_device: f64,
    pub device_scale_hours: f64,
    pub device_scale_warmup_hours: f64,
    pub load_scale_hours: f64,
    pub load_scale_warmup_hours: f64,
    pub heterogeneity_hours: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            cache_size_cluster_count: 1500,
            device_scale_rate_per_device: 0.01,
            device_scale_hours: 0.5,
            device_scale_warmup_hours: 0.1,
            load_scale_hours: 0.05,
            load_scale_warmup_hours: 0.0167,
            heterogeneity_hours: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub workload: WorkloadConfig,
    pub system: SystemConfig,
    pub pipeline: PipelineConfig,
    pub sweep: SweepConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::preset(Scenario::Mqc)
    }
}

/// Sample budgets actually spent by the simulator. Latency is still charged
/// at each method's full base cost.
pub fn sim_budgets() -> SampleBudgets {
    SampleBudgets {
        lime_local: 128,
        kernel_shap: 256,
    }
}

impl SimConfig {
    /// Calibrated scenario preset.
    pub fn preset(scenario: Scenario) -> Self {
        let pipeline = PipelineConfig {
            budgets: sim_budgets(),
            ..PipelineConfig::default()
        };
        let mut workload = WorkloadConfig {
            scenario,
            ..WorkloadConfig::default()
        };
        let mut system = SystemConfig::default();
        match scenario {
            Scenario::Mqc => {}
            Scenario::Avf => {
                workload.num_devices = 80;
                workload.arrival_rate = 0.12;
                workload.rho_lat = 150.0;
                workload.tier_mix = [0.2, 0.5, 0.3];
                system.model.seed = 2025;
            }
            Scenario::Hcm => {
                workload.num_devices = 200;
                workload.cluster_count = 120;
                workload.revisit_prob = 0.85;
                workload.rho_lat = 220.0;
                workload.tier_mix = [0.5, 0.35, 0.15];
                system.model.seed = 2026;
            }
        }
        Self {
            workload,
            system,
            pipeline,
            sweep: SweepConfig::default(),
        }
    }

    // Negated comparisons so that NaN fails every check.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let w = &self.workload;
        let s = &self.system;
        let bad = |msg: &str| Err(SimError::Config(msg.to_string()));
        if w.num_devices == 0 {
            return bad("num_devices must be positive");
        }
        if !(w.arrival_rate > 0.0 && w.arrival_rate.is_finite()) {
            return bad("arrival_rate must be positive");
        }
        if !(w.duration_hours > w.warmup_hours && w.warmup_hours >= 0.0) {
            return bad("duration_hours must exceed warmup_hours");
        }
        if !(w.bucket_hours > 0.0) {
            return bad("bucket_hours must be positive");
        }
        if !(0.0..=1.0).contains(&w.revisit_prob) {
            return bad("revisit_prob must be in [0, 1]");
        }
        if w.revisit_prob > 0.0 && w.cluster_count == 0 {
            return bad("cluster_count must be positive when revisit_prob > 0");
        }
        if w.zipf_exponent < 0.0 || w.cluster_spread < 0.0 {
            return bad("zipf_exponent and cluster_spread must be non-negative");
        }
        if !(0.0..1.0).contains(&w.min_confidence) {
            return bad("min_confidence must be in [0, 1)");
        }
        if w.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if !(0.0..=1.0).contains(&w.rho_fid) || !(w.rho_lat > 0.0) {
            return bad("rho_fid must be in [0, 1] and rho_lat positive");
        }
        if w.tier_mix.iter().any(|v| *v < 0.0) || (w.tier_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("tier_mix must be non-negative and sum to 1");
        }
        if s.num_edges == 0 || s.edge_workers == 0 || s.cloud_workers == 0 {
            return bad("edge and cloud pools must be non-empty");
        }
        let caps = [
            s.edge_capacity,
            s.cloud_capacity,
            s.device_capacity.low,
            s.device_capacity.mid,
            s.device_capacity.high,
            s.device_bandwidth.low,
            s.device_bandwidth.mid,
            s.device_bandwidth.high,
        ];
        if caps.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad("capacities and bandwidths must be positive");
        }
        if [s.rtt_edge_ms, s.rtt_inter_edge_ms, s.rtt_cloud_ms]
            .iter()
            .any(|r| !(*r >= 0.0))
        {
            return bad("round trip times must be non-negative");
        }
        if s.rtt_cloud_ms < s.rtt_edge_ms {
            return bad("rtt_cloud_ms must be at least rtt_edge_ms");
        }
        if !(0.0..1.0).contains(&s.jitter_frac) {
            return bad("jitter_frac must be in [0, 1)");
        }
        if !(s.drift_period_hours > 0.0) || s.drift_magnitude < 0.0 {
            return bad("drift period must be positive and magnitude non-negative");
        }
        if s.served_fidelity_probes == 0 {
            return bad("served_fidelity_probes must be positive");
        }
        let c = &self.pipeline.cache;
        if !(c.eps_min <= c.eps_sim && c.eps_sim <= c.eps_max) {
            return bad("eps_sim must lie within [eps_min, eps_max]");
        }
        if c.local_capacity == 0 || c.global_capacity == 0 {
            return bad("cache capacities must be positive");
        }
        if self.pipeline.methods.is_empty() {
            return bad("at least one method profile is required");
        }
        if self.pipeline.methods.iter().any(|m| m.base_cost == 0) {
            return bad("method base costs must be at least 1");
        }
        let v = &self.pipeline.verification;
        if v.n_perturbations == 0 || !(v.fidelity_threshold > 0.0 && v.fidelity_threshold <= 1.0) {
            return bad("verification needs n >= 1 and a threshold in (0, 1]");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
