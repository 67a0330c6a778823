//! Per-request records and the run report derived from them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use xaas_core::explain::MethodId;
use xaas_core::selector::LocationKind;

use crate::workload::MS_PER_HOUR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    CacheLocal,
    CacheGlobal,
    Generated,
    Failed,
}

impl Source {
    pub fn is_hit(self) -> bool {
        matches!(self, Source::CacheLocal | Source::CacheGlobal)
    }
}

/// Outcome of one request; also the event-log line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub device: usize,
    pub cluster: Option<usize>,
    pub arrival_ms: f64,
    pub done_ms: f64,
    pub latency_ms: f64,
    pub source: Source,
    pub method: Option<MethodId>,
    pub location: Option<LocationKind>,
    /// Fidelity of the served explanation around the query, measured
    /// against the model current at serving time.
    pub fidelity: f64,
    pub rho_fid: f64,
    pub rho_lat: f64,
    pub sla_met: bool,
    pub success: bool,
    pub verified: bool,
    /// False when the selector found no pair meeting both requirements.
    pub feasible: bool,
    pub model_version: u64,
    pub eps_sim: f64,
}

impl RequestRecord {
    /// Success as recomputed from the other fields.
    pub fn recomputed_success(&self) -> bool {
        self.source != Source::Failed && self.latency_ms <= self.rho_lat && self.fidelity >= self.rho_fid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub start_hour: f64,
    pub requests: usize,
    pub hit_rate: f64,
    pub mean_latency_ms: f64,
    pub mean_fidelity: f64,
    pub success_rate: f64,
    /// Similarity threshold in force for the bucket's last request.
    pub eps_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: String,
    pub ablation: String,
    pub seed: u64,
    pub config_hash: String,
    pub issued: usize,
    pub hits_local: usize,
    pub hits_global: usize,
    pub generated: usize,
    pub failed: usize,
    /// Requests arriving after warm-up.
    pub measured: usize,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub hit_rate_local: f64,
    pub hit_rate_global: f64,
    pub hit_rate: f64,
    pub offered_rps: f64,
    pub throughput_rps: f64,
    pub success_rate: f64,
    pub sla_rate: f64,
    pub mean_fidelity: f64,
    pub verifications: u64,
    pub verification_failures: u64,
    pub model_updates: usize,
    pub eps_final: f64,
    pub eps_history: Vec<f64>,
    pub buckets: Vec<BucketStats>,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Run-level facts that are not visible in the records.
#[derive(Debug, Clone, Default)]
pub struct RunFacts {
    pub scenario: String,
    pub mode: String,
    pub ablation: String,
    pub seed: u64,
    pub config_hash: String,
    pub warmup_ms: f64,
    pub horizon_ms: f64,
    pub bucket_ms: f64,
    pub verifications: u64,
    pub verification_failures: u64,
    pub model_updates: usize,
    pub eps_final: f64,
    pub eps_history: Vec<f64>,
}

pub fn build_report(records: &[RequestRecord], facts: RunFacts) -> MetricsReport {
    let count = |src: Source| records.iter().filter(|r| r.source == src).count();
    let measured: Vec<&RequestRecord> = records
        .iter()
        .filter(|r| r.arrival_ms >= facts.warmup_ms && r.arrival_ms < facts.horizon_ms)
        .collect();
    let served: Vec<&RequestRecord> = measured
        .iter()
        .copied()
        .filter(|r| r.source != Source::Failed)
        .collect();
    let mut lat: Vec<f64> = served.iter().map(|r| r.latency_ms).collect();
    lat.sort_by(f64::total_cmp);
    let window_s = (facts.horizon_ms - facts.warmup_ms) / 1000.0;
    let m = measured.len();
    let local = measured.iter().filter(|r| r.source == Source::CacheLocal).count();
    let global = measured.iter().filter(|r| r.source == Source::CacheGlobal).count();
    let completed = served.iter().filter(|r| r.done_ms <= facts.horizon_ms).count();

    let n_buckets = (facts.horizon_ms / facts.bucket_ms).ceil() as usize;
    let mut buckets: Vec<Vec<&RequestRecord>> = vec![Vec::new(); n_buckets];
    for r in records {
        let b = ((r.arrival_ms / facts.bucket_ms) as usize).min(n_buckets.saturating_sub(1));
        buckets[b].push(r);
    }
    let buckets = buckets
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            let ok: Vec<&&RequestRecord> = rs.iter().filter(|r| r.source != Source::Failed).collect();
            BucketStats {
                start_hour: i as f64 * facts.bucket_ms / MS_PER_HOUR,
                requests: rs.len(),
                hit_rate: ratio(rs.iter().filter(|r| r.source.is_hit()).count(), rs.len()),
                mean_latency_ms: mean(ok.iter().map(|r| r.latency_ms)),
                mean_fidelity: mean(ok.iter().map(|r| r.fidelity)),
                success_rate: ratio(rs.iter().filter(|r| r.success).count(), rs.len()),
                eps_sim: rs.last().map_or(facts.eps_final, |r| r.eps_sim),
            }
        })
        .collect();

    MetricsReport {
        scenario: facts.scenario,
        mode: facts.mode,
        ablation: facts.ablation,
        seed: facts.seed,
        config_hash: facts.config_hash,
        issued: records.len(),
        hits_local: count(Source::CacheLocal),
        hits_global: count(Source::CacheGlobal),
        generated: count(Source::Generated),
        failed: count(Source::Failed),
        measured: m,
        mean_latency_ms: mean(lat.iter().copied()),
        p50_latency_ms: percentile(&lat, 0.5),
        p95_latency_ms: percentile(&lat, 0.95),
        hit_rate_local: ratio(local, m),
        hit_rate_global: ratio(global, m),
        hit_rate: ratio(local + global, m),
        offered_rps: m as f64 / window_s,
        throughput_rps: completed as f64 / window_s,
        success_rate: ratio(measured.iter().filter(|r| r.success).count(), m),
        sla_rate: ratio(measured.iter().filter(|r| r.sla_met).count(), m),
        mean_fidelity: mean(served.iter().map(|r| r.fidelity)),
        verifications: facts.verifications,
        verification_failures: facts.verification_failures,
        model_updates: facts.model_updates,
        eps_final: facts.eps_final,
        eps_history: facts.eps_history,
        buckets,
    }
}

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
    pub ci95: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    let m = mean(values.iter().copied());
    if n < 2 {
        return Summary {
            mean: m,
            std_dev: 0.0,
            ci95: 0.0,
            n,
        };
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Summary {
        mean: m,
        std_dev: sd,
        ci95: t * sd / (n as f64).sqrt(),
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_latency_ms: Summary,
    pub p95_latency_ms: Summary,
    pub hit_rate: Summary,
    pub throughput_rps: Summary,
    pub success_rate: Summary,
    pub mean_fidelity: Summary,
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let s = |f: fn(&MetricsReport) -> f64| summarize(&reports.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        mean_latency_ms: s(|r| r.mean_latency_ms),
        p95_latency_ms: s(|r| r.p95_latency_ms),
        hit_rate: s(|r| r.hit_rate),
        throughput_rps: s(|r| r.throughput_rps),
        success_rate: s(|r| r.success_rate),
        mean_fidelity: s(|r| r.mean_fidelity),
    }
}
