//! Synthetic request streams: a device fleet, a pool of recurring input
//! clusters with Zipf popularity, and Poisson arrivals.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};
use xaas_core::embedding::{distance, Embedder};
use xaas_core::explain::confident_input;
use xaas_core::model::ModelHandle;
use xaas_core::rng::{derive, seeded, standard_normal};
use xaas_core::selector::{DeviceProfile, DeviceTier};

use crate::config::{SimConfig, SystemConfig, WorkloadConfig};
use crate::error::Result;

const STREAM_ARRIVALS: u64 = 1;
const STREAM_CONTENT: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_FLEET: u64 = 4;
const MAX_CENTER_ATTEMPTS: usize = 200;

pub const MS_PER_HOUR: f64 = 3_600_000.0;

/// Uniform round trip in `[base (1 - frac), base (1 + frac)]`.
pub fn network_jitter(base: f64, frac: f64, rng: &mut impl Rng) -> f64 {
    if frac == 0.0 || base == 0.0 {
        return base;
    }
    base * (1.0 + frac * (2.0 * rng.random::<f64>() - 1.0))
}

/// Devices with tiers in the configured proportions (shuffled) and home
/// edges assigned round-robin.
pub fn build_fleet(w: &WorkloadConfig, s: &SystemConfig, seed: u64) -> Vec<DeviceProfile> {
    let n = w.num_devices;
    let n_low = (w.tier_mix[0] * n as f64).round() as usize;
    let n_mid = ((w.tier_mix[1] * n as f64).round() as usize).min(n - n_low.min(n));
    let mut tiers: Vec<DeviceTier> = (0..n)
        .map(|i| {
            if i < n_low {
                DeviceTier::Low
            } else if i < n_low + n_mid {
                DeviceTier::Mid
            } else {
                DeviceTier::High
            }
        })
        .collect();
    tiers.shuffle(&mut seeded(derive(seed, STREAM_FLEET)));
    tiers
        .into_iter()
        .enumerate()
        .map(|(id, tier)| DeviceProfile {
            id,
            tier,
            capacity: s.device_capacity.get(tier),
            bandwidth: s.device_bandwidth.get(tier),
            latency_tolerance_ms: w.rho_lat,
            home_edge: id % s.num_edges,
        })
        .collect()
}

/// Recurring input neighborhoods. Centers are confident inputs of the model,
/// pairwise separated in embedding space.
#[derive(Debug, Clone)]
pub struct ClusterPool {
    centers: Vec<Vec<f64>>,
    zipf: Option<Zipf<f64>>,
}

impl ClusterPool {
    pub fn generate(w: &WorkloadConfig, model: &ModelHandle, embedder: &Embedder, seed: u64) -> Result<Self> {
        let mut rng = seeded(derive(seed, STREAM_POOL));
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(w.cluster_count);
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(w.cluster_count);
        for _ in 0..w.cluster_count {
            let mut chosen = None;
            for _ in 0..MAX_CENTER_ATTEMPTS {
                let x = confident_input(model, &mut rng, w.min_confidence);
                let e = embedder.embed(&x)?;
                let mut separated = true;
                for other in &embeddings {
                    if distance(&e, other)? < w.min_center_separation {
                        separated = false;
                        break;
                    }
                }
                chosen = Some((x, e));
                if separated {
                    break;
                }
            }
            let (x, e) = chosen.expect("at least one attempt");
            centers.push(x);
            embeddings.push(e);
        }
        let zipf = (!centers.is_empty())
            .then(|| Zipf::new(centers.len() as f64, w.zipf_exponent).expect("valid zipf parameters"));
        Ok(Self { centers, zipf })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Cluster index by popularity rank.
    pub fn sample_cluster(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        self.zipf.as_ref().map(|z| z.sample(rng) as usize - 1)
    }

    /// A member of cluster `c`: Gaussian around the center, clamped to the
    /// input box.
    pub fn member(&self, c: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.centers[c]
            .iter()
            .map(|v| (v + spread * standard_normal(rng)).clamp(-1.0, 1.0))
            .collect()
    }
}

/// One request as produced by the generator, before the device runs
/// inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestSpec {
    pub id: u64,
    pub t_ms: f64,
    pub device: usize,
    pub x: Vec<f64>,
    /// Pool cluster the input was drawn from; `None` for one-off inputs.
    pub cluster: Option<usize>,
}

/// Seeded request stream up to the configured horizon.
pub struct Workload<'a> {
    w: &'a WorkloadConfig,
    model: &'a ModelHandle,
    pool: ClusterPool,
    arrivals: ChaCha8Rng,
    content: ChaCha8Rng,
    gap: Exp<f64>,
    t_ms: f64,
    horizon_ms: f64,
    next_id: u64,
}

impl<'a> Workload<'a> {
    pub fn new(cfg: &'a SimConfig, model: &'a ModelHandle, embedder: &Embedder, seed: u64) -> Result<Self> {
        let w = &cfg.workload;
        let pool = ClusterPool::generate(w, model, embedder, seed)?;
        Ok(Self {
            w,
            model,
            pool,
            arrivals: seeded(derive(seed, STREAM_ARRIVALS)),
            content: seeded(derive(seed, STREAM_CONTENT)),
            gap: Exp::new(w.arrival_rate / 1000.0).expect("positive rate"),
            t_ms: 0.0,
            horizon_ms: w.duration_hours * MS_PER_HOUR,
            next_id: 0,
        })
    }

    pub fn pool(&self) -> &ClusterPool {
        &self.pool
    }
}

impl Iterator for Workload<'_> {
    type Item = RequestSpec;

    fn next(&mut self) -> Option<RequestSpec> {
        self.t_ms += self.gap.sample(&mut self.arrivals);
        if self.t_ms >= self.horizon_ms {
            return None;
        }
        let device = self.arrivals.random_range(0..self.w.num_devices);
        let revisit = self.content.random::<f64>() < self.w.revisit_prob;
        let cluster = if revisit {
            self.pool.sample_cluster(&mut self.content)
        } else {
            None
        };
        let x = match cluster {
            Some(c) => self.pool.member(c, self.w.cluster_spread, &mut self.content),
            None => confident_input(self.model, &mut self.content, self.w.min_confidence),
        };
        let id = self.next_id;
        self.next_id += 1;
        Some(RequestSpec {
            id,
            t_ms: self.t_ms,
            device,
            x,
            cluster,
        })
    }
}

/// Wire-level view of a generated request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub request_id: u64,
    pub x: Vec<f64>,
    pub model_id: String,
    pub device_id: usize,
    pub prediction: usize,
    pub rho_fid: f64,
    pub rho_lat: f64,
    pub issued_at: f64,
}

/// Materialize the whole request stream against a fixed model.
pub fn generate_workload(cfg: &SimConfig, model: &ModelHandle, seed: u64) -> Result<Vec<ExplanationRequest>> {
    cfg.validate()?;
    let embedder = cfg.pipeline.embedder(cfg.workload.input_dim);
    Workload::new(cfg, model, &embedder, seed)?
        .map(|r| {
            Ok(ExplanationRequest {
                request_id: r.id,
                prediction: model.predict(&r.x)?.label,
                x: r.x,
                model_id: model.model_id().to_string(),
                device_id: r.device,
                rho_fid: cfg.workload.rho_fid,
                rho_lat: cfg.workload.rho_lat,
                issued_at: r.t_ms,
            })
        })
        .collect()
}
