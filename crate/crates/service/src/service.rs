//! The live orchestrator: the same lookup, selection and generation steps
//! the simulator drives, with wall-clock time and real locking.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use xaas_core::cache::{CacheEntry, CacheTier, Hit, InvalidationMode, Query, ThresholdAdapter, TierKind};
use xaas_core::embedding::Embedder;
use xaas_core::explain::{local_fidelity, Explanation, MethodId};
use xaas_core::model::{ModelDefinition, ModelHandle};
use xaas_core::pipeline::PipelineConfig;
use xaas_core::rng::{derive, fnv1a};
use xaas_core::selector::{select, DeviceProfile, DeviceTier, Location, LocationKind, Requirements, SelectionInput};
use xaas_sim::SimConfig;

use crate::error::{Result, ServiceError};
use crate::protocol::{ResponseSource, WireRequest, WireResponse};
use crate::registry::ModelRegistry;

const TAG_GENERATE: u64 = 0x6E4;
const TAG_SERVED: u64 = 0xF1D;

/// Seed for everything random in handling `request_id`.
pub fn request_seed(request_id: &str) -> u64 {
    fnv1a(request_id.as_bytes())
}

/// Seed the explainer receives for a generated response.
pub fn generation_seed(request_id: &str) -> u64 {
    derive(request_seed(request_id), TAG_GENERATE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub pipeline: PipelineConfig,
    pub num_edges: usize,
    /// Evaluations per ms, used by the selector's cost estimate.
    pub edge_capacity: f64,
    /// Nominal requester link, used for transfer time estimates.
    pub device_bandwidth: f64,
    pub served_fidelity_probes: usize,
    /// Bound on concurrent generations in the async server.
    pub workers: usize,
}

impl ServiceConfig {
    pub fn from_sim(cfg: &SimConfig, workers: usize) -> Self {
        Self {
            pipeline: cfg.pipeline.clone(),
            num_edges: cfg.system.num_edges,
            edge_capacity: cfg.system.edge_capacity,
            device_bandwidth: cfg.system.device_bandwidth.mid,
            served_fidelity_probes: cfg.system.served_fidelity_probes,
            workers: workers.max(1),
        }
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::from_sim(&SimConfig::default(), 4)
    }
}

struct Edge {
    local: RwLock<CacheTier>,
    inflight: Arc<AtomicUsize>,
}

/// Decrements an edge's in-flight count when the request finishes.
struct InflightGuard(Arc<AtomicUsize>);

impl Drop for InflightGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::Relaxed);
    }
}

/// A cache miss waiting for its explanation.
pub struct Miss {
    req: WireRequest,
    model: Arc<ModelHandle>,
    embedding: Vec<f64>,
    edge: usize,
    method: MethodId,
    feasible: bool,
    seed: u64,
    started: Instant,
    _guard: InflightGuard,
}

impl Miss {
    /// Everything generation needs, detached from the request state.
    pub fn job(&self) -> GenerationJob {
        GenerationJob {
            model: self.model.clone(),
            x: self.req.features.clone(),
            method: self.method,
            seed: derive(self.seed, TAG_GENERATE),
        }
    }
}

pub struct GenerationJob {
    pub model: Arc<ModelHandle>,
    pub x: Vec<f64>,
    pub method: MethodId,
    pub seed: u64,
}

pub enum Step {
    Done(WireResponse),
    Miss(Miss),
}

#[derive(Serialize)]
struct LogLine<'a> {
    ts: f64,
    request_id: &'a str,
    source: &'a str,
    method: &'a str,
    latency_ms: f64,
}

pub struct Service {
    cfg: ServiceConfig,
    registry: ModelRegistry,
    embedders: RwLock<HashMap<usize, Arc<Embedder>>>,
    edges: Vec<Edge>,
    global: RwLock<CacheTier>,
    adapter: Mutex<ThresholdAdapter>,
    epoch: Instant,
    log: Option<Mutex<Box<dyn Write + Send>>>,
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Self {
        let edges = (0..cfg.num_edges.max(1))
            .map(|_| Edge {
                local: RwLock::new(cfg.pipeline.local_tier()),
                inflight: Arc::new(AtomicUsize::new(0)),
            })
            .collect();
        Self {
            registry: ModelRegistry::new(),
            embedders: RwLock::new(HashMap::new()),
            edges,
            global: RwLock::new(cfg.pipeline.global_tier()),
            adapter: Mutex::new(ThresholdAdapter::new(&cfg.pipeline.cache, true)),
            epoch: Instant::now(),
            log: None,
            cfg,
        }
    }

    /// Emit one JSON line per served request to `sink`.
    pub fn with_log(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.log = Some(Mutex::new(sink));
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn register_model(&self, model: ModelHandle) -> Result<u64> {
        Ok(self.registry.register(model)?.version())
    }

    pub fn register_definition(&self, def: &ModelDefinition) -> Result<u64> {
        Ok(self.registry.register_definition(def)?.version())
    }

    /// Swap in a retrained model. Requests already running keep the
    /// snapshot they started with.
    pub fn bump_model(&self, model_id: &str, magnitude: f64, seed: u64) -> Result<u64> {
        let next = self.registry.bump(model_id, magnitude, seed)?;
        if self.cfg.pipeline.cache.invalidation == InvalidationMode::Eager {
            for e in &self.edges {
                e.local.write().invalidate_stale(model_id, next.version(), InvalidationMode::Eager);
            }
            self.global
                .write()
                .invalidate_stale(model_id, next.version(), InvalidationMode::Eager);
        }
        Ok(next.version())
    }

    pub fn eps(&self) -> f64 {
        self.adapter.lock().eps()
    }

    /// Entries per tier: one count per edge, then the global tier.
    pub fn cache_sizes(&self) -> (Vec<usize>, usize) {
        (
            self.edges.iter().map(|e| e.local.read().len()).collect(),
            self.global.read().len(),
        )
    }

    /// Copy of every entry in the global tier.
    pub fn global_entries(&self) -> Vec<CacheEntry> {
        self.global.read().entries().into_iter().map(|v| v.entry).collect()
    }

    fn embedder(&self, dim: usize) -> Arc<Embedder> {
        if let Some(e) = self.embedders.read().get(&dim) {
            return e.clone();
        }
        self.embedders
            .write()
            .entry(dim)
            .or_insert_with(|| Arc::new(self.cfg.pipeline.embedder(dim)))
            .clone()
    }

    fn now_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1000.0
    }

    /// Edge with the fewest requests in flight; ties go to the lowest index.
    fn pick_edge(&self) -> usize {
        self.edges
            .iter()
            .enumerate()
            .min_by_key(|(i, e)| (e.inflight.load(Ordering::Relaxed), *i))
            .map(|(i, _)| i)
            .expect("at least one edge")
    }

    /// Handle a request end to end on the calling thread.
    pub fn handle(&self, req: &WireRequest) -> Result<WireResponse> {
        match self.begin(req)? {
            Step::Done(r) => Ok(r),
            Step::Miss(miss) => {
                let expl = Self::generate(&self.cfg.pipeline, miss.job());
                self.complete(miss, expl?)
            }
        }
    }

    /// Validate, look up both tiers and, on a miss, choose the method.
    pub fn begin(&self, req: &WireRequest) -> Result<Step> {
        let started = Instant::now();
        req.validate()?;
        let model = self.registry.get(&req.model_id)?;
        if req.features.len() != model.input_dim() {
            return Err(ServiceError::InvalidRequest(format!(
                "model {} expects {} features, got {}",
                req.model_id,
                model.input_dim(),
                req.features.len()
            )));
        }
        if req.prediction >= model.num_classes() {
            return Err(ServiceError::InvalidRequest(format!(
                "prediction {} out of range for {} classes",
                req.prediction,
                model.num_classes()
            )));
        }
        let seed = request_seed(&req.request_id);
        let edge = self.pick_edge();
        self.edges[edge].inflight.fetch_add(1, Ordering::Relaxed);
        let guard = InflightGuard(self.edges[edge].inflight.clone());

        let embedding = self.embedder(model.input_dim()).embed(&req.features)?;
        let eps = self.eps();
        let q = Query {
            x: &req.features,
            embedding: &embedding,
            prediction: req.prediction,
            rho_fid: req.fid_threshold,
            seed,
            now: self.now_ms(),
        };
        let (hit, verifications, failures) = self.lookup(edge, &q, &model, eps)?;
        self.adapter
            .lock()
            .record(&self.cfg.pipeline.cache, hit.is_some(), verifications, failures);

        if let Some(hit) = hit {
            let fidelity = local_fidelity(
                &hit.explanation,
                &*model,
                &req.features,
                self.cfg.served_fidelity_probes,
                self.cfg.pipeline.explainer.perturbation_scale,
                derive(seed, TAG_SERVED),
            )?;
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            let resp = WireResponse {
                request_id: req.request_id.clone(),
                attribution: hit.explanation.attribution.clone(),
                method: hit.explanation.method.to_string(),
                source: match hit.tier {
                    TierKind::Local => ResponseSource::CacheLocal,
                    TierKind::Global => ResponseSource::CacheGlobal,
                },
                verified: hit.verified,
                fidelity,
                latency_ms,
                model_version: hit.model_version,
                sla_missed: latency_ms > req.latency_budget_ms,
            };
            self.log_response(&resp);
            return Ok(Step::Done(resp));
        }

        let (method, feasible) = self.choose_method(req, &model, edge);
        Ok(Step::Miss(Miss {
            req: req.clone(),
            model,
            embedding,
            edge,
            method,
            feasible,
            seed,
            started,
            _guard: guard,
        }))
    }

    /// Two-tier lookup under the tiers' reader/writer locks: scans run under
    /// shared locks, removals and promotion take the write lock briefly.
    fn lookup(&self, edge: usize, q: &Query<'_>, model: &ModelHandle, eps: f64) -> Result<(Option<Hit>, u32, u32)> {
        let cache = &self.cfg.pipeline.cache;
        let vcfg = &self.cfg.pipeline.verification;
        let local = &self.edges[edge].local;
        let scan = local.read().lookup(q, model, eps, cache.stale, vcfg)?;
        let (mut verifications, mut failures) = (scan.verifications, scan.verification_failures);
        if cache.evict_failed && !scan.failed.is_empty() {
            let mut tier = local.write();
            for id in &scan.failed {
                tier.remove(*id);
            }
        }
        if scan.hit.is_some() {
            return Ok((scan.hit, verifications, failures));
        }
        let scan = self.global.read().lookup(q, model, eps, cache.stale, vcfg)?;
        verifications += scan.verifications;
        failures += scan.verification_failures;
        if cache.evict_failed && !scan.failed.is_empty() {
            let mut tier = self.global.write();
            for id in &scan.failed {
                tier.remove(*id);
            }
        }
        if let Some(hit) = &scan.hit {
            // The entry may have been evicted since the scan; the hit is
            // still served, only the promotion is skipped.
            let promoted = self.global.read().get(hit.entry_id);
            if let Some(view) = promoted {
                let mut entry = view.entry;
                entry.inserted_at = q.now;
                entry.last_access = q.now;
                local.write().insert(entry)?;
            }
        }
        Ok((scan.hit, verifications, failures))
    }

    fn choose_method(&self, req: &WireRequest, model: &ModelHandle, edge: usize) -> (MethodId, bool) {
        let device = DeviceProfile {
            id: 0,
            tier: DeviceTier::Mid,
            capacity: DeviceTier::Mid.default_capacity(),
            bandwidth: self.cfg.device_bandwidth,
            latency_tolerance_ms: req.latency_budget_ms,
            home_edge: edge,
        };
        let locations = [Location {
            kind: LocationKind::Edge(edge),
            capacity: self.cfg.edge_capacity,
            queue_delay_ms: 0.0,
            rtt_ms: 0.0,
        }];
        let input = SelectionInput {
            req: Requirements {
                rho_fid: req.fid_threshold,
                rho_lat: req.latency_budget_ms,
            },
            model_kind: model.kind(),
            input_dim: model.input_dim(),
            device: &device,
            locations: &locations,
            methods: &self.cfg.pipeline.methods,
            weights: self.cfg.pipeline.weights,
            payload: &self.cfg.pipeline.payload,
        };
        let sel = select(&input);
        let choice = sel.choice.expect("configured methods include an applicable one");
        (choice.method, sel.feasible)
    }

    /// CPU-bound explanation generation; safe to run on a worker thread.
    pub fn generate(pipeline: &PipelineConfig, job: GenerationJob) -> Result<Explanation> {
        Ok(pipeline.generate(job.method, &*job.model, &job.x, job.seed)?)
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.cfg.pipeline
    }

    /// Cache the fresh explanation and build the response.
    pub fn complete(&self, miss: Miss, expl: Explanation) -> Result<WireResponse> {
        let now = self.now_ms();
        let entry = CacheEntry::new(miss.embedding, expl.clone(), now);
        self.global.write().insert(entry.clone())?;
        self.edges[miss.edge].local.write().insert(entry)?;
        let latency_ms = miss.started.elapsed().as_secs_f64() * 1000.0;
        let resp = WireResponse {
            request_id: miss.req.request_id.clone(),
            attribution: expl.attribution,
            method: expl.method.to_string(),
            source: ResponseSource::Generated,
            verified: false,
            fidelity: expl.fidelity,
            latency_ms,
            model_version: expl.model_version,
            sla_missed: !miss.feasible || latency_ms > miss.req.latency_budget_ms,
        };
        self.log_response(&resp);
        Ok(resp)
    }

    fn log_response(&self, r: &WireResponse) {
        let Some(sink) = &self.log else {
            return;
        };
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        let line = LogLine {
            ts,
            request_id: &r.request_id,
            source: r.source.as_str(),
            method: &r.method,
            latency_ms: r.latency_ms,
        };
        let mut sink = sink.lock();
        // Logging must never fail a request.
        let _ = serde_json::to_writer(&mut *sink, &line);
        let _ = sink.write_all(b"\n");
        let _ = sink.flush();
    }
}
