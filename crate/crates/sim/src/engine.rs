//! Single-threaded discrete-event simulation of the request path.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xaas_core::cache::{CacheTier, InvalidationMode, Query, StalePolicy, ThresholdAdapter, TierKind};
use xaas_core::embedding::{distance, Embedder};
use xaas_core::explain::{local_fidelity, Explanation, MethodId};
use xaas_core::model::ModelHandle;
use xaas_core::pipeline::{insert_generated, PipelineConfig};
use xaas_core::rng::{derive, seeded};
use xaas_core::selector::{
    estimate_cost, method_order, select, transfer_ms, DeviceProfile, Location, LocationKind, Requirements,
    SelectionInput,
};

use crate::config::{Ablation, Mode, SimConfig};
use crate::error::Result;
use crate::metrics::{build_report, MetricsReport, RequestRecord, RunFacts, Source};
use crate::workload::{build_fleet, network_jitter, RequestSpec, Workload, MS_PER_HOUR};

const STREAM_REQUEST: u64 = 0x5EED;
const STREAM_DRIFT: u64 = 0xD21F;
const TAG_GENERATE: u64 = 0x6E4;
const TAG_SERVED: u64 = 0xF1D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    pub ablation: Ablation,
    pub seed: u64,
    /// Re-check every cache hit against the validity conditions.
    pub check_soundness: bool,
}

impl RunOptions {
    pub fn new(mode: Mode, ablation: Ablation, seed: u64) -> Self {
        Self {
            mode,
            ablation,
            seed,
            check_soundness: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// One record per issued request, by id.
    pub records: Vec<RequestRecord>,
    /// Hits that failed the re-check (only counted with `check_soundness`).
    pub soundness_violations: usize,
    /// Simulated times of the model updates.
    pub update_times_ms: Vec<f64>,
}

/// Model update times: every `period` starting at half a period.
pub fn drift_schedule(period_hours: f64, horizon_hours: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = period_hours / 2.0;
    while t < horizon_hours {
        out.push(t * MS_PER_HOUR);
        t += period_hours;
    }
    out
}

/// A compute location: a FIFO queue served by identical workers.
#[derive(Debug, Clone)]
struct Pool {
    capacity: f64,
    free_at: Vec<f64>,
}

impl Pool {
    fn new(capacity: f64, workers: usize) -> Self {
        Self {
            capacity,
            free_at: vec![0.0; workers],
        }
    }

    fn earliest(&self) -> (usize, f64) {
        self.free_at
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("pool has workers")
    }

    fn queue_delay(&self, now: f64) -> f64 {
        (self.earliest().1 - now).max(0.0)
    }

    /// Start the job on the earliest free worker; returns its finish time.
    fn assign(&mut self, now: f64, service_ms: f64) -> f64 {
        let (w, free) = self.earliest();
        let finish = free.max(now) + service_ms;
        self.free_at[w] = finish;
        finish
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Device(usize),
    Edge(usize),
    Cloud,
}

#[derive(Debug)]
enum EventKind {
    Arrival(RequestSpec),
    JobArrive(usize),
    Done(usize),
    ModelUpdate,
}

#[derive(Debug)]
struct Event {
    t: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

/// A request waiting for or undergoing generation.
struct Job {
    record: RequestRecord,
    x: Vec<f64>,
    embedding: Option<Vec<f64>>,
    home: usize,
    loc: Loc,
    method: MethodId,
    service_ms: f64,
    back_ms: f64,
    seed: u64,
    explanation: Option<Explanation>,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    pipeline: PipelineConfig,
    opts: RunOptions,
    fleet: Vec<DeviceProfile>,
    embedder: Embedder,
    base_model: ModelHandle,
    model: ModelHandle,
    devices: Vec<Pool>,
    edges: Vec<Pool>,
    cloud: Pool,
    local: Vec<CacheTier>,
    global: CacheTier,
    adapter: ThresholdAdapter,
    heap: BinaryHeap<Event>,
    seq: u64,
    jobs: Vec<Option<Job>>,
    records: Vec<Option<RequestRecord>>,
    verifications: u64,
    verification_failures: u64,
    soundness_violations: usize,
    updates: usize,
}

impl Sim<'_> {
    fn push(&mut self, t: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { t, seq: self.seq, kind });
    }

    fn caching(&self) -> bool {
        self.opts.mode == Mode::Xaas && self.opts.ablation != Ablation::NoCache
    }

    fn pool(&self, loc: Loc) -> &Pool {
        match loc {
            Loc::Device(i) => &self.devices[i],
            Loc::Edge(e) => &self.edges[e],
            Loc::Cloud => &self.cloud,
        }
    }

    fn pool_mut(&mut self, loc: Loc) -> &mut Pool {
        match loc {
            Loc::Device(i) => &mut self.devices[i],
            Loc::Edge(e) => &mut self.edges[e],
            Loc::Cloud => &mut self.cloud,
        }
    }

    fn finish(&mut self, record: RequestRecord) {
        let id = record.id as usize;
        if self.records.len() <= id {
            self.records.resize(id + 1, None);
        }
        self.records[id] = Some(record);
    }

    /// Candidate locations for this mode with the round trip the selector
    /// should charge for each.
    fn candidates(&self, dev: &DeviceProfile, after_lookup: bool) -> Vec<(Loc, f64)> {
        let s = &self.cfg.system;
        let home = dev.home_edge;
        let (home_rtt, other_rtt, cloud_rtt) = if after_lookup {
            (0.0, s.rtt_inter_edge_ms, s.rtt_cloud_ms - s.rtt_edge_ms)
        } else {
            (s.rtt_edge_ms, s.rtt_edge_ms + s.rtt_inter_edge_ms, s.rtt_cloud_ms)
        };
        match self.opts.mode {
            Mode::Localgen => vec![(Loc::Device(dev.id), 0.0)],
            Mode::Cloudxai => vec![(Loc::Cloud, cloud_rtt)],
            Mode::Edgexai => vec![(Loc::Edge(home), home_rtt)],
            Mode::Xaas => {
                let mut v = vec![(Loc::Device(dev.id), 0.0), (Loc::Edge(home), home_rtt)];
                v.extend(
                    (0..s.num_edges)
                        .filter(|&e| e != home)
                        .map(|e| (Loc::Edge(e), other_rtt)),
                );
                v.push((Loc::Cloud, cloud_rtt));
                v
            }
        }
    }

    fn arrival(&mut self, t: f64, spec: RequestSpec) -> Result<()> {
        let cfg = self.cfg;
        let s = &cfg.system;
        let w = &cfg.workload;
        let dev = self.fleet[spec.device].clone();
        let home = dev.home_edge;
        let prediction = self.model.predict(&spec.x)?.label;
        let req_seed = derive(derive(self.opts.seed, STREAM_REQUEST), spec.id);

        // Fixed draw order keeps per-request randomness identical across modes.
        let mut rng = seeded(req_seed);
        let j_edge = network_jitter(s.rtt_edge_ms, s.jitter_frac, &mut rng);
        let j_inter = network_jitter(s.rtt_inter_edge_ms, s.jitter_frac, &mut rng);
        let j_cloud = network_jitter(s.rtt_cloud_ms, s.jitter_frac, &mut rng);
        let j_edge_cloud = network_jitter(s.rtt_cloud_ms - s.rtt_edge_ms, s.jitter_frac, &mut rng);
        let (llo, lhi) = self.pipeline.cache.local_latency_ms;
        let (glo, ghi) = self.pipeline.cache.global_latency_ms;
        let local_access = llo + (lhi - llo) * rng.random::<f64>();
        let global_access = glo + (ghi - glo) * rng.random::<f64>();

        let eps = self.adapter.eps();
        let mut record = RequestRecord {
            id: spec.id,
            device: dev.id,
            cluster: spec.cluster,
            arrival_ms: t,
            done_ms: t,
            latency_ms: 0.0,
            source: Source::Failed,
            method: None,
            location: None,
            fidelity: 0.0,
            rho_fid: w.rho_fid,
            rho_lat: w.rho_lat,
            sla_met: false,
            success: false,
            verified: false,
            feasible: true,
            model_version: self.model.version(),
            eps_sim: eps,
        };

        let mut embedding = None;
        let mut lookup_ms = 0.0;
        if self.caching() {
            let e = self.embedder.embed(&spec.x)?;
            let q = Query {
                x: &spec.x,
                embedding: &e,
                prediction,
                rho_fid: w.rho_fid,
                seed: req_seed,
                now: t,
            };
            let rep = self
                .pipeline
                .lookup(&mut self.local[home], &mut self.global, &q, &self.model, eps)?;
            self.verifications += u64::from(rep.verifications);
            self.verification_failures += u64::from(rep.verification_failures);
            lookup_ms = local_access
                + if rep.searched_global { global_access } else { 0.0 }
                + f64::from(rep.verifications) * self.pipeline.verification.n_perturbations as f64
                    / s.edge_capacity;
            let cache_cfg = self.pipeline.cache.clone();
            self.adapter
                .record(&cache_cfg, rep.hit.is_some(), rep.verifications, rep.verification_failures);
            if let Some(hit) = rep.hit {
                if self.opts.check_soundness && !self.sound(&hit, &e, prediction, eps, home) {
                    self.soundness_violations += 1;
                }
                let fid = local_fidelity(
                    &hit.explanation,
                    &self.model,
                    &spec.x,
                    s.served_fidelity_probes,
                    self.pipeline.explainer.perturbation_scale,
                    derive(req_seed, TAG_SERVED),
                )?;
                record.latency_ms = j_edge + lookup_ms;
                record.done_ms = t + record.latency_ms;
                record.source = match hit.tier {
                    TierKind::Local => Source::CacheLocal,
                    TierKind::Global => Source::CacheGlobal,
                };
                record.method = Some(hit.explanation.method);
                record.location = Some(LocationKind::Edge(home));
                record.fidelity = fid;
                record.verified = hit.verified;
                record.model_version = hit.model_version;
                self.close(&mut record);
                self.finish(record);
                return Ok(());
            }
            embedding = Some(e);
        }

        let after_lookup = self.caching();
        let budget = if after_lookup {
            w.rho_lat - s.rtt_edge_ms - lookup_ms
        } else {
            w.rho_lat
        };
        let cands = self.candidates(&dev, after_lookup);
        let locations: Vec<Location> = cands
            .iter()
            .map(|&(loc, rtt)| {
                let pool = self.pool(loc);
                Location {
                    kind: match loc {
                        Loc::Device(_) => LocationKind::Device,
                        Loc::Edge(e) => LocationKind::Edge(e),
                        Loc::Cloud => LocationKind::Cloud,
                    },
                    capacity: pool.capacity,
                    queue_delay_ms: pool.queue_delay(t),
                    rtt_ms: rtt,
                }
            })
            .collect();
        let methods = &self.pipeline.methods;
        let (method_index, loc_index, feasible) = if self.opts.ablation == Ablation::NoAdaptive {
            // Fixed policy: the highest-prior applicable method at the home edge.
            let m = method_order(methods)
                .into_iter()
                .find(|&m| methods[m].applicable(self.model.kind()))
                .expect("an applicable method");
            let l = cands
                .iter()
                .position(|(loc, _)| *loc == Loc::Edge(home))
                .unwrap_or(0);
            let est = estimate_cost(
                &methods[m],
                &locations[l],
                &dev,
                self.pipeline.weights,
                &self.pipeline.payload,
                w.input_dim,
            );
            (m, l, est.total_ms <= budget)
        } else {
            let input = SelectionInput {
                req: Requirements {
                    rho_fid: w.rho_fid,
                    rho_lat: budget,
                },
                model_kind: self.model.kind(),
                input_dim: w.input_dim,
                device: &dev,
                locations: &locations,
                methods,
                weights: self.pipeline.weights,
                payload: &self.pipeline.payload,
            };
            let sel = select(&input);
            let c = sel.choice.expect("methods are non-empty and one applies");
            match (sel.feasible, fastest_qualified(&input)) {
                (false, Some((m, l))) => (m, l, false),
                _ => (c.method_index, c.location_index, sel.feasible),
            }
        };
        let loc = cands[loc_index].0;
        let profile = &methods[method_index];
        let tx_req = transfer_ms(self.pipeline.payload.request_bytes(w.input_dim), dev.bandwidth);
        let tx_exp = transfer_ms(self.pipeline.payload.explanation_bytes(w.input_dim), dev.bandwidth);
        let (enter, back) = if after_lookup {
            let at_edge = t + j_edge / 2.0 + lookup_ms;
            match loc {
                Loc::Device(_) => (at_edge + j_edge / 2.0, 0.0),
                Loc::Edge(e) if e == home => (at_edge + tx_req, j_edge / 2.0 + tx_exp),
                Loc::Edge(_) => (at_edge + j_inter / 2.0 + tx_req, (j_inter + j_edge) / 2.0 + tx_exp),
                Loc::Cloud => (at_edge + j_edge_cloud / 2.0 + tx_req, (j_edge_cloud + j_edge) / 2.0 + tx_exp),
            }
        } else {
            match loc {
                Loc::Device(_) => (t, 0.0),
                Loc::Edge(e) if e == home => (t + j_edge / 2.0 + tx_req, j_edge / 2.0 + tx_exp),
                Loc::Edge(_) => {
                    let rtt = j_edge + j_inter;
                    (t + rtt / 2.0 + tx_req, rtt / 2.0 + tx_exp)
                }
                Loc::Cloud => (t + j_cloud / 2.0 + tx_req, j_cloud / 2.0 + tx_exp),
            }
        };
        record.method = Some(profile.method);
        record.location = Some(locations[loc_index].kind);
        record.feasible = feasible;
        let job = Job {
            record,
            x: spec.x,
            embedding,
            home,
            loc,
            method: profile.method,
            service_ms: profile.base_cost as f64 / self.pool(loc).capacity,
            back_ms: back,
            seed: derive(req_seed, TAG_GENERATE),
            explanation: None,
        };
        self.jobs.push(Some(job));
        let idx = self.jobs.len() - 1;
        self.push(enter, EventKind::JobArrive(idx));
        Ok(())
    }

    /// Independent re-check of a cache hit against the four validity
    /// conditions.
    fn sound(&self, hit: &xaas_core::cache::Hit, e: &[f64], prediction: usize, eps: f64, home: usize) -> bool {
        let tier = match hit.tier {
            TierKind::Local => &self.local[home],
            TierKind::Global => &self.global,
        };
        let Some(view) = tier.get(hit.entry_id) else {
            return false;
        };
        let within = distance(&view.entry.embedding, e).is_ok_and(|d| d < eps);
        let version_ok = self.pipeline.cache.stale == StalePolicy::Accept || hit.model_version == self.model.version();
        within
            && view.entry.cached_prediction == prediction
            && view.entry.model_id == self.model.model_id()
            && version_ok
            && hit.fidelity >= self.cfg.workload.rho_fid
    }

    fn close(&self, record: &mut RequestRecord) {
        record.sla_met = record.source != Source::Failed && record.latency_ms <= record.rho_lat;
        record.success = record.sla_met && record.fidelity >= record.rho_fid;
    }

    fn job_arrive(&mut self, t: f64, idx: usize) -> Result<()> {
        let mut job = self.jobs[idx].take().expect("job scheduled once");
        let finish = {
            let service = job.service_ms;
            self.pool_mut(job.loc).assign(t, service)
        };
        match self.pipeline.generate(job.method, &self.model, &job.x, job.seed) {
            Ok(expl) => {
                job.explanation = Some(expl);
                self.jobs[idx] = Some(job);
                self.push(finish, EventKind::Done(idx));
            }
            Err(_) => {
                let mut record = job.record;
                record.done_ms = t;
                record.latency_ms = t - record.arrival_ms;
                record.source = Source::Failed;
                self.close(&mut record);
                self.finish(record);
            }
        }
        Ok(())
    }

    fn done(&mut self, t: f64, idx: usize) -> Result<()> {
        let job = self.jobs[idx].take().expect("job completes once");
        let expl = job.explanation.expect("generated before completion");
        let mut record = job.record;
        record.done_ms = t + job.back_ms;
        record.latency_ms = record.done_ms - record.arrival_ms;
        record.source = Source::Generated;
        record.fidelity = expl.fidelity;
        record.model_version = expl.model_version;
        self.close(&mut record);
        if let Some(e) = job.embedding {
            insert_generated(&mut self.local[job.home], &mut self.global, e, expl, t)?;
        }
        self.finish(record);
        Ok(())
    }

    fn model_update(&mut self) {
        self.updates += 1;
        let s = &self.cfg.system;
        // Each retraining perturbs the base parameters afresh, so the amount
        // of drift between consecutive versions is stationary.
        self.model = self
            .base_model
            .update_model(derive(derive(self.opts.seed, STREAM_DRIFT), self.updates as u64), s.drift_magnitude)
            .with_version(self.model.version() + 1);
        if self.pipeline.cache.invalidation == InvalidationMode::Eager {
            let id = self.model.model_id().to_string();
            let v = self.model.version();
            for tier in self.local.iter_mut() {
                tier.invalidate_stale(&id, v, InvalidationMode::Eager);
            }
            self.global.invalidate_stale(&id, v, InvalidationMode::Eager);
        }
    }
}

/// When no pair meets the deadline, the simulated orchestrator runs the
/// fastest pair whose method still meets the fidelity requirement, rather
/// than the slowest highest-prior method.
fn fastest_qualified(input: &SelectionInput<'_>) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for m in method_order(input.methods) {
        let p = &input.methods[m];
        if !p.applicable(input.model_kind) || p.fidelity_prior < input.req.rho_fid {
            continue;
        }
        for (l, loc) in input.locations.iter().enumerate() {
            let t = estimate_cost(p, loc, input.device, input.weights, input.payload, input.input_dim).total_ms;
            if best.is_none_or(|(_, _, b)| t < b) {
                best = Some((m, l, t));
            }
        }
    }
    best.map(|(m, l, _)| (m, l))
}

/// Build the scenario model described by the config.
pub fn scenario_model(cfg: &SimConfig) -> Result<ModelHandle> {
    let m = &cfg.system.model;
    Ok(ModelHandle::random_mlp2(
        &m.model_id,
        cfg.workload.input_dim,
        m.hidden,
        m.num_classes,
        m.seed,
        m.weight_scale,
    )?)
}

/// Run one seed of one mode.
pub fn run_simulation(cfg: &SimConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let w = &cfg.workload;
    let s = &cfg.system;
    let mut pipeline = cfg.pipeline.clone();
    if opts.ablation == Ablation::NoVerify {
        pipeline.cache.stale = StalePolicy::Accept;
    }
    let model = scenario_model(cfg)?;
    let embedder = pipeline.embedder(w.input_dim);
    let fleet = build_fleet(w, s, opts.seed);
    let horizon_ms = w.duration_hours * MS_PER_HOUR;
    let mut sim = Sim {
        cfg,
        opts,
        devices: fleet.iter().map(|d| Pool::new(d.capacity, 1)).collect(),
        edges: (0..s.num_edges)
            .map(|_| Pool::new(s.edge_capacity, s.edge_workers))
            .collect(),
        cloud: Pool::new(s.cloud_capacity, s.cloud_workers),
        local: (0..s.num_edges).map(|_| pipeline.local_tier()).collect(),
        global: pipeline.global_tier(),
        adapter: ThresholdAdapter::new(&pipeline.cache, true),
        pipeline,
        fleet,
        embedder: embedder.clone(),
        base_model: model.clone(),
        model: model.clone(),
        heap: BinaryHeap::new(),
        seq: 0,
        jobs: Vec::new(),
        records: Vec::new(),
        verifications: 0,
        verification_failures: 0,
        soundness_violations: 0,
        updates: 0,
    };
    let update_times = drift_schedule(s.drift_period_hours, w.duration_hours);
    for &u in &update_times {
        sim.push(u, EventKind::ModelUpdate);
    }
    let mut workload = Workload::new(cfg, &model, &embedder, opts.seed)?;
    if let Some(first) = workload.next() {
        sim.push(first.t_ms, EventKind::Arrival(first));
    }
    while let Some(ev) = sim.heap.pop() {
        match ev.kind {
            EventKind::Arrival(spec) => {
                if let Some(next) = workload.next() {
                    sim.push(next.t_ms, EventKind::Arrival(next));
                }
                sim.arrival(ev.t, spec)?;
            }
            EventKind::JobArrive(i) => sim.job_arrive(ev.t, i)?,
            EventKind::Done(i) => sim.done(ev.t, i)?,
            EventKind::ModelUpdate => sim.model_update(),
        }
    }
    let records: Vec<RequestRecord> = sim
        .records
        .into_iter()
        .map(|r| r.expect("every request is recorded"))
        .collect();
    let facts = RunFacts {
        scenario: w.scenario.to_string(),
        mode: opts.mode.to_string(),
        ablation: opts.ablation.to_string(),
        seed: opts.seed,
        config_hash: cfg.hash(),
        warmup_ms: w.warmup_hours * MS_PER_HOUR,
        horizon_ms,
        bucket_ms: w.bucket_hours * MS_PER_HOUR,
        verifications: sim.verifications,
        verification_failures: sim.verification_failures,
        model_updates: sim.updates,
        eps_final: sim.adapter.eps(),
        eps_history: sim.adapter.history().to_vec(),
    };
    Ok(RunOutput {
        report: build_report(&records, facts),
        records,
        soundness_violations: sim.soundness_violations,
        update_times_ms: update_times,
    })
}

/// Run every seed and return the per-seed reports.
pub fn run_seeds(cfg: &SimConfig, mode: Mode, ablation: Ablation, seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    seeds
        .iter()
        .map(|&seed| run_simulation(cfg, RunOptions::new(mode, ablation, seed)).map(|o| o.report))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_schedule_counts() {
        assert_eq!(drift_schedule(6.0, 24.0).len(), 4);
        assert_eq!(drift_schedule(6.0, 2.0).len(), 0);
    }

    #[test]
    fn fifo_pool_assignment() {
        let mut p = Pool::new(2.0, 2);
        assert_eq!(p.assign(0.0, 10.0), 10.0);
        assert_eq!(p.assign(1.0, 10.0), 11.0);
        assert_eq!(p.queue_delay(2.0), 8.0);
        assert_eq!(p.assign(2.0, 10.0), 20.0);
        assert_eq!(p.queue_delay(30.0), 0.0);
    }
}
