//! Two-tier semantic explanation cache.
//!
//! A tier stores entries in a dense vector mirrored by a flat embedding
//! matrix, so the exact nearest-neighbor scan is a single pass over
//! contiguous memory. Mutable per-entry state (version, fidelity, access
//! time, recency) lives in atomics so lookups only need shared access.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::distance_unchecked;
use crate::error::{Result, XaasError};
use crate::explain::{Explanation, Predictor};
use crate::rng::derive;
use crate::verify::{verify, VerificationConfig};

/// Embeddings closer than this are treated as the same key for dedup.
pub const DEDUP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierKind {
    Local,
    Global,
}

/// Persisted form of an entry; one JSON object per snapshot line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub embedding: Vec<f64>,
    pub explanation: Explanation,
    pub model_id: String,
    pub model_version: u64,
    pub cached_prediction: usize,
    pub fidelity: f64,
    pub inserted_at: f64,
    pub last_access: f64,
}

impl CacheEntry {
    pub fn new(embedding: Vec<f64>, explanation: Explanation, now: f64) -> Self {
        Self {
            embedding,
            model_id: explanation.model_id.clone(),
            model_version: explanation.model_version,
            cached_prediction: explanation.prediction,
            fidelity: explanation.fidelity,
            explanation,
            inserted_at: now,
            last_access: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub eps_sim: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub eps_step: f64,
    /// Default neighbor count for `knn` queries.
    pub k_candidates: usize,
    pub window: usize,
    pub target_hit: f64,
    pub max_stale_accept: f64,
    pub local_capacity: usize,
    pub global_capacity: usize,
    pub local_latency_ms: (f64, f64),
    pub global_latency_ms: (f64, f64),
    pub stale: StalePolicy,
    pub invalidation: InvalidationMode,
    /// Drop entries whose verification failed.
    pub evict_failed: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            eps_sim: 0.15,
            eps_min: 0.12,
            eps_max: 0.18,
            eps_step: 0.01,
            k_candidates: 8,
            window: 200,
            target_hit: 0.75,
            max_stale_accept: 0.05,
            local_capacity: 1000,
            global_capacity: 10_000,
            local_latency_ms: (5.0, 10.0),
            global_latency_ms: (50.0, 100.0),
            stale: StalePolicy::Verify,
            invalidation: InvalidationMode::Lazy,
            evict_failed: true,
        }
    }
}

/// What lookup does with an entry whose version is not current.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    /// Run lightweight verification; serve and refresh on pass.
    Verify,
    /// Serve without checking (verification ablation).
    Accept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidationMode {
    Lazy,
    Eager,
}

struct Slot {
    id: u64,
    explanation: Arc<Explanation>,
    model_id: Arc<str>,
    prediction: usize,
    inserted_at: f64,
    version: AtomicU64,
    fidelity: AtomicU64,
    last_access: AtomicU64,
    recency: AtomicU64,
}

impl Slot {
    fn version(&self) -> u64 {
        self.version.load(Ordering::Relaxed)
    }
    fn fidelity(&self) -> f64 {
        f64::from_bits(self.fidelity.load(Ordering::Relaxed))
    }
    fn last_access(&self) -> f64 {
        f64::from_bits(self.last_access.load(Ordering::Relaxed))
    }
}

/// Read-only copy of an entry together with its tier-local id.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryView {
    pub id: u64,
    pub entry: CacheEntry,
}

/// A lookup query. `prediction` is the label the caller already computed
/// with the current model.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub x: &'a [f64],
    pub embedding: &'a [f64],
    pub prediction: usize,
    pub rho_fid: f64,
    pub seed: u64,
    pub now: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub explanation: Arc<Explanation>,
    pub tier: TierKind,
    pub entry_id: u64,
    pub distance: f64,
    /// Fidelity the entry was accepted with (re-measured when verified).
    pub fidelity: f64,
    /// Version the entry was accepted under.
    pub model_version: u64,
    /// Whether verification ran and passed for this entry.
    pub verified: bool,
}

/// Result of scanning one tier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TierScan {
    pub hit: Option<Hit>,
    pub verifications: u32,
    pub verification_failures: u32,
    pub verify_evals: u64,
    /// Entries that failed verification during this scan.
    pub failed: Vec<u64>,
    pub candidates_examined: usize,
}

pub struct CacheTier {
    kind: TierKind,
    capacity: usize,
    dim: usize,
    slots: Vec<Slot>,
    index: Vec<f64>,
    next_id: u64,
    clock: AtomicU64,
}

impl std::fmt::Debug for CacheTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheTier")
            .field("kind", &self.kind)
            .field("capacity", &self.capacity)
            .field("len", &self.slots.len())
            .finish()
    }
}

impl CacheTier {
    pub fn new(kind: TierKind, capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "tier capacity must be positive");
        Self {
            kind,
            capacity,
            dim,
            slots: Vec::new(),
            index: Vec::new(),
            next_id: 0,
            clock: AtomicU64::new(0),
        }
    }

    pub fn kind(&self) -> TierKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn embedding_at(&self, i: usize) -> &[f64] {
        &self.index[i * self.dim..(i + 1) * self.dim]
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.slots.iter().position(|s| s.id == id)
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn view(&self, i: usize) -> EntryView {
        let s = &self.slots[i];
        EntryView {
            id: s.id,
            entry: CacheEntry {
                embedding: self.embedding_at(i).to_vec(),
                explanation: (*s.explanation).clone(),
                model_id: s.model_id.to_string(),
                model_version: s.version(),
                cached_prediction: s.prediction,
                fidelity: s.fidelity(),
                inserted_at: s.inserted_at,
                last_access: s.last_access(),
            },
        }
    }

    /// Copies of all entries in storage order.
    pub fn entries(&self) -> Vec<EntryView> {
        (0..self.slots.len()).map(|i| self.view(i)).collect()
    }

    pub fn get(&self, id: u64) -> Option<EntryView> {
        self.position(id).map(|i| self.view(i))
    }

    /// Ids in eviction order, least recently used first.
    pub fn lru_order(&self) -> Vec<u64> {
        let mut v: Vec<(u64, u64)> = self
            .slots
            .iter()
            .map(|s| (s.recency.load(Ordering::Relaxed), s.id))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, id)| id).collect()
    }

    /// Whether the flat index mirrors the entries.
    pub fn index_consistent(&self) -> bool {
        self.index.len() == self.slots.len() * self.dim && self.slots.len() <= self.capacity
    }

    fn order(&self, a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
        let (sa, sb) = (&self.slots[a.0], &self.slots[b.0]);
        a.1.total_cmp(&b.1)
            .then(sa.inserted_at.total_cmp(&sb.inserted_at))
            .then(sa.id.cmp(&sb.id))
    }

    fn scan(&self, e_q: &[f64], model_id: &str) -> Vec<(usize, f64)> {
        (0..self.slots.len())
            .filter(|&i| &*self.slots[i].model_id == model_id)
            .map(|i| (i, distance_unchecked(self.embedding_at(i), e_q)))
            .collect()
    }

    fn check_dim(&self, e_q: &[f64]) -> Result<()> {
        if e_q.len() != self.dim {
            return Err(XaasError::EmbeddingMismatch(self.dim, e_q.len()));
        }
        Ok(())
    }

    /// Exact top-`k` entries for `model_id`, ascending by distance, ties
    /// broken by older insertion.
    pub fn knn(&self, e_q: &[f64], model_id: &str, k: usize) -> Result<Vec<(EntryView, f64)>> {
        self.check_dim(e_q)?;
        Ok(self
            .knn_positions(e_q, model_id, k)
            .into_iter()
            .map(|(i, d)| (self.view(i), d))
            .collect())
    }

    fn knn_positions(&self, e_q: &[f64], model_id: &str, k: usize) -> Vec<(usize, f64)> {
        let mut all = self.scan(e_q, model_id);
        if k < all.len() {
            all.select_nth_unstable_by(k, |a, b| self.order(*a, *b));
            all.truncate(k);
        }
        all.sort_unstable_by(|a, b| self.order(*a, *b));
        all
    }

    /// Every entry of `model_id` strictly within `eps`, in distance order.
    /// Entries beyond `eps` can never pass the similarity condition, so
    /// scanning all of them makes the result independent of any
    /// candidate-count cutoff.
    fn candidates(&self, e_q: &[f64], model_id: &str, eps: f64) -> Vec<(usize, f64)> {
        let mut within: Vec<(usize, f64)> = (0..self.slots.len())
            .filter_map(|i| {
                let d = distance_unchecked(self.embedding_at(i), e_q);
                (d < eps && &*self.slots[i].model_id == model_id).then_some((i, d))
            })
            .collect();
        within.sort_unstable_by(|a, b| self.order(*a, *b));
        within
    }

    /// Scan this tier for a servable entry, applying similarity, prediction
    /// consistency, version (with verification fallback) and fidelity in
    /// that order. Needs only shared access: refreshes and recency updates
    /// go through atomics. Entries that fail verification are reported in
    /// [`TierScan::failed`] for the caller to remove.
    pub fn lookup<P: Predictor + ?Sized>(
        &self,
        q: &Query<'_>,
        model: &P,
        eps: f64,
        stale: StalePolicy,
        vcfg: &VerificationConfig,
    ) -> Result<TierScan> {
        self.check_dim(q.embedding)?;
        let mut out = TierScan::default();
        let current = model.version();
        for (i, dist) in self.candidates(q.embedding, model.model_id(), eps) {
            out.candidates_examined += 1;
            let slot = &self.slots[i];
            if slot.prediction != q.prediction {
                continue;
            }
            let mut verified = false;
            let mut fid = slot.fidelity();
            let mut version = slot.version();
            if version != current && stale == StalePolicy::Verify {
                let res = verify(&slot.explanation, q.x, model, vcfg, derive(q.seed, slot.id))?;
                out.verifications += 1;
                out.verify_evals += res.evals_used;
                if !res.valid {
                    out.verification_failures += 1;
                    out.failed.push(slot.id);
                    continue;
                }
                // A reader holding an older model snapshot must not move the
                // entry's version backwards.
                if slot.version.fetch_max(current, Ordering::Relaxed) < current {
                    slot.fidelity
                        .store(res.measured_fidelity.to_bits(), Ordering::Relaxed);
                }
                fid = res.measured_fidelity;
                version = current;
                verified = true;
            }
            if fid < q.rho_fid {
                continue;
            }
            slot.last_access.store(q.now.to_bits(), Ordering::Relaxed);
            slot.recency.store(self.tick(), Ordering::Relaxed);
            out.hit = Some(Hit {
                explanation: slot.explanation.clone(),
                tier: self.kind,
                entry_id: slot.id,
                distance: dist,
                fidelity: fid,
                model_version: version,
                verified,
            });
            break;
        }
        Ok(out)
    }

    fn find_duplicate(&self, entry: &CacheEntry) -> Option<usize> {
        (0..self.slots.len()).find(|&i| {
            let s = &self.slots[i];
            *s.model_id == *entry.model_id
                && s.version() == entry.model_version
                && s.prediction == entry.cached_prediction
                && distance_unchecked(self.embedding_at(i), &entry.embedding) <= DEDUP_TOLERANCE
        })
    }

    fn remove_at(&mut self, i: usize) -> EntryView {
        let view = self.view(i);
        let last = self.slots.len() - 1;
        self.slots.swap_remove(i);
        if i != last {
            let (head, tail) = self.index.split_at_mut(last * self.dim);
            head[i * self.dim..(i + 1) * self.dim].copy_from_slice(&tail[..self.dim]);
        }
        self.index.truncate(last * self.dim);
        view
    }

    /// Insert `entry`. An entry with the same model, version, prediction and
    /// embedding is replaced in place. Returns the entry evicted to respect
    /// capacity, if any, and the new entry's id.
    pub fn insert(&mut self, entry: CacheEntry) -> Result<(u64, Option<EntryView>)> {
        self.check_dim(&entry.embedding)?;
        if entry.cached_prediction != entry.explanation.prediction {
            return Err(XaasError::Precondition(
                "cached prediction must match the explanation".into(),
            ));
        }
        if let Some(i) = self.find_duplicate(&entry) {
            self.remove_at(i);
        }
        let mut evicted = None;
        if self.slots.len() >= self.capacity {
            let victim = (0..self.slots.len())
                .min_by_key(|&i| self.slots[i].recency.load(Ordering::Relaxed))
                .expect("full tier is non-empty");
            evicted = Some(self.remove_at(victim));
        }
        let id = self.next_id;
        self.next_id += 1;
        let recency = self.tick();
        self.index.extend_from_slice(&entry.embedding);
        self.slots.push(Slot {
            id,
            model_id: entry.model_id.as_str().into(),
            prediction: entry.cached_prediction,
            inserted_at: entry.inserted_at,
            version: AtomicU64::new(entry.model_version),
            fidelity: AtomicU64::new(entry.fidelity.to_bits()),
            last_access: AtomicU64::new(entry.last_access.to_bits()),
            recency: AtomicU64::new(recency),
            explanation: Arc::new(entry.explanation),
        });
        Ok((id, evicted))
    }

    pub fn remove(&mut self, id: u64) -> Option<EntryView> {
        self.position(id).map(|i| self.remove_at(i))
    }

    /// Eager mode drops every entry of `model_id` older than
    /// `current_version` and returns how many were dropped. Lazy mode keeps
    /// everything.
    pub fn invalidate_stale(&mut self, model_id: &str, current_version: u64, mode: InvalidationMode) -> usize {
        if mode == InvalidationMode::Lazy {
            return 0;
        }
        let mut dropped = 0;
        let mut i = 0;
        while i < self.slots.len() {
            let s = &self.slots[i];
            if &*s.model_id == model_id && s.version() < current_version {
                self.remove_at(i);
                dropped += 1;
            } else {
                i += 1;
            }
        }
        dropped
    }

    /// Write one JSON entry per line, least recently used first so that a
    /// reload reproduces the eviction order.
    pub fn save_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        for id in self.lru_order() {
            let view = self.get(id).expect("listed id is present");
            serde_json::to_writer(&mut w, &view.entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuild a tier from a snapshot written by [`CacheTier::save_snapshot`].
    pub fn load_snapshot<R: BufRead>(kind: TierKind, capacity: usize, dim: usize, r: R) -> Result<Self> {
        let mut tier = Self::new(kind, capacity, dim);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line)?;
            tier.insert(entry)?;
        }
        Ok(tier)
    }
}

/// Hit rate and verification outcomes over one adaptation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub hit_rate: f64,
    pub verification_failure_rate: f64,
}

/// One adaptation step for the similarity threshold.
pub fn adapt_threshold(cfg: &CacheConfig, eps: f64, stats: WindowStats) -> f64 {
    let next = if stats.verification_failure_rate > cfg.max_stale_accept {
        eps - cfg.eps_step
    } else if stats.hit_rate < cfg.target_hit {
        eps + cfg.eps_step
    } else {
        eps
    };
    // Round away accumulated float error from repeated steps.
    ((next * 1e9).round() / 1e9).clamp(cfg.eps_min, cfg.eps_max)
}

/// Online controller for `eps_sim`: counts outcomes and applies
/// [`adapt_threshold`] at the end of every window.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdAdapter {
    eps: f64,
    enabled: bool,
    requests: usize,
    hits: usize,
    verifications: u64,
    failures: u64,
    history: Vec<f64>,
}

impl ThresholdAdapter {
    pub fn new(cfg: &CacheConfig, enabled: bool) -> Self {
        Self {
            eps: cfg.eps_sim.clamp(cfg.eps_min, cfg.eps_max),
            enabled,
            requests: 0,
            hits: 0,
            verifications: 0,
            failures: 0,
            history: Vec::new(),
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Threshold in force after each completed window.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Record one request. Returns the new threshold when a window closes.
    pub fn record(&mut self, cfg: &CacheConfig, hit: bool, verifications: u32, failures: u32) -> Option<f64> {
        self.requests += 1;
        self.hits += usize::from(hit);
        self.verifications += u64::from(verifications);
        self.failures += u64::from(failures);
        if self.requests < cfg.window.max(1) {
            return None;
        }
        let stats = WindowStats {
            hit_rate: self.hits as f64 / self.requests as f64,
            verification_failure_rate: if self.verifications == 0 {
                0.0
            } else {
                self.failures as f64 / self.verifications as f64
            },
        };
        if self.enabled {
            self.eps = adapt_threshold(cfg, self.eps, stats);
        }
        self.history.push(self.eps);
        self.requests = 0;
        self.hits = 0;
        self.verifications = 0;
        self.failures = 0;
        Some(self.eps)
    }
}

/// Outcome of a two-tier lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupReport {
    pub hit: Option<Hit>,
    pub verifications: u32,
    pub verification_failures: u32,
    pub verify_evals: u64,
    /// Whether the global tier was consulted.
    pub searched_global: bool,
}

/// Local tier first, then global; a global hit is promoted into `local`.
/// Entries that fail verification are dropped when `cfg.evict_failed`.
#[allow(clippy::too_many_arguments)]
pub fn lookup_two_tier<P: Predictor + ?Sized>(
    local: &mut CacheTier,
    global: &mut CacheTier,
    q: &Query<'_>,
    model: &P,
    eps: f64,
    cfg: &CacheConfig,
    vcfg: &VerificationConfig,
) -> Result<LookupReport> {
    let mut report = LookupReport::default();
    let scan = local.lookup(q, model, eps, cfg.stale, vcfg)?;
    absorb(&mut report, &scan);
    if cfg.evict_failed {
        for id in &scan.failed {
            local.remove(*id);
        }
    }
    if scan.hit.is_some() {
        report.hit = scan.hit;
        return Ok(report);
    }
    report.searched_global = true;
    let scan = global.lookup(q, model, eps, cfg.stale, vcfg)?;
    absorb(&mut report, &scan);
    if cfg.evict_failed {
        for id in &scan.failed {
            global.remove(*id);
        }
    }
    if let Some(hit) = scan.hit {
        let promoted = global.get(hit.entry_id).expect("hit entry is resident");
        let mut entry = promoted.entry;
        entry.inserted_at = q.now;
        entry.last_access = q.now;
        local.insert(entry)?;
        report.hit = Some(hit);
    }
    Ok(report)
}

fn absorb(report: &mut LookupReport, scan: &TierScan) {
    report.verifications += scan.verifications;
    report.verification_failures += scan.verification_failures;
    report.verify_evals += scan.verify_evals;
}
