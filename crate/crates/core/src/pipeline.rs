//! Request path shared by the simulator and the network service: cache
//! lookup, method selection, generation and insertion. Callers supply time
//! and locking.

use serde::{Deserialize, Serialize};

use crate::cache::{lookup_two_tier, CacheConfig, CacheEntry, CacheTier, LookupReport, Query, TierKind};
use crate::embedding::{Embedder, DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED};
use crate::error::Result;
use crate::explain::{explain, ExplainerConfig, Explanation, MethodId, MethodProfile, Predictor, SampleBudgets};
use crate::selector::{CostWeights, PayloadModel};
use crate::verify::VerificationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub explainer: ExplainerConfig,
    pub budgets: SampleBudgets,
    pub verification: VerificationConfig,
    pub cache: CacheConfig,
    pub methods: Vec<MethodProfile>,
    pub weights: CostWeights,
    pub payload: PayloadModel,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            explainer: ExplainerConfig::default(),
            budgets: SampleBudgets::default(),
            verification: VerificationConfig::default(),
            cache: CacheConfig::default(),
            methods: MethodProfile::defaults(),
            weights: CostWeights::default(),
            payload: PayloadModel::default(),
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: DEFAULT_EMBED_SEED,
        }
    }
}

impl PipelineConfig {
    pub fn embedder(&self, input_dim: usize) -> Embedder {
        Embedder::new(input_dim, self.embed_dim, self.embed_seed)
    }

    pub fn profile(&self, method: MethodId) -> Option<&MethodProfile> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn local_tier(&self) -> CacheTier {
        CacheTier::new(TierKind::Local, self.cache.local_capacity, self.embed_dim)
    }

    pub fn global_tier(&self) -> CacheTier {
        CacheTier::new(TierKind::Global, self.cache.global_capacity, self.embed_dim)
    }

    /// Generate an explanation with the configured budgets.
    pub fn generate<P: Predictor + ?Sized>(&self, method: MethodId, model: &P, x: &[f64], seed: u64) -> Result<Explanation> {
        explain(method, model, x, seed, &self.budgets, &self.explainer)
    }

    /// Two-tier lookup with the configured cache and verification settings.
    pub fn lookup<P: Predictor + ?Sized>(
        &self,
        local: &mut CacheTier,
        global: &mut CacheTier,
        q: &Query<'_>,
        model: &P,
        eps: f64,
    ) -> Result<LookupReport> {
        lookup_two_tier(local, global, q, model, eps, &self.cache, &self.verification)
    }
}

/// Store a freshly generated explanation in both tiers.
pub fn insert_generated(
    local: &mut CacheTier,
    global: &mut CacheTier,
    embedding: Vec<f64>,
    explanation: Explanation,
    now: f64,
) -> Result<()> {
    let entry = CacheEntry::new(embedding, explanation, now);
    global.insert(entry.clone())?;
    local.insert(entry)?;
    Ok(())
}
