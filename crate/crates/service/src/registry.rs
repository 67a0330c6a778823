use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use xaas_core::model::{ModelDefinition, ModelHandle};

use crate::error::{Result, ServiceError};

/// Current version of every registered model. Readers take an `Arc`
/// snapshot and keep using it for the whole request; a bump swaps the
/// pointer under the write lock.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    models: RwLock<HashMap<String, Arc<ModelHandle>>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, model: ModelHandle) -> Result<Arc<ModelHandle>> {
        let mut models = self.models.write();
        let id = model.model_id().to_string();
        if models.contains_key(&id) {
            return Err(ServiceError::DuplicateModel(id));
        }
        let model = Arc::new(model);
        models.insert(id, model.clone());
        Ok(model)
    }

    pub fn register_definition(&self, def: &ModelDefinition) -> Result<Arc<ModelHandle>> {
        self.register(ModelHandle::from_definition(def)?)
    }

    pub fn get(&self, model_id: &str) -> Result<Arc<ModelHandle>> {
        self.models
            .read()
            .get(model_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownModel(model_id.to_string()))
    }

    /// Replace the model by a retrained copy one version newer.
    pub fn bump(&self, model_id: &str, magnitude: f64, seed: u64) -> Result<Arc<ModelHandle>> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(ServiceError::InvalidRequest("magnitude must be non-negative".into()));
        }
        let mut models = self.models.write();
        let slot = models
            .get_mut(model_id)
            .ok_or_else(|| ServiceError::UnknownModel(model_id.to_string()))?;
        let next = Arc::new(slot.update_model(seed, magnitude));
        *slot = next.clone();
        Ok(next)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.models.read().keys().cloned().collect();
        ids.sort();
        ids
    }
}
