//! Newline-delimited JSON wire format. Every message is a single JSON object
//! on one line.
//!
//! Inbound lines are either explanation requests or control messages; the
//! latter carry an `"op"` field. Outbound lines are responses, control
//! acknowledgements or errors (which carry an `"error"` object).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xaas_core::model::ModelDefinition;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub request_id: String,
    pub model_id: String,
    pub features: Vec<f64>,
    /// Label the device's model predicted for `features`.
    pub prediction: usize,
    pub fid_threshold: f64,
    pub latency_budget_ms: f64,
}

impl WireRequest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ServiceError::InvalidRequest(m.to_string()));
        if self.request_id.is_empty() {
            return bad("request_id must be non-empty");
        }
        if self.features.is_empty() {
            return bad("features must be non-empty");
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return bad("features must be finite");
        }
        if !(0.0..=1.0).contains(&self.fid_threshold) {
            return bad("fid_threshold must be in [0, 1]");
        }
        if !(self.latency_budget_ms > 0.0 && self.latency_budget_ms.is_finite()) {
            return bad("latency_budget_ms must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    CacheLocal,
    CacheGlobal,
    Generated,
}

impl ResponseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseSource::CacheLocal => "cache_local",
            ResponseSource::CacheGlobal => "cache_global",
            ResponseSource::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireResponse {
    pub request_id: String,
    pub attribution: Vec<f64>,
    pub method: String,
    pub source: ResponseSource,
    /// For cache hits: whether the entry was re-verified against a newer
    /// model. Always false for generated responses.
    pub verified: bool,
    pub fidelity: f64,
    pub latency_ms: f64,
    pub model_version: u64,
    pub sla_missed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownModel,
    DuplicateModel,
    InvalidRequest,
    Malformed,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireError {
    pub request_id: Option<String>,
    pub error: ErrorBody,
}

impl WireError {
    pub fn new(request_id: Option<String>, code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            request_id,
            error: ErrorBody {
                code,
                message: message.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlRequest {
    RegisterModel { definition: ModelDefinition },
    BumpModel { model_id: String, magnitude: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlAck {
    pub op: String,
    pub model_id: String,
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Explain(WireRequest),
    Control(ControlRequest),
}

impl Serialize for Inbound {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Inbound::Explain(r) => r.serialize(s),
            Inbound::Control(c) => c.serialize(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outbound {
    Response(WireResponse),
    Ack(ControlAck),
    Error(WireError),
}

/// Parse one inbound line. Errors are protocol errors (`malformed`).
pub fn parse_inbound(line: &str) -> Result<Inbound> {
    let value: Value = serde_json::from_str(line).map_err(|e| ServiceError::Malformed(e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(ServiceError::Malformed("expected a JSON object".into()));
    };
    let parsed = if map.contains_key("op") {
        serde_json::from_value(value).map(Inbound::Control)
    } else {
        serde_json::from_value(value).map(Inbound::Explain)
    };
    parsed.map_err(|e| ServiceError::Malformed(e.to_string()))
}

pub fn parse_outbound(line: &str) -> Result<Outbound> {
    serde_json::from_str(line).map_err(|e| ServiceError::Malformed(e.to_string()))
}

/// Best-effort request id from a line that failed to parse.
pub fn salvage_request_id(line: &str) -> Option<String> {
    let v: Value = serde_json::from_str(line).ok()?;
    v.get("request_id")?.as_str().map(str::to_string)
}

/// One line of JSON, without the trailing newline.
pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages serialize")
}
