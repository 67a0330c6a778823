//! Explanation method and execution location selection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::explain::{MethodId, MethodProfile};
use crate::model::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum LocationKind {
    Device,
    Edge(usize),
    Cloud,
}

impl fmt::Display for LocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocationKind::Device => f.write_str("device"),
            LocationKind::Edge(i) => write!(f, "edge{i}"),
            LocationKind::Cloud => f.write_str("cloud"),
        }
    }
}

/// A place an explanation can be generated, with a snapshot of its load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub kind: LocationKind,
    /// Model evaluations per ms.
    pub capacity: f64,
    pub queue_delay_ms: f64,
    /// Round trip between the requesting device and this location.
    pub rtt_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceTier {
    Low,
    Mid,
    High,
}

impl DeviceTier {
    /// Default compute capacity in evaluations per ms.
    pub fn default_capacity(self) -> f64 {
        match self {
            DeviceTier::Low => 1.0,
            DeviceTier::Mid => 10.0,
            DeviceTier::High => 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    pub tier: DeviceTier,
    /// Evaluations per ms.
    pub capacity: f64,
    /// KB per ms.
    pub bandwidth: f64,
    pub latency_tolerance_ms: f64,
    pub home_edge: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// Message sizes used for the communication term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PayloadModel {
    pub bytes_per_value: f64,
    pub request_overhead: f64,
    pub explanation_overhead: f64,
}

impl Default for PayloadModel {
    fn default() -> Self {
        Self {
            bytes_per_value: 8.0,
            request_overhead: 64.0,
            explanation_overhead: 128.0,
        }
    }
}

impl PayloadModel {
    pub fn request_bytes(&self, d: usize) -> f64 {
        d as f64 * self.bytes_per_value + self.request_overhead
    }

    /// Attribution plus surrogate weights.
    pub fn explanation_bytes(&self, d: usize) -> f64 {
        d as f64 * self.bytes_per_value * 2.0 + self.explanation_overhead
    }

    /// Bytes moved for one remote generation.
    pub fn round_trip_bytes(&self, d: usize) -> f64 {
        self.request_bytes(d) + self.explanation_bytes(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub t_compute_ms: f64,
    pub t_comm_ms: f64,
    pub total_ms: f64,
}

/// Transfer time in ms for `bytes` over `bandwidth` KB/ms.
pub fn transfer_ms(bytes: f64, bandwidth: f64) -> f64 {
    bytes / 1024.0 / bandwidth
}

pub fn estimate_cost(
    method: &MethodProfile,
    loc: &Location,
    device: &DeviceProfile,
    weights: CostWeights,
    payload: &PayloadModel,
    input_dim: usize,
) -> LatencyEstimate {
    let t_compute_ms = method.base_cost as f64 / loc.capacity + loc.queue_delay_ms;
    let t_comm_ms = match loc.kind {
        LocationKind::Device => 0.0,
        _ => transfer_ms(payload.round_trip_bytes(input_dim), device.bandwidth) + loc.rtt_ms,
    };
    LatencyEstimate {
        t_compute_ms,
        t_comm_ms,
        total_ms: weights.alpha * t_compute_ms + weights.beta * t_comm_ms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    pub rho_fid: f64,
    pub rho_lat: f64,
}

/// Everything the selector looks at for one request.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInput<'a> {
    pub req: Requirements,
    pub model_kind: ModelKind,
    pub input_dim: usize,
    pub device: &'a DeviceProfile,
    pub locations: &'a [Location],
    pub methods: &'a [MethodProfile],
    pub weights: CostWeights,
    pub payload: &'a PayloadModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub method: MethodId,
    /// Index into the method list.
    pub method_index: usize,
    /// Index into the location list.
    pub location_index: usize,
    pub location: LocationKind,
    pub estimate: LatencyEstimate,
    pub fidelity_prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: Option<Choice>,
    /// False when no pair meets both requirements; `choice` is then the
    /// best-effort pair.
    pub feasible: bool,
    /// Cost model evaluations performed.
    pub evaluations: usize,
}

/// Method order used by the selector: descending prior, then lower cost,
/// then list position.
pub fn method_order(methods: &[MethodProfile]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..methods.len()).collect();
    order.sort_by(|&a, &b| {
        methods[b]
            .fidelity_prior
            .total_cmp(&methods[a].fidelity_prior)
            .then(methods[a].base_cost.cmp(&methods[b].base_cost))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy selection. Methods are visited in [`method_order`]; methods with
/// equal priors form one tier and the fastest feasible pair within the
/// first tier that has one wins. Each (method, location) pair is costed at
/// most once.
pub fn select(input: &SelectionInput<'_>) -> Selection {
    let methods = input.methods;
    let locs = input.locations;
    let mut cache: Vec<Option<LatencyEstimate>> = vec![None; methods.len() * locs.len()];
    let mut evaluations = 0usize;
    let mut cost = |m: usize, l: usize, evaluations: &mut usize| -> LatencyEstimate {
        let slot = &mut cache[m * locs.len() + l];
        *slot.get_or_insert_with(|| {
            *evaluations += 1;
            estimate_cost(&methods[m], &locs[l], input.device, input.weights, input.payload, input.input_dim)
        })
    };
    let make = |m: usize, l: usize, est: LatencyEstimate| Choice {
        method: methods[m].method,
        method_index: m,
        location_index: l,
        location: locs[l].kind,
        estimate: est,
        fidelity_prior: methods[m].fidelity_prior,
    };

    let order: Vec<usize> = method_order(methods)
        .into_iter()
        .filter(|&m| methods[m].applicable(input.model_kind))
        .collect();

    let mut i = 0;
    while i < order.len() {
        let prior = methods[order[i]].fidelity_prior;
        let mut j = i;
        while j < order.len() && methods[order[j]].fidelity_prior == prior {
            j += 1;
        }
        if prior >= input.req.rho_fid {
            let mut best: Option<(usize, usize, LatencyEstimate)> = None;
            for &m in &order[i..j] {
                for l in 0..locs.len() {
                    let est = cost(m, l, &mut evaluations);
                    if est.total_ms <= input.req.rho_lat
                        && best.is_none_or(|(_, _, b)| est.total_ms < b.total_ms)
                    {
                        best = Some((m, l, est));
                    }
                }
            }
            if let Some((m, l, est)) = best {
                return Selection {
                    choice: Some(make(m, l, est)),
                    feasible: true,
                    evaluations,
                };
            }
        }
        i = j;
    }

    // Best effort: highest-prior tier, then fastest pair.
    let mut best: Option<(usize, usize, LatencyEstimate)> = None;
    if let Some(&first) = order.first() {
        let prior = methods[first].fidelity_prior;
        for &m in order.iter().take_while(|&&m| methods[m].fidelity_prior == prior) {
            for l in 0..locs.len() {
                let est = cost(m, l, &mut evaluations);
                if best.is_none_or(|(_, _, b)| est.total_ms < b.total_ms) {
                    best = Some((m, l, est));
                }
            }
        }
    }
    Selection {
        choice: best.map(|(m, l, est)| make(m, l, est)),
        feasible: false,
        evaluations,
    }
}
