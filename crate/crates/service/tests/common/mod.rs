//! Harnesses shared by the service tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xaas_core::explain::{confident_input, MethodId};
use xaas_core::model::{ModelDefinition, ModelHandle, ModelKind};
use xaas_core::rng::{derive, seeded, standard_normal};
use xaas_service::protocol::{
    encode, parse_inbound, parse_outbound, ControlAck, ControlRequest, ErrorCode, Inbound, Outbound,
    ResponseSource, WireError,
};
use xaas_service::service::generation_seed;
use xaas_service::{Server, Service, ServiceConfig, WireRequest, WireResponse};
use xaas_sim::engine::scenario_model;
use xaas_sim::SimConfig;

pub fn scenario_service(workers: usize) -> (Arc<Service>, ModelHandle) {
    let cfg = SimConfig::default();
    let model = scenario_model(&cfg).unwrap();
    let svc = Service::new(ServiceConfig::from_sim(&cfg, workers));
    svc.register_model(model.clone()).unwrap();
    (Arc::new(svc), model)
}

pub fn request(id: &str, model: &ModelHandle, x: Vec<f64>) -> WireRequest {
    WireRequest {
        request_id: id.to_string(),
        model_id: model.model_id().to_string(),
        prediction: model.predict(&x).unwrap().label,
        features: x,
        fid_threshold: 0.9,
        latency_budget_ms: 5_000.0,
    }
}

/// A point near one of `k` fixed confident inputs of `model`.
pub fn clustered_input(model: &ModelHandle, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = rng.random_range(0..k);
    let center = confident_input(model, &mut seeded(derive(0xC3, c as u64)), 0.6);
    center
        .iter()
        .map(|v| (v + 0.01 * standard_normal(rng)).clamp(-1.0, 1.0))
        .collect()
}

const CHARS: &[char] = &[
    'a', 'Z', '0', ' ', '"', '\\', '/', '\n', '\t', '\u{0}', '\u{1f}', 'é', '中', '🦀', '\u{2028}', '{', '}', ',',
];

fn string(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..12);
    (0..n).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

fn real(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::MIN_POSITIVE * rng.random::<f64>(),
        3 => 1e300 * (rng.random::<f64>() - 0.5),
        4 => f64::from_bits(rng.random::<u64>() & 0x7fef_ffff_ffff_ffff),
        5 => rng.random_range(-1.0..1.0),
        6 => (rng.random_range(-1e6..1e6) as f64).round(),
        _ => 1.0 / 3.0 * rng.random_range(1..100) as f64,
    }
}

fn reals(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(0..10);
    (0..n).map(|_| real(rng)).collect()
}

fn response(rng: &mut ChaCha8Rng) -> WireResponse {
    WireResponse {
        request_id: string(rng),
        attribution: reals(rng),
        method: MethodId::ALL[rng.random_range(0..4)].to_string(),
        source: [ResponseSource::CacheLocal, ResponseSource::CacheGlobal, ResponseSource::Generated]
            [rng.random_range(0..3)],
        verified: rng.random(),
        fidelity: real(rng),
        latency_ms: real(rng),
        model_version: rng.random(),
        sla_missed: rng.random(),
    }
}

enum Msg {
    In(Inbound),
    Out(Outbound),
}

fn message(rng: &mut ChaCha8Rng) -> Msg {
    match rng.random_range(0..6) {
        0 => Msg::In(Inbound::Explain(WireRequest {
            request_id: string(rng),
            model_id: string(rng),
            features: reals(rng),
            prediction: rng.random_range(0..usize::MAX),
            fid_threshold: real(rng),
            latency_budget_ms: real(rng),
        })),
        1 => Msg::In(Inbound::Control(ControlRequest::RegisterModel {
            definition: ModelDefinition {
                model_id: string(rng),
                version: rng.random(),
                kind: [ModelKind::Linear, ModelKind::Mlp2, ModelKind::Tree][rng.random_range(0..3)],
                input_dim: rng.random_range(0..100),
                num_classes: rng.random_range(0..10),
                params: reals(rng),
            },
        })),
        2 => Msg::In(Inbound::Control(ControlRequest::BumpModel {
            model_id: string(rng),
            magnitude: real(rng),
            seed: rng.random(),
        })),
        3 => Msg::Out(Outbound::Response(response(rng))),
        4 => Msg::Out(Outbound::Ack(ControlAck {
            op: string(rng),
            model_id: string(rng),
            model_version: rng.random(),
        })),
        _ => Msg::Out(Outbound::Error(WireError::new(
            rng.random::<bool>().then(|| string(rng)),
            [
                ErrorCode::UnknownModel,
                ErrorCode::DuplicateModel,
                ErrorCode::InvalidRequest,
                ErrorCode::Malformed,
                ErrorCode::Internal,
            ][rng.random_range(0..5)],
            string(rng),
        ))),
    }
}

/// Encode `n` random messages, parse them back and re-encode. Returns the
/// number of messages whose parse differs from the original or whose
/// re-encoding is not byte-identical. Mutated lines must never panic the
/// parser.
pub fn protocol_fuzz(n: usize, seed: u64) -> usize {
    let mut rng = seeded(seed);
    let mut divergences = 0;
    for _ in 0..n {
        let (line, ok) = match message(&mut rng) {
            Msg::In(m) => {
                let line = encode(&m);
                let ok = parse_inbound(&line).is_ok_and(|p| p == m && encode(&p) == line);
                (line, ok)
            }
            Msg::Out(m) => {
                let line = encode(&m);
                let ok = parse_outbound(&line).is_ok_and(|p| p == m && encode(&p) == line);
                (line, ok)
            }
        };
        divergences += usize::from(!ok || line.contains('\n'));
        let mut bytes = line.into_bytes();
        if !bytes.is_empty() {
            let i = rng.random_range(0..bytes.len());
            bytes[i] = rng.random();
        }
        if let Ok(mutated) = String::from_utf8(bytes) {
            if let Ok(p) = parse_inbound(&mutated) {
                divergences += usize::from(parse_inbound(&encode(&p)).ok() != Some(p));
            }
        }
    }
    divergences
}

/// Two identical back-to-back requests: the second must be a local hit
/// carrying the same attribution.
pub fn duplicate_request_hits() -> Result<(), String> {
    let (svc, model) = scenario_service(1);
    let x = confident_input(&model, &mut seeded(5), 0.6);
    let req = request("dup-1", &model, x);
    let a = svc.handle(&req).map_err(|e| e.to_string())?;
    let b = svc.handle(&req).map_err(|e| e.to_string())?;
    if a.source != ResponseSource::Generated {
        return Err(format!("first response source {:?}", a.source));
    }
    if b.source != ResponseSource::CacheLocal || b.attribution != a.attribution || b.verified {
        return Err(format!("second response {b:?}"));
    }
    Ok(())
}

/// `requests` concurrent requests against a server while the model is
/// bumped `bumps` times. Returns the number of torn responses: a version
/// outside the window the request was in flight, or a generated
/// explanation that does not reproduce under the version it reports.
pub fn bump_stress(requests: usize, bumps: usize) -> usize {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    let (svc, model) = scenario_service(4);
    let server = Server::new(svc.clone());
    let versions = Arc::new(Mutex::new(vec![model.clone()]));
    let torn = rt.block_on(async {
        let bumper = {
            let svc = svc.clone();
            let versions = versions.clone();
            let id = model.model_id().to_string();
            tokio::spawn(async move {
                for b in 0..bumps {
                    tokio::time::sleep(std::time::Duration::from_millis(3)).await;
                    let v = svc.bump_model(&id, 0.3, b as u64).unwrap();
                    let handle = svc.registry().get(&id).unwrap();
                    assert_eq!(handle.version(), v);
                    versions.lock().push((*handle).clone());
                }
            })
        };
        let mut tasks = Vec::new();
        for i in 0..requests {
            let server = server.clone();
            let svc = svc.clone();
            let id = model.model_id().to_string();
            tasks.push(tokio::spawn(async move {
                let mut rng = seeded(derive(0x57E55, i as u64));
                let snapshot = svc.registry().get(&id).unwrap();
                let x = clustered_input(&snapshot, 6, &mut rng);
                let req = request(&format!("stress-{i}"), &snapshot, x);
                let lo = snapshot.version();
                let resp = server.explain(&req).await.unwrap();
                let hi = svc.registry().get(&id).unwrap().version();
                (req, resp, lo, hi)
            }));
            if i % 10 == 0 {
                tokio::task::yield_now().await;
            }
        }
        let mut out = Vec::new();
        for t in tasks {
            out.push(t.await.unwrap());
        }
        bumper.await.unwrap();
        out
    });
    let versions = versions.lock();
    let pipeline = svc.pipeline();
    let mut bad = 0;
    for (req, resp, lo, hi) in &torn {
        let v = resp.model_version;
        let Some(m) = versions.iter().find(|m| m.version() == v) else {
            bad += 1;
            continue;
        };
        if v < *lo || v > *hi {
            bad += 1;
            continue;
        }
        if resp.source == ResponseSource::Generated {
            let method: MethodId = serde_json::from_value(serde_json::Value::String(resp.method.clone())).unwrap();
            let e = pipeline
                .generate(method, m, &req.features, generation_seed(&req.request_id))
                .unwrap();
            if e.attribution != resp.attribution || e.fidelity != resp.fidelity {
                bad += 1;
            }
        }
    }
    assert_eq!(versions.len(), bumps + 1);
    bad
}
