use proptest::prelude::*;
use rand::Rng;
use xaas_core::model::{ModelHandle, ModelKind};
use xaas_core::rng::{derive, seeded};
use xaas_core::XaasError;

/// Straight-line forward pass of a one hidden layer tanh network over the
/// flattened parameter layout, using libm `tanh`.
fn mlp2_probs(params: &[f64], d: usize, classes: usize, x: &[f64]) -> Vec<f64> {
    let o = if classes == 2 { 1 } else { classes };
    let h = (params.len() - o) / (d + 1 + o);
    let w1 = &params[..h * d];
    let b1 = &params[h * d..h * d + h];
    let w2 = &params[h * d + h..h * d + h + o * h];
    let b2 = &params[h * d + h + o * h..];
    let mut hidden = Vec::new();
    for j in 0..h {
        let mut z = b1[j];
        for i in 0..d {
            z += w1[j * d + i] * x[i];
        }
        hidden.push(z.tanh());
    }
    let mut scores = Vec::new();
    for k in 0..o {
        let mut z = b2[k];
        for j in 0..h {
            z += w2[k * h + j] * hidden[j];
        }
        scores.push(z);
    }
    if o == 1 {
        let p = 1.0 / (1.0 + (-scores[0]).exp());
        return vec![1.0 - p, p];
    }
    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..p.len() {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

fn uniform_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn linear_closed_form() {
    let m = ModelHandle::linear("lin", 2, vec![1.0, -1.0], vec![0.0]).unwrap();
    let p = m.predict(&[1.0, 0.0]).unwrap();
    assert_eq!(p.label, 1);
    let s1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((p.prob - s1).abs() < 1e-15);
    assert_eq!(m.class_prob(&[0.0, 0.0], 1), 0.5);
    let g = m.gradient(&[1.0, 0.0], 1).unwrap();
    assert!((g[0] - s1 * (1.0 - s1)).abs() < 1e-15);
    assert!((g[1] + s1 * (1.0 - s1)).abs() < 1e-15);
}

#[test]
fn mlp2_matches_independent_forward_pass() {
    let m = ModelHandle::random_mlp2("net", 6, 16, 5, 7, 2.0).unwrap();
    let def = m.to_definition();
    for x in uniform_points(200, 6, 99) {
        let want = mlp2_probs(&def.params, 6, 5, &x);
        let got = m.probabilities(&x).unwrap();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(m.predict(&x).unwrap().label, argmax(&want));
    }
    let bin = ModelHandle::random_mlp2("bin", 4, 8, 2, 7, 2.0).unwrap();
    let def = bin.to_definition();
    for x in uniform_points(50, 4, 5) {
        let want = mlp2_probs(&def.params, 4, 2, &x);
        assert_eq!(bin.predict(&x).unwrap().label, argmax(&want));
    }
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let seed = derive(0x6EAD, case);
        let classes = [2, 3, 8][(case % 3) as usize];
        let d = 3 + (case % 6) as usize;
        let m = if case % 2 == 0 {
            ModelHandle::random_mlp2("m", d, 12, classes, seed, 3.0).unwrap()
        } else {
            ModelHandle::random_linear("m", d, classes, seed, 2.0).unwrap()
        };
        let x = &uniform_points(1, d, seed ^ 1)[0];
        let class = (case as usize) % classes;
        let g = m.gradient(x, class).unwrap();
        for i in 0..d {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (m.class_prob(&up, class) - m.class_prob(&down, class)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs());
        }
    }
    assert!(worst < 1e-4, "max finite difference error {worst}");
}

#[test]
fn tree_has_no_gradient() {
    let t = ModelHandle::random_tree("t", 4, 3, 3, 1).unwrap();
    assert!(matches!(
        t.gradient(&[0.0; 4], 0),
        Err(XaasError::NotApplicable { kind: ModelKind::Tree, .. })
    ));
}

#[test]
fn zero_magnitude_update_only_bumps_version() {
    let m = ModelHandle::random_mlp2("m", 5, 8, 3, 11, 2.0).unwrap();
    let u = m.update_model(4, 0.0);
    assert_eq!(u.version(), m.version() + 1);
    assert!(u.same_params(&m));
    for x in uniform_points(100, 5, 3) {
        assert_eq!(m.probabilities(&x).unwrap(), u.probabilities(&x).unwrap());
    }
}

/// Share of a fixed 1000-point uniform probe set whose label changes when
/// the reference linear model (8 inputs, 4 classes, seed 31, scale 1) is
/// drifted with magnitude 0.5 and seed 17. Computed once by brute force.
const LINEAR_FLIP_FRACTION_AT_HALF: f64 = 0.261;

#[test]
fn drift_flip_fraction_calibration() {
    let m = ModelHandle::random_linear("lin", 8, 4, 31, 1.0).unwrap();
    let a = m.update_model(17, 0.5);
    let b = m.update_model(17, 0.5);
    assert!(a.same_params(&b));
    let probes = uniform_points(1000, 8, 0x9A0B);
    let flips = probes
        .iter()
        .filter(|x| m.predict(x).unwrap().label != a.predict(x).unwrap().label)
        .count();
    assert_eq!(flips as f64 / 1000.0, LINEAR_FLIP_FRACTION_AT_HALF);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_are_deterministic(seed in any::<u64>(), x in prop::collection::vec(-1.0f64..1.0, 5)) {
        let a = ModelHandle::random_mlp2("m", 5, 10, 4, seed, 3.0).unwrap();
        let b = ModelHandle::random_mlp2("m", 5, 10, 4, seed, 3.0).unwrap();
        let pa = a.probabilities(&x).unwrap();
        let pb = b.probabilities(&x).unwrap();
        prop_assert_eq!(pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let total: f64 = pa.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn versions_strictly_increase(seeds in prop::collection::vec(any::<u64>(), 1..20), mag in 0.0f64..1.0) {
        let mut m = ModelHandle::random_linear("m", 3, 3, 1, 1.0).unwrap();
        let mut seen = vec![m.version()];
        for s in seeds {
            m = m.update_model(s, mag);
            prop_assert!(!seen.contains(&m.version()));
            prop_assert!(m.version() > *seen.last().unwrap());
            seen.push(m.version());
        }
    }

    #[test]
    fn definitions_round_trip(seed in any::<u64>(), kind in 0u8..3) {
        let m = match kind {
            0 => ModelHandle::random_linear("m", 4, 3, seed, 1.0).unwrap(),
            1 => ModelHandle::random_mlp2("m", 4, 6, 2, seed, 2.0).unwrap(),
            _ => ModelHandle::random_tree("m", 4, 3, 5, seed).unwrap(),
        };
        let json = serde_json::to_string(&m.to_definition()).unwrap();
        let back = ModelHandle::from_definition(&serde_json::from_str(&json).unwrap()).unwrap();
        prop_assert!(back.same_params(&m));
        prop_assert_eq!(back.version(), m.version());
    }
}
