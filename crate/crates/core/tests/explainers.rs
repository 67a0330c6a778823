use proptest::prelude::*;
use rand::Rng;
use xaas_core::explain::{
    exact_shapley, explain, explain_gradient, explain_kernel_shap, explain_lime, fidelity, local_fidelity,
    Counted, ExplainerConfig, Explanation, MethodId, Predictor, SampleBudgets, Surrogate,
};
use xaas_core::model::{ModelHandle, ModelKind, Prediction};
use xaas_core::rng::{derive, seeded};
use xaas_core::Result;

fn uniform(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `f(x) = 0.5 + sum c_i x_i` as the probability of class 0.
struct Additive {
    c: Vec<f64>,
}

impl Predictor for Additive {
    fn model_id(&self) -> &str {
        "additive"
    }
    fn version(&self) -> u64 {
        1
    }
    fn kind(&self) -> ModelKind {
        ModelKind::Linear
    }
    fn input_dim(&self) -> usize {
        self.c.len()
    }
    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(Prediction {
            label: 0,
            prob: self.class_prob(x, 0),
        })
    }
    fn class_prob(&self, x: &[f64], _class: usize) -> f64 {
        0.5 + self.c.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
    fn gradient(&self, _x: &[f64], _class: usize) -> Result<Vec<f64>> {
        Ok(self.c.clone())
    }
}

#[test]
fn lime_recovers_linear_gradient_direction() {
    let cfg = ExplainerConfig::default();
    for case in 0..10u64 {
        let m = ModelHandle::random_linear("lin", 8, 2, derive(3, case), 1.0).unwrap();
        let x = uniform(8, derive(4, case));
        let e = explain_lime(&m, &x, 2000, case, &cfg).unwrap();
        let g = m.gradient(&x, e.prediction).unwrap();
        let c = cosine(&e.attribution, &g);
        assert!(c >= 0.95, "case {case}: cosine {c}");
    }
}

#[test]
fn kernel_shap_tracks_exact_shapley() {
    let cfg = ExplainerConfig::default();
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let d = 4 + (case % 5) as usize;
        let seed = derive(0x5A, case);
        let m = match case % 3 {
            0 => ModelHandle::random_mlp2("m", d, 16, 4, seed, 3.0).unwrap(),
            1 => ModelHandle::random_linear("m", d, 3, seed, 1.5).unwrap(),
            _ => ModelHandle::random_tree("m", d, 4, 3, seed).unwrap(),
        };
        let x = uniform(d, seed ^ 7);
        let approx = explain_kernel_shap(&m, &x, 500, case, &cfg).unwrap();
        let exact = exact_shapley(&m, &x).unwrap();
        for (a, b) in approx.attribution.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 0.05, "L-inf gap {worst}");
}

#[test]
fn kernel_shap_symmetry() {
    let cfg = ExplainerConfig::default();
    let w = vec![0.8, 0.8, -0.5, 0.3, 1.1, -0.9];
    let m = ModelHandle::linear("sym", 2, w, vec![0.1]).unwrap();
    let x = [0.4, 0.4, -0.2, 0.7, 0.1, -0.6];
    let e = explain_kernel_shap(&m, &x, 500, 9, &cfg).unwrap();
    assert!((e.attribution[0] - e.attribution[1]).abs() < 0.02);
}

#[test]
fn exact_shapley_additive_game() {
    let c = vec![0.1, -0.2, 0.05, 0.15];
    let f = Additive { c: c.clone() };
    let x = [0.5, -0.3, 0.9, -1.0];
    let phi = exact_shapley(&f, &x).unwrap();
    for i in 0..4 {
        assert!((phi[i] - c[i] * x[i]).abs() < 1e-12);
    }
}

#[test]
fn exact_shapley_two_feature_golden() {
    // Binary logistic model w = [1, 2], b = 0 at x = [0.5, -1]: the
    // predicted label is 0, so v(S) = 1 - sigmoid(w . x_S).
    //   v({})     = 0.5
    //   v({1})    = 1 - sigmoid(0.5)  = 0.3775406687981454
    //   v({2})    = 1 - sigmoid(-2)   = 0.8807970779778824
    //   v({1,2})  = 1 - sigmoid(-1.5) = 0.8175744761936437
    // phi_1 = ((v1 - v0) + (v12 - v2)) / 2 = -0.09284096649304668
    // phi_2 = ((v2 - v0) + (v12 - v1)) / 2 =  0.41041544268669033
    let m = ModelHandle::linear("g", 2, vec![1.0, 2.0], vec![0.0]).unwrap();
    let phi = exact_shapley(&m, &[0.5, -1.0]).unwrap();
    assert!((phi[0] + 0.09284096649304668).abs() < 1e-12, "{}", phi[0]);
    assert!((phi[1] - 0.41041544268669033).abs() < 1e-12, "{}", phi[1]);
}

#[test]
fn shapley_efficiency() {
    let cfg = ExplainerConfig::default();
    for case in 0..10u64 {
        let d = 3 + (case % 6) as usize;
        let m = ModelHandle::random_mlp2("m", d, 12, 3, case, 3.0).unwrap();
        let x = uniform(d, case + 100);
        let label = m.predict(&x).unwrap().label;
        let delta = m.class_prob(&x, label) - m.class_prob(&vec![0.0; d], label);
        let exact: f64 = exact_shapley(&m, &x).unwrap().iter().sum();
        assert!((exact - delta).abs() < 1e-9);
        let approx: f64 = explain_kernel_shap(&m, &x, 500, case, &cfg)
            .unwrap()
            .attribution
            .iter()
            .sum();
        assert!((approx - delta).abs() <= 0.1);
    }
}

#[test]
fn gradient_surrogate_is_first_order_exact_on_linear() {
    let cfg = ExplainerConfig::default();
    for case in 0..10u64 {
        let m = ModelHandle::random_linear("lin", 6, 2, case, 1.0).unwrap();
        let x = uniform(6, case + 50);
        let e = explain_gradient(&m, &x, case, &cfg).unwrap();
        let f = local_fidelity(&e, &m, &x, 200, 0.05, case).unwrap();
        assert!(f >= 0.99, "case {case}: {f}");
        assert_eq!(e.cost_evals, 2);
    }
}

#[test]
fn lime_meets_fidelity_target_on_linear() {
    let cfg = ExplainerConfig::default();
    let mut total = 0.0;
    for case in 0..10u64 {
        let m = ModelHandle::random_linear("lin", 8, 2, derive(8, case), 1.0).unwrap();
        let x = uniform(8, derive(9, case));
        let e = explain_lime(&m, &x, 1000, case, &cfg).unwrap();
        let f = local_fidelity(&e, &m, &x, 200, cfg.perturbation_scale, derive(case, 1)).unwrap();
        assert!(f >= 0.90, "case {case}: {f}");
        total += f;
    }
    assert!(total / 10.0 >= 0.92);
}

#[test]
fn reported_cost_matches_instrumented_count() {
    let cfg = ExplainerConfig::default();
    let budgets = SampleBudgets::default();
    let models = [
        ModelHandle::random_mlp2("m", 6, 8, 3, 1, 2.0).unwrap(),
        ModelHandle::random_tree("t", 6, 3, 3, 2).unwrap(),
    ];
    let x = uniform(6, 3);
    for m in &models {
        for method in MethodId::ALL {
            if !method.applicable(m.kind()) {
                continue;
            }
            let counted = Counted::new(m);
            let e = explain(method, &counted, &x, 5, &budgets, &cfg).unwrap();
            // Generation plus the fidelity estimate attached afterwards.
            assert_eq!(counted.evals(), e.cost_evals + cfg.fidelity_probes as u64, "{method}");
        }
    }
    let counted = Counted::new(&models[0]);
    let e = explain_lime(&counted, &x, 300, 1, &cfg).unwrap();
    assert_eq!(e.cost_evals, 300);
}

#[test]
fn sampling_explainers_are_deterministic() {
    let cfg = ExplainerConfig::default();
    let m = ModelHandle::random_mlp2("m", 5, 8, 3, 1, 2.0).unwrap();
    let x = uniform(5, 2);
    assert_eq!(
        explain_kernel_shap(&m, &x, 200, 4, &cfg).unwrap(),
        explain_kernel_shap(&m, &x, 200, 4, &cfg).unwrap()
    );
    assert!(explain_kernel_shap(&m, &x, 9, 4, &cfg).is_err());
}

fn constant_explanation(w: Vec<f64>, b: f64) -> Explanation {
    Explanation {
        method: MethodId::LimeLocal,
        model_id: "m".into(),
        model_version: 1,
        prediction: 0,
        attribution: w.clone(),
        surrogate: Surrogate { w, b },
        fidelity: 1.0,
        cost_evals: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fidelity_drops_when_a_worse_probe_is_added(
        seed in any::<u64>(),
        w in prop::collection::vec(-0.5f64..0.5, 3),
        b in 0.2f64..0.8,
        n in 1usize..30,
    ) {
        let m = ModelHandle::random_linear("m", 3, 2, seed, 2.0).unwrap();
        let e = constant_explanation(w, b);
        let mut rng = seeded(seed);
        let probes: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dev = |p: &Vec<f64>| (m.class_prob(p, 0) - e.surrogate.predict(p)).abs();
        let mean_dev = probes.iter().map(dev).sum::<f64>() / n as f64;
        let before = fidelity(&e, &m, &probes).unwrap();
        let extra: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        if let Some(p) = extra.into_iter().find(|p| dev(p) > mean_dev + 1e-9) {
            let mut more = probes.clone();
            more.push(p);
            prop_assert!(fidelity(&e, &m, &more).unwrap() < before);
        }
    }

    #[test]
    fn fidelity_stays_in_unit_interval(seed in any::<u64>(), w in prop::collection::vec(-5.0f64..5.0, 4), b in -3.0f64..3.0) {
        let m = ModelHandle::random_mlp2("m", 4, 6, 3, seed, 3.0).unwrap();
        let e = constant_explanation(w, b);
        let x = uniform(4, seed);
        let f = local_fidelity(&e, &m, &x, 20, 0.1, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        for p in xaas_core::rng::local_probes(&x, 5, 3.0, seed) {
            let g = e.surrogate.predict(&p);
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}
