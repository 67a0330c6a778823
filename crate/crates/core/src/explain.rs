//! Explanation methods and the fidelity functional.
//!
//! Every explainer explains the probability of the label the model predicts
//! at `x` and returns a local linear surrogate `g(x') = w . x' + b` alongside
//! the attribution vector. The surrogate is what verification and fidelity
//! measurement evaluate.

use std::cell::Cell;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaasError};
use crate::model::{ModelHandle, ModelKind, Prediction};
use crate::rng::{derive, local_probes, seeded, standard_normal};

/// Largest feature count accepted by [`exact_shapley`].
pub const EXACT_SHAPLEY_MAX_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    LimeLocal,
    KernelShap,
    GradAttr,
    FastSaliency,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [
        MethodId::LimeLocal,
        MethodId::KernelShap,
        MethodId::GradAttr,
        MethodId::FastSaliency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::LimeLocal => "lime_local",
            MethodId::KernelShap => "kernel_shap",
            MethodId::GradAttr => "grad_attr",
            MethodId::FastSaliency => "fast_saliency",
        }
    }

    /// Whether the method can explain a model of this kind.
    pub fn applicable(self, kind: ModelKind) -> bool {
        match self {
            MethodId::GradAttr => kind.is_differentiable(),
            _ => true,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cost and quality profile the selector reasons about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub method: MethodId,
    /// Model evaluations needed to produce one explanation.
    pub base_cost: u64,
    /// Mean fidelity measured on the calibration probe set.
    pub fidelity_prior: f64,
}

impl MethodProfile {
    pub fn applicable(&self, kind: ModelKind) -> bool {
        self.method.applicable(kind)
    }

    /// Profiles with the default costs. The fidelity priors were measured
    /// with [`calibrate_fidelity_priors`] on [`calibration_models`] and are
    /// pinned here (250 points per model with confidence at least
    /// [`CALIBRATION_MIN_CONFIDENCE`], seed `0xCA1B`, see the
    /// `calibrate_priors` example) so the selector never has to regenerate
    /// explanations.
    pub fn defaults() -> Vec<MethodProfile> {
        vec![
            MethodProfile {
                method: MethodId::LimeLocal,
                base_cost: 1000,
                fidelity_prior: 0.9590,
            },
            MethodProfile {
                method: MethodId::KernelShap,
                base_cost: 500,
                fidelity_prior: 0.9575,
            },
            MethodProfile {
                method: MethodId::GradAttr,
                base_cost: 2,
                fidelity_prior: 0.9434,
            },
            MethodProfile {
                method: MethodId::FastSaliency,
                base_cost: 10,
                fidelity_prior: 0.9085,
            },
        ]
    }
}

/// Local linear model `g(x') = w . x' + b`, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Surrogate {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let v = self.b + self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        v.clamp(0.0, 1.0)
    }

    /// Surrogate that equals `value + w . (x' - center)`.
    fn centered(center: &[f64], value: f64, w: Vec<f64>) -> Self {
        let b = value - w.iter().zip(center).map(|(a, c)| a * c).sum::<f64>();
        Surrogate { w, b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: MethodId,
    pub model_id: String,
    pub model_version: u64,
    /// Label whose probability is explained; the cached prediction.
    pub prediction: usize,
    pub attribution: Vec<f64>,
    pub surrogate: Surrogate,
    /// Fidelity estimated on a fresh local probe sample at generation time.
    pub fidelity: f64,
    /// Model evaluations spent producing attribution and surrogate.
    pub cost_evals: u64,
}

/// Evaluate the explanation's surrogate at `x`.
pub fn surrogate_predict(expl: &Explanation, x: &[f64]) -> f64 {
    expl.surrogate.predict(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    /// Standard deviation of the Gaussian neighborhood, in input units.
    pub perturbation_scale: f64,
    /// Probes used for the fidelity estimate attached to new explanations.
    pub fidelity_probes: usize,
    /// Ridge term used when the least squares system is singular.
    pub ridge: f64,
    /// Kernel width of the sample weights as a multiple of
    /// `sqrt(d) * perturbation_scale`.
    pub kernel_width_factor: f64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            perturbation_scale: 0.1,
            fidelity_probes: 50,
            ridge: 1e-6,
            kernel_width_factor: 0.5,
        }
    }
}

/// What the explainers need from a model. Implemented by [`ModelHandle`] and
/// by instrumented wrappers in tests.
pub trait Predictor {
    fn model_id(&self) -> &str;
    fn version(&self) -> u64;
    fn kind(&self) -> ModelKind;
    fn input_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<Prediction>;
    fn class_prob(&self, x: &[f64], class: usize) -> f64;
    fn gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>>;
}

impl Predictor for ModelHandle {
    fn model_id(&self) -> &str {
        ModelHandle::model_id(self)
    }
    fn version(&self) -> u64 {
        ModelHandle::version(self)
    }
    fn kind(&self) -> ModelKind {
        ModelHandle::kind(self)
    }
    fn input_dim(&self) -> usize {
        ModelHandle::input_dim(self)
    }
    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        ModelHandle::predict(self, x)
    }
    fn class_prob(&self, x: &[f64], class: usize) -> f64 {
        ModelHandle::class_prob(self, x, class)
    }
    fn gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        ModelHandle::gradient(self, x, class)
    }
}

/// Counts every predict, probability and gradient call. Not `Sync`: one
/// counter per invocation.
pub struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    evals: Cell<u64>,
}

impl<'a, P: Predictor + ?Sized> Counted<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            evals: Cell::new(0),
        }
    }

    pub fn evals(&self) -> u64 {
        self.evals.get()
    }

    fn tick(&self) {
        self.evals.set(self.evals.get() + 1);
    }
}

impl<P: Predictor + ?Sized> Predictor for Counted<'_, P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn version(&self) -> u64 {
        self.inner.version()
    }
    fn kind(&self) -> ModelKind {
        self.inner.kind()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.tick();
        self.inner.predict(x)
    }
    fn class_prob(&self, x: &[f64], class: usize) -> f64 {
        self.tick();
        self.inner.class_prob(x, class)
    }
    fn gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.tick();
        self.inner.gradient(x, class)
    }
}

fn check_dim<P: Predictor + ?Sized>(model: &P, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(XaasError::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `1 - mean |f(x_i) - g(x_i)|` over the probe set, where `f` is the model's
/// probability of the explained label and `g` the clamped surrogate.
pub fn fidelity<P: Predictor + ?Sized>(
    expl: &Explanation,
    model: &P,
    probes: &[Vec<f64>],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(XaasError::Empty("probe set"));
    }
    let mut dev = 0.0;
    for p in probes {
        check_dim(model, p)?;
        dev += (model.class_prob(p, expl.prediction) - expl.surrogate.predict(p)).abs();
    }
    Ok((1.0 - dev / probes.len() as f64).clamp(0.0, 1.0))
}

/// Fidelity on `n` fresh Gaussian probes around `x`.
pub fn local_fidelity<P: Predictor + ?Sized>(
    expl: &Explanation,
    model: &P,
    x: &[f64],
    n: usize,
    scale: f64,
    seed: u64,
) -> Result<f64> {
    fidelity(expl, model, &local_probes(x, n, scale, seed))
}

/// Solve the `p x p` symmetric system `a . beta = c`. Falls back to a ridge
/// term and finally to an SVD pseudo-inverse, so it always returns.
fn solve_normal_equations(a: Vec<f64>, c: Vec<f64>, p: usize, ridge: f64) -> Vec<f64> {
    let a = DMatrix::from_row_slice(p, p, &a);
    let c = DVector::from_vec(c);
    if let Some(ch) = a.clone().cholesky() {
        let sol = ch.solve(&c);
        if sol.iter().all(|v| v.is_finite()) {
            return sol.iter().copied().collect();
        }
    }
    let ridged = &a + DMatrix::identity(p, p) * ridge;
    if let Some(ch) = ridged.clone().cholesky() {
        let sol = ch.solve(&c);
        if sol.iter().all(|v| v.is_finite()) {
            return sol.iter().copied().collect();
        }
    }
    ridged
        .svd(true, true)
        .solve(&c, 1e-12)
        .map(|s| s.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; p])
}

/// Weighted least squares of `y` on `[1, z]`. Returns `(intercept, slopes)`.
fn weighted_linear_fit(rows: &[Vec<f64>], y: &[f64], weights: &[f64], ridge: f64) -> (f64, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let p = d + 1;
    let mut a = vec![0.0; p * p];
    let mut c = vec![0.0; p];
    let mut z = vec![0.0; p];
    for ((row, &yi), &wi) in rows.iter().zip(y).zip(weights) {
        z[0] = 1.0;
        z[1..].copy_from_slice(row);
        for i in 0..p {
            let wz = wi * z[i];
            c[i] += wz * yi;
            for j in i..p {
                a[i * p + j] += wz * z[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[i * p + j] = a[j * p + i];
        }
    }
    let beta = solve_normal_equations(a, c, p, ridge);
    (beta[0], beta[1..].to_vec())
}

#[allow(clippy::too_many_arguments)]
fn finish<P: Predictor + ?Sized>(
    method: MethodId,
    model: &P,
    x: &[f64],
    prediction: usize,
    attribution: Vec<f64>,
    surrogate: Surrogate,
    cost_evals: u64,
    seed: u64,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    let mut expl = Explanation {
        method,
        model_id: model.model_id().to_string(),
        model_version: model.version(),
        prediction,
        attribution,
        surrogate,
        fidelity: 0.0,
        cost_evals,
    };
    expl.fidelity = local_fidelity(
        &expl,
        model,
        x,
        cfg.fidelity_probes.max(1),
        cfg.perturbation_scale,
        derive(seed, 0xF1DE),
    )?;
    Ok(expl)
}

/// Local surrogate fitted by distance-weighted least squares on `n` Gaussian
/// perturbations. Returns the surrogate and the model evaluations used.
fn fit_local_surrogate<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    label: usize,
    n: usize,
    seed: u64,
    cfg: &ExplainerConfig,
) -> Surrogate {
    let d = x.len();
    let scale = cfg.perturbation_scale;
    let width = cfg.kernel_width_factor * (d as f64).sqrt() * scale;
    let mut rng = seeded(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut point = vec![0.0; d];
    for _ in 0..n {
        let mut offset = vec![0.0; d];
        let mut sq = 0.0;
        for i in 0..d {
            offset[i] = scale * standard_normal(&mut rng);
            point[i] = x[i] + offset[i];
            sq += offset[i] * offset[i];
        }
        y.push(model.class_prob(&point, label));
        w.push((-sq / (width * width)).exp());
        rows.push(offset);
    }
    if n == 0 {
        return Surrogate::centered(x, 0.5, vec![0.0; d]);
    }
    let (intercept, slopes) = weighted_linear_fit(&rows, &y, &w, cfg.ridge);
    Surrogate::centered(x, intercept, slopes)
}

/// LIME style explanation: the attribution is the surrogate slope.
pub fn explain_lime<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    check_dim(model, x)?;
    let d = x.len();
    if n_samples < d + 1 {
        return Err(XaasError::Precondition(format!(
            "lime needs at least d+1 = {} samples, got {n_samples}",
            d + 1
        )));
    }
    let counted = Counted::new(model);
    let label = counted.predict(x)?.label;
    let surrogate = fit_local_surrogate(&counted, x, label, n_samples - 1, seed, cfg);
    let attribution = surrogate.w.clone();
    finish(
        MethodId::LimeLocal,
        model,
        x,
        label,
        attribution,
        surrogate,
        counted.evals(),
        seed,
        cfg,
    )
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn masked(x: &[f64], mask: u64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| if mask >> i & 1 == 1 { *v } else { 0.0 })
        .collect()
}

/// Visit every `d`-bit mask with exactly `k` bits set (Gosper's hack).
fn for_each_subset(d: usize, k: usize, mut f: impl FnMut(u64)) {
    if k == 0 || k > d {
        return;
    }
    let limit = 1u64 << d;
    let mut m: u64 = (1u64 << k) - 1;
    while m < limit {
        f(m);
        let c = m & m.wrapping_neg();
        let r = m + c;
        m = (((r ^ m) >> 2) / c) | r;
    }
}

fn random_subset(rng: &mut impl Rng, d: usize, k: usize) -> u64 {
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        idx.swap(i, j);
    }
    idx[..k].iter().fold(0u64, |m, &i| m | 1 << i)
}

/// Shapley values of the zero-baseline coalition game estimated by
/// Shapley-kernel weighted regression with `budget` coalition evaluations
/// beyond the full coalition `v_full` (the empty coalition included). Subset sizes are enumerated
/// exhaustively, smallest first, while the budget allows; the rest are
/// sampled in complementary pairs. The efficiency constraint is exact.
fn kernel_shap_values<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    label: usize,
    v_full: f64,
    budget: usize,
    seed: u64,
) -> Vec<f64> {
    let d = x.len();
    let v_empty = model.class_prob(&vec![0.0; d], label);
    let delta = v_full - v_empty;
    if d == 1 {
        return vec![delta];
    }
    let mut remaining = budget.saturating_sub(1);

    // Kernel mass of each subset size s in 1..d.
    let size_mass: Vec<f64> = (1..d)
        .map(|s| (d - 1) as f64 / (s * (d - s)) as f64)
        .collect();
    let total_mass: f64 = size_mass.iter().sum();

    let mut masks: Vec<u64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();

    // Sizes grouped as (s, d - s) pairs.
    let half = d / 2;
    let mut pairs: Vec<usize> = (1..=half).collect();
    pairs.retain(|&s| s <= d - s);
    let pair_mass = |s: usize| -> f64 {
        if s == d - s {
            size_mass[s - 1]
        } else {
            size_mass[s - 1] + size_mass[d - s - 1]
        }
    };
    let pair_count = |s: usize| -> f64 {
        if s == d - s {
            binomial(d, s)
        } else {
            2.0 * binomial(d, s)
        }
    };

    let mut mass_left = total_mass;
    let mut next = 0;
    while next < pairs.len() {
        let s = pairs[next];
        let need = pair_count(s);
        let share = pair_mass(s) / mass_left;
        if need > remaining as f64 || (remaining as f64) * share < need - 1e-8 {
            break;
        }
        let per_subset = size_mass[s - 1] / binomial(d, s) / total_mass;
        for_each_subset(d, s, |m| {
            masks.push(m);
            weights.push(per_subset);
            if s != d - s {
                masks.push(!m & ((1u64 << d) - 1));
                weights.push(per_subset);
            }
        });
        remaining -= need as usize;
        mass_left -= pair_mass(s);
        next += 1;
    }

    if next < pairs.len() && remaining > 0 {
        let open = &pairs[next..];
        let open_mass: Vec<f64> = open.iter().map(|&s| pair_mass(s)).collect();
        let open_total: f64 = open_mass.iter().sum();
        let per_sample = (mass_left / total_mass) / remaining as f64;
        let mut rng = seeded(derive(seed, 0x5AA9));
        let full = (1u64 << d) - 1;
        while remaining > 0 {
            let mut u = rng.random::<f64>() * open_total;
            let mut pick = open.len() - 1;
            for (i, m) in open_mass.iter().enumerate() {
                if u < *m {
                    pick = i;
                    break;
                }
                u -= m;
            }
            let s = open[pick];
            // Orient the pair at random so odd budgets stay unbiased.
            let mut m = random_subset(&mut rng, d, s);
            if s != d - s && rng.random::<bool>() {
                m = !m & full;
            }
            masks.push(m);
            weights.push(per_sample);
            remaining -= 1;
            if remaining > 0 {
                masks.push(!m & full);
                weights.push(per_sample);
                remaining -= 1;
            }
        }
    }

    if masks.is_empty() {
        // No coalition budget: spread the total effect evenly.
        return vec![delta / d as f64; d];
    }

    // Eliminate the last feature with the efficiency constraint:
    // y - z_last * delta = sum_{i<last} phi_i (z_i - z_last).
    let p = d - 1;
    let mut a = vec![0.0; p * p];
    let mut c = vec![0.0; p];
    let mut row = vec![0.0; p];
    for (m, w) in masks.iter().zip(&weights) {
        let v = model.class_prob(&masked(x, *m), label) - v_empty;
        let z_last = (m >> (d - 1) & 1) as f64;
        let target = v - z_last * delta;
        for (i, r) in row.iter_mut().enumerate() {
            *r = (m >> i & 1) as f64 - z_last;
        }
        for i in 0..p {
            let wr = w * row[i];
            c[i] += wr * target;
            for j in i..p {
                a[i * p + j] += wr * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[i * p + j] = a[j * p + i];
        }
    }
    let mut phi = solve_normal_equations(a, c, p, 1e-9);
    let last = delta - phi.iter().sum::<f64>();
    phi.push(last);
    phi
}

/// Kernel SHAP against the zero baseline. Three quarters of the budget go to
/// coalition evaluations, the rest to a LIME style local surrogate so that
/// verification has a local model to check.
pub fn explain_kernel_shap<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    check_dim(model, x)?;
    let d = x.len();
    if n_samples < 2 * d {
        return Err(XaasError::Precondition(format!(
            "kernel_shap needs at least 2d = {} samples, got {n_samples}",
            2 * d
        )));
    }
    if d > 63 {
        return Err(XaasError::Precondition("kernel_shap supports at most 63 features".into()));
    }
    let counted = Counted::new(model);
    let n_local = n_samples / 4;
    let n_coalitions = n_samples - n_local;
    let pred = counted.predict(x)?;
    let label = pred.label;
    let phi = kernel_shap_values(&counted, x, label, pred.prob, n_coalitions.saturating_sub(1), seed);
    let surrogate = if n_local == 0 {
        Surrogate::centered(x, pred.prob, vec![0.0; d])
    } else {
        fit_local_surrogate(&counted, x, label, n_local, derive(seed, 0x10CA1), cfg)
    };
    finish(
        MethodId::KernelShap,
        model,
        x,
        label,
        phi,
        surrogate,
        counted.evals(),
        seed,
        cfg,
    )
}

/// Exact Shapley values of the zero-baseline game `v(S) = f(x_S)` for the
/// predicted label, by enumeration of all `2^d` coalitions.
pub fn exact_shapley<P: Predictor + ?Sized>(model: &P, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(model, x)?;
    let d = x.len();
    if d > EXACT_SHAPLEY_MAX_FEATURES {
        return Err(XaasError::TooManyFeatures(d));
    }
    let label = model.predict(x)?.label;
    let n = 1usize << d;
    let values: Vec<f64> = (0..n)
        .map(|m| model.class_prob(&masked(x, m as u64), label))
        .collect();
    // weight(|S|) = |S|! (d - |S| - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for s in 0..n {
            if s & bit != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            let w = fact[k] * fact[d - k - 1] / fact[d];
            *p += w * (values[s | bit] - values[s]);
        }
    }
    Ok(phi)
}

/// Gradient times input, with the first-order Taylor expansion at `x` as
/// surrogate. One forward and one backward pass.
pub fn explain_gradient<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    seed: u64,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    check_dim(model, x)?;
    if !model.kind().is_differentiable() {
        return Err(XaasError::NotApplicable {
            method: MethodId::GradAttr.to_string(),
            kind: model.kind(),
        });
    }
    let counted = Counted::new(model);
    let pred = counted.predict(x)?;
    let grad = counted.gradient(x, pred.label)?;
    let attribution = grad.iter().zip(x).map(|(g, v)| g * v).collect();
    let surrogate = Surrogate::centered(x, pred.prob, grad);
    finish(
        MethodId::GradAttr,
        model,
        x,
        pred.label,
        attribution,
        surrogate,
        counted.evals(),
        seed,
        cfg,
    )
}

/// Occlusion saliency over at most nine contiguous feature groups: each
/// group is zeroed once. The surrogate reproduces the occlusion secant along
/// every group direction.
pub fn explain_fast_saliency<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    seed: u64,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    check_dim(model, x)?;
    let d = x.len();
    let groups = d.min(9);
    let counted = Counted::new(model);
    let pred = counted.predict(x)?;
    let mut attribution = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut occluded = x.to_vec();
    for g in 0..groups {
        let lo = g * d / groups;
        let hi = (g + 1) * d / groups;
        for v in &mut occluded[lo..hi] {
            *v = 0.0;
        }
        let drop = pred.prob - counted.class_prob(&occluded, pred.label);
        occluded[lo..hi].copy_from_slice(&x[lo..hi]);
        let norm: f64 = x[lo..hi].iter().map(|v| v * v).sum();
        for i in lo..hi {
            if norm > 1e-12 {
                attribution[i] = drop * x[i] * x[i] / norm;
                w[i] = drop * x[i] / norm;
            }
        }
    }
    let surrogate = Surrogate::centered(x, pred.prob, w);
    finish(
        MethodId::FastSaliency,
        model,
        x,
        pred.label,
        attribution,
        surrogate,
        counted.evals(),
        seed,
        cfg,
    )
}

/// Sample budgets used when a method is run by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleBudgets {
    pub lime_local: usize,
    pub kernel_shap: usize,
}

impl Default for SampleBudgets {
    fn default() -> Self {
        Self {
            lime_local: 1000,
            kernel_shap: 500,
        }
    }
}

/// Run `method` on `model` at `x`.
pub fn explain<P: Predictor + ?Sized>(
    method: MethodId,
    model: &P,
    x: &[f64],
    seed: u64,
    budgets: &SampleBudgets,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    let d = x.len();
    match method {
        MethodId::LimeLocal => explain_lime(model, x, budgets.lime_local.max(d + 1), seed, cfg),
        MethodId::KernelShap => {
            explain_kernel_shap(model, x, budgets.kernel_shap.max(2 * d), seed, cfg)
        }
        MethodId::GradAttr => explain_gradient(model, x, seed, cfg),
        MethodId::FastSaliency => explain_fast_saliency(model, x, seed, cfg),
    }
}

/// Models the fidelity priors are calibrated on: the simulator's scenario
/// model family (8 inputs, 32 tanh units, 8 classes, weight scale 5).
pub fn calibration_models() -> Vec<ModelHandle> {
    (0..4)
        .map(|i| {
            ModelHandle::random_mlp2("calibration", 8, 32, 8, 1000 + i, 5.0)
                .expect("valid calibration model")
        })
        .collect()
}

/// Minimum predicted-class probability of calibration and workload inputs.
pub const CALIBRATION_MIN_CONFIDENCE: f64 = 0.6;

const MAX_REJECTIONS: usize = 10_000;

/// Uniform input in `[-1, 1]^d` whose predicted label has probability at
/// least `min_confidence`, by rejection. Falls back to the last draw after
/// 10k rejections.
pub fn confident_input(model: &ModelHandle, rng: &mut impl Rng, min_confidence: f64) -> Vec<f64> {
    let mut x = Vec::new();
    for _ in 0..MAX_REJECTIONS {
        x = (0..model.input_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let label = model.predict(&x).map(|p| p.label).unwrap_or(0);
        if model.class_prob(&x, label) >= min_confidence {
            break;
        }
    }
    x
}

/// Mean local fidelity of every method over `points` seeded inputs per
/// model, drawn with [`confident_input`]. Methods not applicable to a model
/// are skipped for it.
pub fn calibrate_fidelity_priors(
    models: &[ModelHandle],
    points: usize,
    min_confidence: f64,
    seed: u64,
    budgets: &SampleBudgets,
    cfg: &ExplainerConfig,
) -> Result<Vec<(MethodId, f64)>> {
    let mut out = Vec::new();
    for method in MethodId::ALL {
        let mut total = 0.0;
        let mut count = 0usize;
        for (mi, model) in models.iter().enumerate() {
            if !method.applicable(model.kind()) {
                continue;
            }
            let mut rng = seeded(derive(seed, mi as u64));
            for j in 0..points {
                let x = confident_input(model, &mut rng, min_confidence);
                let s = derive(seed, (mi * 100_000 + j) as u64);
                let e = explain(method, model, &x, s, budgets, cfg)?;
                total += local_fidelity(&e, model, &x, 200, cfg.perturbation_scale, derive(s, 77))?;
                count += 1;
            }
        }
        if count > 0 {
            out.push((method, total / count as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> ModelHandle {
        ModelHandle::linear("lin", 2, vec![1.5, -0.8, 0.4, 0.0], vec![0.2]).unwrap()
    }

    #[test]
    fn surrogate_clamps_and_constant_case() {
        let s = Surrogate { w: vec![0.0, 0.0], b: 0.5 };
        assert_eq!(s.predict(&[100.0, -3.0]), 0.5);
        let s = Surrogate { w: vec![10.0], b: 0.0 };
        assert_eq!(s.predict(&[1.0]), 1.0);
        assert_eq!(s.predict(&[-1.0]), 0.0);
    }

    #[test]
    fn surrogate_golden_dot_product() {
        // 0.1 + 0.2*0.5 - 0.3*0.25 + 0.4*(-0.5) = -0.075 -> clamped 0
        let s = Surrogate { w: vec![0.2, -0.3, 0.4], b: 0.1 };
        assert_eq!(s.predict(&[0.5, 0.25, -0.5]), 0.0);
        // 0.5 + 0.2*0.5 - 0.3*(-0.5) + 0.4*0.25 = 0.85
        let s = Surrogate { w: vec![0.2, -0.3, 0.4], b: 0.5 };
        assert!((s.predict(&[0.5, -0.5, 0.25]) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn lime_rejects_small_budgets() {
        let m = linear();
        let err = explain_lime(&m, &[0.1, 0.2, 0.3, 0.4], 4, 1, &ExplainerConfig::default());
        assert!(matches!(err, Err(XaasError::Precondition(_))));
        let err = explain_kernel_shap(&m, &[0.1, 0.2, 0.3, 0.4], 7, 1, &ExplainerConfig::default());
        assert!(matches!(err, Err(XaasError::Precondition(_))));
    }

    #[test]
    fn sampling_explainers_are_deterministic() {
        let m = ModelHandle::random_mlp2("m", 5, 6, 3, 4, 3.0).unwrap();
        let x = [0.3, -0.2, 0.5, 0.9, -0.7];
        let cfg = ExplainerConfig::default();
        assert_eq!(
            explain_lime(&m, &x, 300, 8, &cfg).unwrap(),
            explain_lime(&m, &x, 300, 8, &cfg).unwrap()
        );
        assert_eq!(
            explain_kernel_shap(&m, &x, 40, 8, &cfg).unwrap(),
            explain_kernel_shap(&m, &x, 40, 8, &cfg).unwrap()
        );
    }

    #[test]
    fn gradient_at_origin_is_zero_and_tree_is_refused() {
        let m = linear();
        let e = explain_gradient(&m, &[0.0; 4], 1, &ExplainerConfig::default()).unwrap();
        assert!(e.attribution.iter().all(|v| *v == 0.0));
        assert_eq!(e.cost_evals, 2);
        let t = ModelHandle::random_tree("t", 4, 3, 2, 1).unwrap();
        assert!(matches!(
            explain_gradient(&t, &[0.0; 4], 1, &ExplainerConfig::default()),
            Err(XaasError::NotApplicable { .. })
        ));
    }

    #[test]
    fn fidelity_formula_arithmetic() {
        let m = ModelHandle::linear("flat", 2, vec![0.0], vec![0.0]).unwrap();
        let mut e = explain_gradient(&m, &[0.3], 1, &ExplainerConfig::default()).unwrap();
        e.surrogate = Surrogate { w: vec![0.0], b: 0.5 };
        let probes = vec![vec![0.1], vec![-0.4]];
        // Constant model at 0.5 vs constant surrogate at 0.5.
        assert_eq!(fidelity(&e, &m, &probes).unwrap(), 1.0);
        // Model saturated at 1.0 for class 1 vs surrogate 0.5.
        let sat = ModelHandle::linear("sat", 2, vec![0.0], vec![800.0]).unwrap();
        e.prediction = 1;
        assert_eq!(fidelity(&e, &sat, &probes).unwrap(), 0.5);
        assert!(fidelity(&e, &sat, &[]).is_err());
    }

    #[test]
    fn exact_shapley_refuses_large_inputs() {
        let m = ModelHandle::random_linear("l", 13, 2, 1, 1.0).unwrap();
        assert!(matches!(
            exact_shapley(&m, &[0.1; 13]),
            Err(XaasError::TooManyFeatures(13))
        ));
    }

    #[test]
    fn subsets_enumerated_exactly_once() {
        let mut seen = Vec::new();
        for_each_subset(5, 2, |m| seen.push(m));
        assert_eq!(seen.len(), 10);
        assert!(seen.iter().all(|m| m.count_ones() == 2 && *m < 32));
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }
}
