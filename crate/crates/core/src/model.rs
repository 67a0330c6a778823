//! Small analytic predictive models with versioning and seeded drift.
//!
//! Three families are supported: multinomial logistic (`linear`), a one
//! hidden layer tanh network (`mlp2`) and a complete binary decision tree
//! (`tree`). Binary models expose a single logit passed through a sigmoid;
//! models with more classes use a softmax.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaasError};
use crate::rng::{seeded, standard_normal};

pub const MAX_CLASSES: usize = 16;
pub const MAX_HIDDEN: usize = 64;
pub const MAX_TREE_DEPTH: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp2,
    Tree,
}

impl ModelKind {
    pub fn is_differentiable(self) -> bool {
        matches!(self, ModelKind::Linear | ModelKind::Mlp2)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp2 => "mlp2",
            ModelKind::Tree => "tree",
        })
    }
}

/// A validated request input. Coordinates are finite and live in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputInstance(Vec<f64>);

impl InputInstance {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(XaasError::Empty("features"));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(XaasError::NonFinite(i));
        }
        if let Some(i) = features.iter().position(|v| v.abs() > 1.0) {
            return Err(XaasError::Precondition(format!(
                "feature {i} = {} outside [-1, 1]",
                features[i]
            )));
        }
        Ok(Self(features))
    }

    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    /// `w` is `outputs x d`, row major.
    Linear { w: Vec<f64>, b: Vec<f64> },
    Mlp2 {
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
    /// Complete tree stored breadth first. Internal node `i` has children
    /// `2i+1` (taken when `x[feature] <= threshold`) and `2i+2`.
    Tree {
        depth: u32,
        features: Vec<usize>,
        thresholds: Vec<f64>,
        leaves: Vec<f64>,
    },
}

/// Serializable model definition used for service startup and experiment
/// files. Parameters are flattened in a kind specific layout:
///
/// * `linear`: `W (o x d)`, `b (o)`
/// * `mlp2`: `W1 (h x d)`, `b1 (h)`, `W2 (o x h)`, `b2 (o)`
/// * `tree`: `depth` pairs of `(feature, threshold)` for every internal node,
///   then `o` scores per leaf
///
/// where `o` is 1 for binary models and `num_classes` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDefinition {
    pub model_id: String,
    pub version: u64,
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
}

/// An immutable, versioned model. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    model_id: Arc<str>,
    version: u64,
    kind: ModelKind,
    input_dim: usize,
    num_classes: usize,
    params: Arc<Params>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// tanh through a single `exp`; within a few ulps of `f64::tanh` and
/// several times cheaper than the libm routine.
#[inline]
fn tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let t = (2.0 * z).exp();
    (t - 1.0) / (t + 1.0)
}

fn outputs_for(num_classes: usize) -> usize {
    if num_classes == 2 {
        1
    } else {
        num_classes
    }
}

fn check_shape(input_dim: usize, num_classes: usize) -> Result<()> {
    if input_dim == 0 {
        return Err(XaasError::InvalidModel("input_dim must be >= 1".into()));
    }
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(XaasError::InvalidModel(format!(
            "num_classes must be in 2..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    Ok(())
}

impl ModelHandle {
    pub fn linear(
        model_id: &str,
        num_classes: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let o = outputs_for(num_classes);
        if bias.len() != o || weights.is_empty() || !weights.len().is_multiple_of(o) {
            return Err(XaasError::InvalidModel(format!(
                "linear model with {num_classes} classes needs {o} bias terms and a multiple of {o} weights"
            )));
        }
        let d = weights.len() / o;
        check_shape(d, num_classes)?;
        Ok(Self {
            model_id: model_id.into(),
            version: 1,
            kind: ModelKind::Linear,
            input_dim: d,
            num_classes,
            params: Arc::new(Params::Linear { w: weights, b: bias }),
        })
    }

    pub fn random_linear(
        model_id: &str,
        input_dim: usize,
        num_classes: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        check_shape(input_dim, num_classes)?;
        let o = outputs_for(num_classes);
        let mut rng = seeded(seed);
        let w = (0..o * input_dim)
            .map(|_| scale * standard_normal(&mut rng))
            .collect();
        let b = (0..o).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        Self::linear(model_id, num_classes, w, b)
    }

    /// Random one hidden layer tanh network. First layer weights have
    /// standard deviation `scale / sqrt(d)`, output weights `scale / sqrt(h)`.
    pub fn random_mlp2(
        model_id: &str,
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        check_shape(input_dim, num_classes)?;
        if hidden == 0 || hidden > MAX_HIDDEN {
            return Err(XaasError::InvalidModel(format!(
                "hidden width must be in 1..={MAX_HIDDEN}"
            )));
        }
        let o = outputs_for(num_classes);
        let mut rng = seeded(seed);
        let s1 = scale / (input_dim as f64).sqrt();
        let s2 = scale / (hidden as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * standard_normal(&mut rng)).collect()
        };
        let w1 = draw(hidden * input_dim, s1);
        let b1 = draw(hidden, 0.25);
        let w2 = draw(o * hidden, s2);
        let b2 = draw(o, 0.1);
        Ok(Self {
            model_id: model_id.into(),
            version: 1,
            kind: ModelKind::Mlp2,
            input_dim,
            num_classes,
            params: Arc::new(Params::Mlp2 {
                hidden,
                w1,
                b1,
                w2,
                b2,
            }),
        })
    }

    pub fn random_tree(
        model_id: &str,
        input_dim: usize,
        depth: u32,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        check_shape(input_dim, num_classes)?;
        if depth == 0 || depth > MAX_TREE_DEPTH {
            return Err(XaasError::InvalidModel(format!(
                "tree depth must be in 1..={MAX_TREE_DEPTH}"
            )));
        }
        let o = outputs_for(num_classes);
        let mut rng = seeded(seed);
        let internal = (1usize << depth) - 1;
        let features = (0..internal)
            .map(|_| rng.random_range(0..input_dim))
            .collect();
        let thresholds = (0..internal)
            .map(|_| (0.3 * standard_normal(&mut rng)).clamp(-0.8, 0.8))
            .collect();
        let leaves = (0..(1usize << depth) * o)
            .map(|_| 2.0 * standard_normal(&mut rng))
            .collect();
        Ok(Self {
            model_id: model_id.into(),
            version: 1,
            kind: ModelKind::Tree,
            input_dim,
            num_classes,
            params: Arc::new(Params::Tree {
                depth,
                features,
                thresholds,
                leaves,
            }),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Same parameters, explicit version. Used when restoring definitions.
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(XaasError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Raw output scores into `out`, returns the number of outputs.
    fn scores(&self, x: &[f64], out: &mut [f64; MAX_CLASSES]) -> usize {
        let d = self.input_dim;
        let o = outputs_for(self.num_classes);
        match &*self.params {
            Params::Linear { w, b } => {
                for k in 0..o {
                    let row = &w[k * d..(k + 1) * d];
                    out[k] = b[k] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                }
            }
            Params::Mlp2 {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                let h = *hidden;
                let mut act = [0.0f64; MAX_HIDDEN];
                for j in 0..h {
                    let row = &w1[j * d..(j + 1) * d];
                    act[j] =
                        tanh(b1[j] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
                }
                for k in 0..o {
                    let row = &w2[k * h..(k + 1) * h];
                    out[k] = b2[k] + row.iter().zip(&act[..h]).map(|(a, v)| a * v).sum::<f64>();
                }
            }
            Params::Tree {
                depth,
                features,
                thresholds,
                leaves,
            } => {
                let mut node = 0usize;
                for _ in 0..*depth {
                    node = if x[features[node]] <= thresholds[node] {
                        2 * node + 1
                    } else {
                        2 * node + 2
                    };
                }
                let leaf = node - ((1usize << depth) - 1);
                out[..o].copy_from_slice(&leaves[leaf * o..(leaf + 1) * o]);
            }
        }
        o
    }

    fn probs_into(&self, x: &[f64], probs: &mut [f64; MAX_CLASSES]) {
        let mut s = [0.0f64; MAX_CLASSES];
        let o = self.scores(x, &mut s);
        if o == 1 {
            let p1 = sigmoid(s[0]);
            probs[0] = 1.0 - p1;
            probs[1] = p1;
        } else {
            let m = s[..o].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..o {
                probs[k] = (s[k] - m).exp();
                z += probs[k];
            }
            for p in probs[..o].iter_mut() {
                *p /= z;
            }
        }
    }

    /// Class probabilities. Input dimension is checked.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut p = [0.0; MAX_CLASSES];
        self.probs_into(x, &mut p);
        Ok(p[..self.num_classes].to_vec())
    }

    /// Arg-max label (lowest class id wins ties) and its probability.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check_dim(x)?;
        let mut p = [0.0; MAX_CLASSES];
        self.probs_into(x, &mut p);
        let mut label = 0;
        for k in 1..self.num_classes {
            if p[k] > p[label] {
                label = k;
            }
        }
        Ok(Prediction {
            label,
            prob: p[label],
        })
    }

    /// Probability of `class`. Hot path for the samplers: the dimension is
    /// only checked in debug builds.
    pub fn class_prob(&self, x: &[f64], class: usize) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut p = [0.0; MAX_CLASSES];
        self.probs_into(x, &mut p);
        p[class]
    }

    /// Analytic gradient of the probability of `class` with respect to `x`.
    pub fn gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if class >= self.num_classes {
            return Err(XaasError::Precondition(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        let d = self.input_dim;
        let o = outputs_for(self.num_classes);
        let mut p = [0.0; MAX_CLASSES];
        self.probs_into(x, &mut p);
        // dp_class / ds_k for every output score.
        let mut dp_ds = [0.0f64; MAX_CLASSES];
        if o == 1 {
            let s = p[1] * (1.0 - p[1]);
            dp_ds[0] = if class == 1 { s } else { -s };
        } else {
            for k in 0..o {
                let delta = if k == class { 1.0 } else { 0.0 };
                dp_ds[k] = p[class] * (delta - p[k]);
            }
        }
        match &*self.params {
            Params::Linear { w, .. } => {
                let mut g = vec![0.0; d];
                for k in 0..o {
                    for (gi, wi) in g.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                        *gi += dp_ds[k] * wi;
                    }
                }
                Ok(g)
            }
            Params::Mlp2 {
                hidden,
                w1,
                b1,
                w2,
                ..
            } => {
                let h = *hidden;
                let mut g = vec![0.0; d];
                for j in 0..h {
                    let row = &w1[j * d..(j + 1) * d];
                    let a =
                        tanh(b1[j] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
                    let back: f64 = (0..o).map(|k| dp_ds[k] * w2[k * h + j]).sum::<f64>()
                        * (1.0 - a * a);
                    for (gi, wi) in g.iter_mut().zip(row) {
                        *gi += back * wi;
                    }
                }
                Ok(g)
            }
            Params::Tree { .. } => Err(XaasError::NotApplicable {
                method: "gradient".into(),
                kind: self.kind,
            }),
        }
    }

    /// Simulated retraining: every real-valued parameter receives additive
    /// seeded Gaussian noise of standard deviation `magnitude`. Tree split
    /// features are structural and kept. The version is bumped by one.
    pub fn update_model(&self, seed: u64, magnitude: f64) -> ModelHandle {
        let mut rng = seeded(seed);
        let mut jitter = |v: &mut Vec<f64>| {
            if magnitude > 0.0 {
                for x in v.iter_mut() {
                    *x += magnitude * standard_normal(&mut rng);
                }
            }
        };
        let mut params = (*self.params).clone();
        match &mut params {
            Params::Linear { w, b } => {
                jitter(w);
                jitter(b);
            }
            Params::Mlp2 { w1, b1, w2, b2, .. } => {
                jitter(w1);
                jitter(b1);
                jitter(w2);
                jitter(b2);
            }
            Params::Tree {
                thresholds, leaves, ..
            } => {
                jitter(thresholds);
                jitter(leaves);
            }
        }
        ModelHandle {
            model_id: self.model_id.clone(),
            version: self.version + 1,
            kind: self.kind,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            params: Arc::new(params),
        }
    }

    /// True when both handles carry bit-identical parameters.
    pub fn same_params(&self, other: &ModelHandle) -> bool {
        self.params == other.params
    }

    pub fn to_definition(&self) -> ModelDefinition {
        let params = match &*self.params {
            Params::Linear { w, b } => w.iter().chain(b).copied().collect(),
            Params::Mlp2 {
                w1, b1, w2, b2, ..
            } => w1.iter().chain(b1).chain(w2).chain(b2).copied().collect(),
            Params::Tree {
                features,
                thresholds,
                leaves,
                ..
            } => {
                let mut v = Vec::with_capacity(features.len() * 2 + leaves.len());
                for (f, t) in features.iter().zip(thresholds) {
                    v.push(*f as f64);
                    v.push(*t);
                }
                v.extend_from_slice(leaves);
                v
            }
        };
        ModelDefinition {
            model_id: self.model_id.to_string(),
            version: self.version,
            kind: self.kind,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            params,
        }
    }

    pub fn from_definition(def: &ModelDefinition) -> Result<Self> {
        check_shape(def.input_dim, def.num_classes)?;
        if let Some(i) = def.params.iter().position(|v| !v.is_finite()) {
            return Err(XaasError::InvalidModel(format!("parameter {i} is not finite")));
        }
        let d = def.input_dim;
        let o = outputs_for(def.num_classes);
        let n = def.params.len();
        let params = match def.kind {
            ModelKind::Linear => {
                if n != o * (d + 1) {
                    return Err(XaasError::InvalidModel(format!(
                        "linear model needs {} parameters, got {n}",
                        o * (d + 1)
                    )));
                }
                Params::Linear {
                    w: def.params[..o * d].to_vec(),
                    b: def.params[o * d..].to_vec(),
                }
            }
            ModelKind::Mlp2 => {
                let per_hidden = d + 1 + o;
                if n <= o || !(n - o).is_multiple_of(per_hidden) {
                    return Err(XaasError::InvalidModel(format!(
                        "mlp2 parameter count {n} does not match h*({per_hidden}) + {o}"
                    )));
                }
                let h = (n - o) / per_hidden;
                if h == 0 || h > MAX_HIDDEN {
                    return Err(XaasError::InvalidModel(format!("hidden width {h} out of range")));
                }
                let mut at = 0;
                let mut take = |len: usize| {
                    let s = def.params[at..at + len].to_vec();
                    at += len;
                    s
                };
                Params::Mlp2 {
                    hidden: h,
                    w1: take(h * d),
                    b1: take(h),
                    w2: take(o * h),
                    b2: take(o),
                }
            }
            ModelKind::Tree => {
                let depth = (1..=MAX_TREE_DEPTH)
                    .find(|dp| 2 * ((1usize << dp) - 1) + o * (1usize << dp) == n)
                    .ok_or_else(|| {
                        XaasError::InvalidModel(format!("tree parameter count {n} matches no depth"))
                    })?;
                let internal = (1usize << depth) - 1;
                let mut features = Vec::with_capacity(internal);
                let mut thresholds = Vec::with_capacity(internal);
                for i in 0..internal {
                    let f = def.params[2 * i];
                    if f < 0.0 || f.fract() != 0.0 || f as usize >= d {
                        return Err(XaasError::InvalidModel(format!(
                            "tree node {i} has invalid feature index {f}"
                        )));
                    }
                    features.push(f as usize);
                    thresholds.push(def.params[2 * i + 1]);
                }
                Params::Tree {
                    depth,
                    features,
                    thresholds,
                    leaves: def.params[2 * internal..].to_vec(),
                }
            }
        };
        Ok(Self {
            model_id: def.model_id.as_str().into(),
            version: def.version,
            kind: def.kind,
            input_dim: d,
            num_classes: def.num_classes,
            params: Arc::new(params),
        })
    }
}
