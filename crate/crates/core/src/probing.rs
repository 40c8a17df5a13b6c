//! Classification heads over frozen face-encoder embeddings.
//!
//! Heads are one-vs-rest machines trained on the L2-regularized, weighted
//! squared hinge loss
//!
//! ```text
//! ½‖w‖² + C Σ_i s_i max(0, 1 − y_i f(x_i))²
//! ```
//!
//! with the bias folded into the weights through a constant feature (linear)
//! or a constant kernel offset (RBF), so it is regularized like the other
//! coordinates. The linear head is optimized in the primal with nonlinear
//! conjugate gradients; the RBF head uses the kernel expansion
//! f = Σ_j β_j (k(x_j, ·) + 1) with the Gram-preconditioned gradient. Every
//! step is accepted only after an Armijo line search, so the objective never
//! increases.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SampleRow, SampleTable};

pub const DEFAULT_REGULARIZATION: f64 = 1.0;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Largest training set accepted by the RBF head (full Gram matrix).
pub const DEFAULT_KERNEL_CAP: usize = 50_000;

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("embedding set must have at least one row and one column")]
    EmptyEmbeddings,
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("got {actual} labels for {expected} rows")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for K={k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("embedding entries have zero variance")]
    ZeroVariance,
    #[error("classes {0:?} have no samples")]
    EmptyClass(Vec<usize>),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("rbf head limited to {cap} training rows, got {rows}")]
    KernelTooLarge { rows: usize, cap: usize },
    #[error("regularization must be positive, got {0}")]
    InvalidRegularization(f64),
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("reference set is empty")]
    EmptyReference,
    #[error("k = {k} not in [1, {n}]")]
    InvalidNeighbors { k: usize, n: usize },
    #[error("table has no rows")]
    EmptyTable,
    #[error("row {row} ({image_id}) has no predicted segment")]
    MissingPrediction { row: usize, image_id: String },
    #[error("support index {index} out of range for {rows} training rows")]
    SupportOutOfRange { index: usize, rows: usize },
    #[error("head document is malformed: {0}")]
    MalformedHead(String),
}

/// I×D matrix of encoder outputs keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    image_ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(image_ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self, ProbeError> {
        if image_ids.is_empty() || dim == 0 {
            return Err(ProbeError::EmptyEmbeddings);
        }
        if data.len() != image_ids.len() * dim {
            return Err(ProbeError::DimensionMismatch { expected: image_ids.len() * dim, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFiniteValue { row: pos / dim, col: pos % dim });
        }
        let mut seen = HashSet::with_capacity(image_ids.len());
        for id in &image_ids {
            if !seen.insert(id.as_str()) {
                return Err(ProbeError::DuplicateImageId(id.clone()));
            }
        }
        Ok(Self { image_ids, dim, data })
    }

    pub fn from_rows(image_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, ProbeError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(ProbeError::DimensionMismatch { expected: dim, actual: bad.len() });
        }
        Self::new(image_ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { image_ids: self.image_ids.clone(), dim: self.dim, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, ProbeError> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(ProbeError::SupportOutOfRange { index: i, rows: self.len() });
            }
            ids.push(self.image_ids[i].clone());
            data.extend_from_slice(self.row(i));
        }
        Self::new(ids, self.dim, data)
    }
}

/// 1/(D · Var(X)) with the variance pooled over all I·D entries.
pub fn rbf_gamma(x: &EmbeddingSet) -> Result<f64, ProbeError> {
    let n = x.data.len();
    if n < 2 {
        return Err(ProbeError::ZeroVariance);
    }
    let mean = x.data.iter().sum::<f64>() / n as f64;
    let var = x.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(ProbeError::ZeroVariance);
    }
    Ok(1.0 / (x.dim as f64 * var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// True when K > 2 and the binary rule was extended as (1/K)/freq.
    pub generalized: bool,
}

/// 0.5/freq per class for binary labels, (1/K)/freq otherwise.
pub fn balanced_class_weights(labels: &[usize], k: usize) -> Result<ClassWeights, ProbeError> {
    let counts = class_counts(labels, k)?;
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        return Err(ProbeError::EmptyClass(empty));
    }
    let n = labels.len() as f64;
    let share = 1.0 / k as f64;
    Ok(ClassWeights {
        weights: counts.iter().map(|&c| share / (c as f64 / n)).collect(),
        generalized: k > 2,
    })
}

fn class_counts(labels: &[usize], k: usize) -> Result<Vec<usize>, ProbeError> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(ProbeError::LabelOutOfRange { label: l, k });
        }
        counts[l] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Rbf,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "rbf" => Ok(HeadKind::Rbf),
            other => Err(format!("unknown head kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub kind: HeadKind,
    pub class_weights: Option<Vec<f64>>,
    pub regularization: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub kernel_cap: usize,
    /// Overrides the data-derived RBF gamma.
    pub gamma: Option<f64>,
}

impl TrainOptions {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            class_weights: None,
            regularization: DEFAULT_REGULARIZATION,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            kernel_cap: DEFAULT_KERNEL_CAP,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Objective value at the start of every iteration plus the final value.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// One one-vs-rest machine: primal weights (linear) or dual coefficients
/// aligned with the support set (RBF). The bias is stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub coefficients: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    /// Row positions in the training embedding set.
    pub indices: Vec<usize>,
    pub vectors: EmbeddingSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmHead {
    pub kind: HeadKind,
    pub dim: usize,
    pub regularization: f64,
    pub class_weights: Vec<f64>,
    pub gamma: Option<f64>,
    pub machines: Vec<Machine>,
    pub support: Option<SupportSet>,
    pub diagnostics: Vec<MachineDiagnostics>,
}

impl SvmHead {
    /// Linear head from explicit per-class weights and biases.
    pub fn linear(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self, ProbeError> {
        let dim = weights.first().map_or(0, Vec::len);
        if weights.len() < 2 || dim == 0 {
            return Err(ProbeError::SingleClass);
        }
        if weights.len() != biases.len() {
            return Err(ProbeError::LengthMismatch { expected: weights.len(), actual: biases.len() });
        }
        if let Some(w) = weights.iter().find(|w| w.len() != dim) {
            return Err(ProbeError::DimensionMismatch { expected: dim, actual: w.len() });
        }
        let k = weights.len();
        Ok(Self {
            kind: HeadKind::Linear,
            dim,
            regularization: DEFAULT_REGULARIZATION,
            class_weights: vec![1.0; k],
            gamma: None,
            machines: weights
                .into_iter()
                .zip(biases)
                .map(|(coefficients, bias)| Machine { coefficients, bias })
                .collect(),
            support: None,
            diagnostics: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.machines.len()
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.iter().all(|d| d.converged)
    }

    /// Per-class decision values for one embedding.
    pub fn decision_values(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            HeadKind::Linear => self
                .machines
                .iter()
                .map(|m| dot(&m.coefficients, x) + m.bias)
                .collect(),
            HeadKind::Rbf => {
                let support = self.support.as_ref().expect("rbf head carries support vectors");
                let gamma = self.gamma.expect("rbf head carries gamma");
                let kx: Vec<f64> = (0..support.vectors.len())
                    .map(|j| rbf(gamma, support.vectors.row(j), x))
                    .collect();
                self.machines.iter().map(|m| dot(&m.coefficients, &kx) + m.bias).collect()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Weighted squared-hinge loss `C Σ s_i max(0, 1 − y_i (z_i + t q_i))²` and
/// its first two derivatives in `t` along a search direction.
struct Margins<'a> {
    y: &'a [f64],
    s: &'a [f64],
    c: f64,
}

impl Margins<'_> {
    fn loss(&self, z: &[f64], q: &[f64], t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..z.len() {
            let slack = 1.0 - self.y[i] * (z[i] + t * q[i]);
            if slack > 0.0 {
                acc += self.s[i] * slack * slack;
            }
        }
        self.c * acc
    }

    /// Per-sample loss gradient with respect to z: −2C s_i y_i max(0, 1 − y_i z_i).
    fn dz(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let slack = 1.0 - self.y[i] * zi;
                if slack > 0.0 {
                    -2.0 * self.c * self.s[i] * self.y[i] * slack
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn curvature(&self, z: &[f64], q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..z.len() {
            if 1.0 - self.y[i] * z[i] > 0.0 {
                acc += self.s[i] * q[i] * q[i];
            }
        }
        2.0 * self.c * acc
    }
}

/// φ(t) = reg0 + t·reg1 + ½t²·reg2 + loss(z + t q). Starts from the
/// generalized Newton step and backtracks until the Armijo condition holds
/// relative to `current`, the recorded objective at t = 0.
/// Returns `None` when no decreasing step is found.
fn line_search(
    margins: &Margins,
    z: &[f64],
    q: &[f64],
    reg: (f64, f64, f64),
    slope: f64,
    current: f64,
) -> Option<(f64, f64)> {
    if slope >= 0.0 {
        return None;
    }
    let (r0, r1, r2) = reg;
    let phi = |t: f64| r0 + t * r1 + 0.5 * t * t * r2 + margins.loss(z, q, t);
    let curvature = r2 + margins.curvature(z, q);
    let mut t = if curvature > 0.0 { -slope / curvature } else { 1.0 };
    for _ in 0..MAX_BACKTRACK {
        let value = phi(t);
        if value <= current + ARMIJO_C * t * slope {
            return Some((t, value));
        }
        t *= 0.5;
    }
    None
}

struct Fit {
    coefficients: Vec<f64>,
    diagnostics: MachineDiagnostics,
}

fn converged(old: f64, new: f64, tol: f64) -> bool {
    (old - new).abs() <= tol * old.abs().max(f64::MIN_POSITIVE)
}

/// Primal linear machine over features augmented with a constant 1.
fn fit_linear(x: &EmbeddingSet, margins: &Margins, opts: &TrainOptions) -> Fit {
    let n = x.len();
    let d = x.dim() + 1;
    let feature = |i: usize, j: usize| if j + 1 == d { 1.0 } else { x.row(i)[j] };
    let project = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| dot(&v[..d - 1], x.row(i)) + v[d - 1])
            .collect()
    };
    let gradient = |w: &[f64], z: &[f64]| -> Vec<f64> {
        let dz = margins.dz(z);
        let mut g = w.to_vec();
        for (i, &dzi) in dz.iter().enumerate() {
            if dzi != 0.0 {
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj += dzi * feature(i, j);
                }
            }
        }
        g
    };

    let mut w = vec![0.0; d];
    let mut z = vec![0.0; n];
    let mut objective = margins.loss(&z, &z, 0.0);
    let mut history = vec![objective];
    let mut g = gradient(&w, &z);
    let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut iterations = 0;
    let mut done = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        if slope == 0.0 {
            done = true;
            break;
        }
        let q = project(&dir);
        let reg = (0.5 * dot(&w, &w), dot(&w, &dir), dot(&dir, &dir));
        let Some((t, value)) = line_search(margins, &z, &q, reg, slope, objective) else {
            done = true;
            break;
        };
        for j in 0..d {
            w[j] += t * dir[j];
        }
        for i in 0..n {
            z[i] += t * q[i];
        }
        let old = objective;
        objective = value;
        history.push(value);
        let g_new = gradient(&w, &z);
        // Polak–Ribière with automatic restart.
        let denom = dot(&g, &g);
        let beta = if denom > 0.0 {
            (g_new.iter().zip(&g).map(|(a, b)| a * (a - b)).sum::<f64>() / denom).max(0.0)
        } else {
            0.0
        };
        dir = g_new.iter().zip(&dir).map(|(gn, dv)| -gn + beta * dv).collect();
        g = g_new;
        if converged(old, value, opts.tol) {
            done = true;
            break;
        }
    }
    Fit { coefficients: w, diagnostics: MachineDiagnostics { iterations, converged: done, objective, history } }
}

/// Symmetric Gram matrix `k(x_i, x_j) + 1`, row-major.
fn gram(x: &EmbeddingSet, gamma: f64) -> Vec<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| rbf(gamma, x.row(i), x.row(j)) + 1.0).collect())
        .collect();
    rows.concat()
}

fn gram_matvec(k: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    k.par_chunks(n).map(|row| dot(row, v)).collect()
}

/// Kernel machine over the offset Gram matrix, descending along the
/// preconditioned gradient −(β + ∂L/∂z).
fn fit_kernel(gram: &[f64], margins: &Margins, opts: &TrainOptions) -> Fit {
    let n = margins.y.len();
    let mut beta = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut objective = margins.loss(&z, &z, 0.0);
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut done = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let dz = margins.dz(&z);
        let dir: Vec<f64> = beta.iter().zip(&dz).map(|(b, g)| -(b + g)).collect();
        let q = gram_matvec(gram, &dir);
        // Gradient in β is K(β + dz) = −q, so the slope along dir is −dirᵀq.
        let slope = -dot(&dir, &q);
        if slope >= 0.0 {
            done = true;
            break;
        }
        // βᵀKβ = βᵀz and dirᵀKβ = qᵀβ since K is symmetric.
        let reg = (0.5 * dot(&beta, &z), dot(&q, &beta), dot(&dir, &q));
        let Some((t, value)) = line_search(margins, &z, &q, reg, slope, objective) else {
            done = true;
            break;
        };
        for i in 0..n {
            beta[i] += t * dir[i];
            z[i] += t * q[i];
        }
        let old = objective;
        objective = value;
        history.push(value);
        if converged(old, value, opts.tol) {
            done = true;
            break;
        }
    }
    Fit { coefficients: beta, diagnostics: MachineDiagnostics { iterations, converged: done, objective, history } }
}

/// Trains one one-vs-rest machine per segment.
pub fn train_head(x: &EmbeddingSet, labels: &[usize], k: usize, opts: &TrainOptions) -> Result<SvmHead, ProbeError> {
    if labels.len() != x.len() {
        return Err(ProbeError::LengthMismatch { expected: x.len(), actual: labels.len() });
    }
    if opts.regularization.is_nan() || opts.regularization <= 0.0 {
        return Err(ProbeError::InvalidRegularization(opts.regularization));
    }
    let counts = class_counts(labels, k)?;
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let class_weights = match &opts.class_weights {
        Some(w) if w.len() != k => return Err(ProbeError::LengthMismatch { expected: k, actual: w.len() }),
        Some(w) => w.clone(),
        None => vec![1.0; k],
    };
    let sample_weights: Vec<f64> = labels.iter().map(|&l| class_weights[l]).collect();
    let targets: Vec<Vec<f64>> = (0..k)
        .map(|c| labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect())
        .collect();

    match opts.kind {
        HeadKind::Linear => {
            let mut machines = Vec::with_capacity(k);
            let mut diagnostics = Vec::with_capacity(k);
            for y in &targets {
                let margins = Margins { y, s: &sample_weights, c: opts.regularization };
                let mut fit = fit_linear(x, &margins, opts);
                let bias = fit.coefficients.pop().expect("augmented weight");
                machines.push(Machine { coefficients: fit.coefficients, bias });
                diagnostics.push(fit.diagnostics);
            }
            Ok(SvmHead {
                kind: HeadKind::Linear,
                dim: x.dim(),
                regularization: opts.regularization,
                class_weights,
                gamma: None,
                machines,
                support: None,
                diagnostics,
            })
        }
        HeadKind::Rbf => {
            if x.len() > opts.kernel_cap {
                return Err(ProbeError::KernelTooLarge { rows: x.len(), cap: opts.kernel_cap });
            }
            let gamma = match opts.gamma {
                Some(g) if g.is_nan() || g <= 0.0 => return Err(ProbeError::InvalidGamma(g)),
                Some(g) => g,
                None => rbf_gamma(x)?,
            };
            let gram = gram(x, gamma);
            let mut fits = Vec::with_capacity(k);
            for y in &targets {
                let margins = Margins { y, s: &sample_weights, c: opts.regularization };
                fits.push(fit_kernel(&gram, &margins, opts));
            }
            let indices: Vec<usize> = (0..x.len())
                .filter(|&j| fits.iter().any(|f| f.coefficients[j] != 0.0))
                .collect();
            let vectors = x.select(&indices)?;
            let mut machines = Vec::with_capacity(k);
            let mut diagnostics = Vec::with_capacity(k);
            for fit in fits {
                let coefficients: Vec<f64> = indices.iter().map(|&j| fit.coefficients[j]).collect();
                let bias = coefficients.iter().sum();
                machines.push(Machine { coefficients, bias });
                diagnostics.push(fit.diagnostics);
            }
            Ok(SvmHead {
                kind: HeadKind::Rbf,
                dim: x.dim(),
                regularization: opts.regularization,
                class_weights,
                gamma: Some(gamma),
                machines,
                support: Some(SupportSet { indices, vectors }),
                diagnostics,
            })
        }
    }
}

/// Weighted squared-hinge objective of one machine on its training data,
/// recomputed from the stored head.
pub fn training_objective(head: &SvmHead, x: &EmbeddingSet, labels: &[usize], class: usize) -> f64 {
    let machine = &head.machines[class];
    let reg = match head.kind {
        HeadKind::Linear => 0.5 * (dot(&machine.coefficients, &machine.coefficients) + machine.bias * machine.bias),
        HeadKind::Rbf => {
            let support = head.support.as_ref().expect("rbf support");
            let gamma = head.gamma.expect("rbf gamma");
            let n = support.vectors.len();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let kij = rbf(gamma, support.vectors.row(i), support.vectors.row(j)) + 1.0;
                    acc += machine.coefficients[i] * kij * machine.coefficients[j];
                }
            }
            0.5 * acc
        }
    };
    let loss: f64 = (0..x.len())
        .map(|i| {
            let y = if labels[i] == class { 1.0 } else { -1.0 };
            let f = head.decision_values(x.row(i))[class];
            let slack = (1.0 - y * f).max(0.0);
            head.class_weights[labels[i]] * slack * slack
        })
        .sum();
    reg + head.regularization * loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub image_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub decision_values: Vec<Vec<f64>>,
    pub ties: usize,
}

impl Predictions {
    /// Table with predicted segments; identity ids default to the image id.
    pub fn to_table(&self, k: usize, identity_of: impl Fn(&str) -> Option<String>) -> SampleTable {
        let rows = self
            .image_ids
            .iter()
            .zip(&self.labels)
            .map(|(id, &label)| SampleRow {
                image_id: id.clone(),
                identity_id: identity_of(id).unwrap_or_else(|| id.clone()),
                true_segment: None,
                predicted_segment: Some(label),
            })
            .collect();
        SampleTable::new(rows, k).expect("ids unique and labels in range")
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tied = false;
        } else if v == values[best] {
            tied = true;
        }
    }
    (best, tied)
}

pub fn predict(head: &SvmHead, x: &EmbeddingSet) -> Result<Predictions, ProbeError> {
    if x.dim() != head.dim {
        return Err(ProbeError::DimensionMismatch { expected: head.dim, actual: x.dim() });
    }
    let decision_values: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| head.decision_values(x.row(i)))
        .collect();
    let mut labels = Vec::with_capacity(x.len());
    let mut ties = 0;
    for d in &decision_values {
        let (label, tied) = argmax(d);
        labels.push(label);
        ties += tied as usize;
    }
    Ok(Predictions { image_ids: x.image_ids.clone(), labels, decision_values, ties })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnLabels {
    pub labels: Vec<usize>,
    pub ties: usize,
}

/// Majority label among the k nearest references (Euclidean). Distance ties
/// are ordered by reference position, vote ties go to the lowest segment.
pub fn knn_label(
    query: &EmbeddingSet,
    reference: &EmbeddingSet,
    reference_labels: &[usize],
    k: usize,
    segments: usize,
) -> Result<KnnLabels, ProbeError> {
    if reference.is_empty() {
        return Err(ProbeError::EmptyReference);
    }
    if reference_labels.len() != reference.len() {
        return Err(ProbeError::LengthMismatch { expected: reference.len(), actual: reference_labels.len() });
    }
    if k == 0 || k > reference.len() {
        return Err(ProbeError::InvalidNeighbors { k, n: reference.len() });
    }
    if query.dim() != reference.dim() {
        return Err(ProbeError::DimensionMismatch { expected: reference.dim(), actual: query.dim() });
    }
    class_counts(reference_labels, segments)?;
    let results: Vec<(usize, bool)> = (0..query.len())
        .into_par_iter()
        .map(|qi| {
            let q = query.row(qi);
            let mut order: Vec<(f64, usize)> =
                (0..reference.len()).map(|j| (sq_dist(q, reference.row(j)), j)).collect();
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0; segments];
            for &(_, j) in &order[..k] {
                votes[reference_labels[j]] += 1.0;
            }
            argmax(&votes)
        })
        .collect();
    Ok(KnnLabels {
        ties: results.iter().filter(|r| r.1).count(),
        labels: results.into_iter().map(|r| r.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityVote {
    pub identity_id: String,
    pub label: usize,
    pub fraction: f64,
    pub tie: bool,
}

/// Most frequent predicted segment per identity, ordered by identity id.
pub fn majority_vote_identity(table: &SampleTable) -> Result<Vec<IdentityVote>, ProbeError> {
    if table.is_empty() {
        return Err(ProbeError::EmptyTable);
    }
    let k = table.k();
    let mut by_id: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (row, r) in table.rows().iter().enumerate() {
        let pred = r.predicted_segment.ok_or_else(|| ProbeError::MissingPrediction {
            row,
            image_id: r.image_id.clone(),
        })?;
        by_id.entry(r.identity_id.as_str()).or_insert_with(|| vec![0.0; k])[pred] += 1.0;
    }
    Ok(by_id
        .into_iter()
        .map(|(id, counts)| {
            let (label, tie) = argmax(&counts);
            let total: f64 = counts.iter().sum();
            IdentityVote { identity_id: id.to_string(), label, fraction: counts[label] / total, tie }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(ids(rows.len()), rows).unwrap()
    }

    #[test]
    fn embedding_validation() {
        assert_eq!(EmbeddingSet::new(vec![], 2, vec![]), Err(ProbeError::EmptyEmbeddings));
        assert_eq!(
            EmbeddingSet::new(ids(2), 2, vec![0.0, 1.0, f64::NAN, 0.0]),
            Err(ProbeError::NonFiniteValue { row: 1, col: 0 })
        );
        assert!(matches!(
            EmbeddingSet::new(vec!["a".into(), "a".into()], 1, vec![0.0, 1.0]),
            Err(ProbeError::DuplicateImageId(_))
        ));
    }

    #[test]
    fn gamma_examples() {
        // Entries ±1 with mean 0: pooled variance exactly 1.
        let data: Vec<f64> = (0..2 * 512).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = EmbeddingSet::new(ids(2), 512, data).unwrap();
        assert_eq!(rbf_gamma(&x).unwrap(), 1.0 / 512.0);
        let c = set(&[vec![3.0, 3.0], vec![3.0, 3.0]]);
        assert_eq!(rbf_gamma(&c), Err(ProbeError::ZeroVariance));
        let x = set(&[vec![1.0, 2.0], vec![-0.5, 4.0]]);
        let g = rbf_gamma(&x).unwrap();
        let g2 = rbf_gamma(&x.scaled(2.0)).unwrap();
        assert!((g2 - g / 4.0).abs() <= 1e-15 * g);
    }

    #[test]
    fn class_weight_examples() {
        let w = balanced_class_weights(&[0, 0, 0, 1], 2).unwrap();
        assert!((w.weights[0] - 2.0 / 3.0).abs() < 1e-15 && w.weights[1] == 2.0);
        assert!(!w.generalized);
        assert_eq!(balanced_class_weights(&[0, 1, 1, 0], 2).unwrap().weights, vec![1.0, 1.0]);
        let w = balanced_class_weights(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(w.weights, vec![1.0; 4]);
        assert!(w.generalized);
        assert_eq!(balanced_class_weights(&[0, 0], 2), Err(ProbeError::EmptyClass(vec![1])));
    }

    #[test]
    fn single_class_rejected() {
        let x = set(&[vec![0.0], vec![1.0]]);
        assert_eq!(
            train_head(&x, &[1, 1], 2, &TrainOptions::new(HeadKind::Linear)),
            Err(ProbeError::SingleClass)
        );
    }

    #[test]
    fn kernel_cap_enforced() {
        let x = set(&[vec![0.0], vec![1.0], vec![2.0]]);
        let mut opts = TrainOptions::new(HeadKind::Rbf);
        opts.kernel_cap = 2;
        assert_eq!(
            train_head(&x, &[0, 1, 0], 2, &opts),
            Err(ProbeError::KernelTooLarge { rows: 3, cap: 2 })
        );
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let head = SvmHead::linear(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let pred = predict(&head, &set(&[vec![0.0, 5.0]])).unwrap();
        assert_eq!(pred.labels, vec![0]);
        assert_eq!(pred.ties, 1);
        let pred = predict(&head, &set(&[vec![-1.0, 0.0]])).unwrap();
        assert_eq!((pred.labels[0], pred.ties), (1, 0));
    }

    #[test]
    fn predict_dimension_mismatch() {
        let head = SvmHead::linear(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            predict(&head, &set(&[vec![0.0, 5.0, 1.0]])),
            Err(ProbeError::DimensionMismatch { expected: 2, actual: 3 })
        );
    }

    #[test]
    fn knn_examples() {
        let reference = set(&[vec![1.0], vec![2.0], vec![3.0]]);
        let labels = [0, 1, 1];
        let q = set(&[vec![0.0]]);
        assert_eq!(knn_label(&q, &reference, &labels, 3, 2).unwrap().labels, vec![1]);
        assert_eq!(knn_label(&q, &reference, &labels, 1, 2).unwrap().labels, vec![0]);
        let exact = knn_label(&reference, &reference, &labels, 1, 2).unwrap();
        assert_eq!(exact.labels, labels.to_vec());
        // k = 2 from 1.5: equidistant references 0 and 1, one vote each.
        let tie = knn_label(&set(&[vec![1.5]]), &reference, &labels, 2, 2).unwrap();
        assert_eq!((tie.labels[0], tie.ties), (0, 1));
        assert!(matches!(knn_label(&q, &reference, &labels, 4, 2), Err(ProbeError::InvalidNeighbors { .. })));
    }

    fn pred_table(groups: &[&[usize]]) -> SampleTable {
        let mut rows = Vec::new();
        for (id, preds) in groups.iter().enumerate() {
            for &p in preds.iter() {
                rows.push(SampleRow {
                    image_id: format!("img{}", rows.len()),
                    identity_id: format!("id{id}"),
                    true_segment: None,
                    predicted_segment: Some(p),
                });
            }
        }
        SampleTable::new(rows, 2).unwrap()
    }

    #[test]
    fn majority_vote_examples() {
        let v = majority_vote_identity(&pred_table(&[&[0, 0, 1], &[0, 1], &[1]])).unwrap();
        assert_eq!((v[0].label, v[0].tie), (0, false));
        assert!((v[0].fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((v[1].label, v[1].fraction, v[1].tie), (0, 0.5, true));
        assert_eq!((v[2].label, v[2].fraction, v[2].tie), (1, 1.0, false));
        assert_eq!(majority_vote_identity(&pred_table(&[])), Err(ProbeError::EmptyTable));
    }
}
