//! L2-regularized hinge-loss linear SVM trained by dual coordinate descent.
//!
//! The bias is folded in as an extra constant feature of value 1, so it is
//! regularized together with the weights. The dual problem is
//!
//! ```text
//! max_α  Σ α_i − ½ ‖Σ α_i y_i x̂_i‖²   subject to 0 ≤ α_i ≤ C_i
//! ```
//!
//! with `x̂ = [x, 1]`. Each sweep visits the coordinates in a fresh seeded
//! permutation and solves the one-dimensional subproblem exactly, so the
//! dual objective never decreases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"MSM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    #[default]
    None,
    /// `C_i = C · n / (2 · n_class(i))`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub standardize: bool,
    pub class_weighting: ClassWeighting,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-4,
            max_iter: 1000,
            seed: 42,
            standardize: false,
            class_weighting: ClassWeighting::None,
        }
    }
}

/// How raw features are mapped before the dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureScaling {
    None,
    Standardize { mean: Vec<f32>, std: Vec<f32> },
}

impl FeatureScaling {
    fn fit(x: &Matrix) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += f64::from(*v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (f64::from(*v) - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 { sd as f32 } else { 1.0 }
            })
            .collect();
        Self::Standardize { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Self::None => out.extend(x.iter().map(|&v| f64::from(v))),
            Self::Standardize { mean, std } => out.extend(
                x.iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((&v, &m), &s)| (f64::from(v) - f64::from(m)) / f64::from(s)),
            ),
        }
    }
}

/// Features with labels in `{-1 bona fide, +1 morph}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    x: Matrix,
    y: Vec<i8>,
}

impl TrainingSet {
    pub fn new(x: Matrix, y: Vec<i8>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!("{} feature rows for {} labels", x.rows(), y.len())));
        }
        if let Some(bad) = y.iter().find(|&&l| l != 1 && l != -1) {
            return Err(Error::Data(format!("label {bad} is not -1 or +1")));
        }
        if !x.is_finite() {
            return Err(Error::Data("training features contain NaN or infinity".into()));
        }
        Ok(Self { x, y })
    }

    /// Builds a set from raw rows, rejecting non-finite values.
    pub fn from_rows(rows: &[Vec<f32>], y: Vec<i8>) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("training features contain NaN or infinity".into()));
        }
        Self::new(Matrix::from_rows(rows)?, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[i8] {
        &self.y
    }
}

/// Trained linear decision function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    #[serde(skip)]
    pub w: Vec<f32>,
    #[serde(skip)]
    pub b: f32,
    pub params: SvmParams,
    pub iterations: usize,
    pub converged: bool,
    pub scaling: FeatureScaling,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `w · scale(x) + b`; larger means more morph-like.
    pub fn score(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::Shape(format!(
                "feature of dim {} scored by a model of dim {}",
                x.len(),
                self.w.len()
            )));
        }
        let mut buf = Vec::with_capacity(x.len());
        self.scaling.apply(x, &mut buf);
        Ok(dot_f32(&self.w, &buf) + f64::from(self.b))
    }

    pub fn predict(&self, x: &[f32]) -> Result<i8> {
        Ok(if self.score(x)? >= 0.0 { 1 } else { -1 })
    }
}

fn dot_f32(w: &[f32], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| f64::from(a) * b).sum()
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Per-sweep record of the solver.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    /// Dual objective after each sweep.
    pub dual_objective: Vec<f64>,
    /// Largest projected-gradient magnitude seen in each sweep.
    pub max_violation: Vec<f64>,
    pub alpha: Vec<f64>,
    pub upper_bounds: Vec<f64>,
}

struct Prepared {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    upper: Vec<f64>,
    scaling: FeatureScaling,
}

fn prepare(data: &TrainingSet, params: &SvmParams) -> Result<Prepared> {
    let n_pos = data.y.iter().filter(|&&l| l == 1).count();
    let n_neg = data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Training("training data must contain both classes".into()));
    }
    if !(params.c.is_finite() && params.c > 0.0) {
        return Err(Error::Argument(format!("C must be positive, got {}", params.c)));
    }
    let scaling = if params.standardize { FeatureScaling::fit(&data.x) } else { FeatureScaling::None };
    let mut rows = Vec::with_capacity(data.len());
    let mut buf = Vec::new();
    for r in 0..data.len() {
        scaling.apply(data.x.row(r), &mut buf);
        let mut row = buf.clone();
        row.push(1.0);
        rows.push(row);
    }
    let n = data.len() as f64;
    let upper = data
        .y
        .iter()
        .map(|&l| match params.class_weighting {
            ClassWeighting::None => params.c,
            ClassWeighting::Balanced => {
                let count = if l == 1 { n_pos } else { n_neg } as f64;
                params.c * n / (2.0 * count)
            }
        })
        .collect();
    Ok(Prepared { rows, y: data.y.iter().map(|&l| f64::from(l)).collect(), upper, scaling })
}

fn projected_gradient(g: f64, alpha: f64, upper: f64) -> f64 {
    if alpha <= 0.0 {
        g.min(0.0)
    } else if alpha >= upper {
        g.max(0.0)
    } else {
        g
    }
}

fn dual_objective(alpha: &[f64], w: &[f64]) -> f64 {
    alpha.iter().sum::<f64>() - 0.5 * dot(w, w)
}

/// Trains and also returns the per-sweep solver trace.
pub fn train_traced(data: &TrainingSet, params: &SvmParams) -> Result<(LinearModel, SolverTrace)> {
    let prep = prepare(data, params)?;
    let n = prep.rows.len();
    let dim = data.dim() + 1;
    let diag: Vec<f64> = prep.rows.iter().map(|r| dot(r, r)).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; dim];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trace = SolverTrace::default();
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < params.max_iter {
        order.shuffle(&mut rng);
        let mut max_pg = 0.0f64;
        for &i in &order {
            let row = &prep.rows[i];
            let yi = prep.y[i];
            let g = yi * dot(&w, row) - 1.0;
            let pg = projected_gradient(g, alpha[i], prep.upper[i]);
            max_pg = max_pg.max(pg.abs());
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / diag[i]).clamp(0.0, prep.upper[i]);
                let delta = (alpha[i] - old) * yi;
                for (wj, xj) in w.iter_mut().zip(row) {
                    *wj += delta * xj;
                }
            }
        }
        sweeps += 1;
        trace.dual_objective.push(dual_objective(&alpha, &w));
        trace.max_violation.push(max_pg);
        if max_pg <= params.tol {
            converged = true;
            break;
        }
    }

    let b = w.pop().unwrap_or(0.0);
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numeric("SVM weights diverged".into()));
    }
    trace.alpha = alpha;
    trace.upper_bounds = prep.upper;
    let model = LinearModel {
        w: w.iter().map(|&v| v as f32).collect(),
        b: b as f32,
        params: params.clone(),
        iterations: sweeps,
        converged,
        scaling: prep.scaling,
    };
    Ok((model, trace))
}

pub fn train(data: &TrainingSet, params: &SvmParams) -> Result<LinearModel> {
    train_traced(data, params).map(|(m, _)| m)
}

/// Largest KKT violation of `alpha` for the dual problem of `data`.
pub fn kkt_residual(data: &TrainingSet, params: &SvmParams, alpha: &[f64]) -> Result<f64> {
    let prep = prepare(data, params)?;
    let mut w = vec![0.0f64; data.dim() + 1];
    for ((row, &a), &y) in prep.rows.iter().zip(alpha).zip(&prep.y) {
        for (wj, xj) in w.iter_mut().zip(row) {
            *wj += a * y * xj;
        }
    }
    Ok(prep
        .rows
        .iter()
        .zip(&prep.y)
        .zip(alpha.iter().zip(&prep.upper))
        .map(|((row, &y), (&a, &u))| projected_gradient(y * dot(&w, row) - 1.0, a, u).abs())
        .fold(0.0, f64::max))
}

/// Regularized hinge-loss primal objective `½‖[w, b]‖² + Σ C_i max(0, 1 − y_i f(x_i))`.
pub fn primal_objective(model: &LinearModel, data: &TrainingSet) -> Result<f64> {
    let prep = prepare(data, &model.params)?;
    let mut obj = 0.5
        * (model.w.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() + f64::from(model.b).powi(2));
    for r in 0..data.len() {
        let s = model.score(data.x.row(r))?;
        obj += prep.upper[r] * (1.0 - prep.y[r] * s).max(0.0);
    }
    Ok(obj)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    #[serde(flatten)]
    model: LinearModel,
}

impl LinearModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&ModelHeader { dim: self.w.len(), model: self.clone() })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * (self.w.len() + 1));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.w {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.b.to_le_bytes());
        Ok(out)
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let corrupt = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Corruption("truncated model file".into()),
            _ => Error::Io(e),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad magic, expected \"MSM1\"".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(corrupt)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::Corruption(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(corrupt)?;
        let header: ModelHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("bad model header: {e}")))?;
        let mut bytes = vec![0u8; 4 * (header.dim + 1)];
        r.read_exact(&mut bytes).map_err(corrupt)?;
        let mut vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let b = vals.pop().unwrap_or(0.0);
        if vals.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Data("model has non-finite weights".into()));
        }
        let mut model = header.model;
        model.w = vals;
        model.b = b;
        if let FeatureScaling::Standardize { mean, std } = &model.scaling {
            if mean.len() != model.w.len() || std.len() != model.w.len() {
                return Err(Error::Format("scaling record does not match model dim".into()));
            }
        }
        Ok(model)
    }
}

pub fn save_model(model: &LinearModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&model.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LinearModel> {
    LinearModel::from_reader(&mut BufReader::new(File::open(path)?))
}
