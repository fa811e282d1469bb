//! Exact t-SNE for looking at feature spaces.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const PERPLEXITY_TOL: f64 = 1e-4;
const BISECTION_STEPS: usize = 200;

/// Symmetric joint probabilities, row-major `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    pub perplexity: f64,
    pub p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

fn to_rows(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|r| x.row(r).iter().map(|&v| f64::from(v)).collect()).collect()
}

fn squared_distances(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Gaussian conditional `P(·|i)` for precision `beta`; returns the row and
/// its perplexity `exp(H)`.
fn conditional_row(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-(d - min) * beta).exp() })
        .collect();
    let z: f64 = row.iter().sum();
    let mut h = 0.0;
    for v in &mut row {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (row, h.exp())
}

/// Conditional distributions `P(j|i)` calibrated to `perplexity`.
pub fn conditional_affinities(x: &Matrix, perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.rows();
    if n < 3 {
        return Err(Error::Argument(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(Error::Argument(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    let dist = squared_distances(&to_rows(x));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row_dist = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let (mut best, mut perp) = conditional_row(row_dist, i, beta);
        for _ in 0..BISECTION_STEPS {
            if (perp - perplexity).abs() <= PERPLEXITY_TOL {
                break;
            }
            // Larger beta means a narrower kernel and lower perplexity.
            if perp > perplexity {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            (best, perp) = conditional_row(row_dist, i, beta);
        }
        out.push(best);
    }
    Ok(out)
}

pub fn pairwise_affinities(x: &Matrix, perplexity: f64) -> Result<AffinityMatrix> {
    let cond = conditional_affinities(x, perplexity)?;
    let n = cond.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i][j] + cond[j][i]) / (2.0 * n as f64);
        }
    }
    Ok(AffinityMatrix { n, perplexity, p })
}

/// `2^H` of a distribution, with `H` in bits.
pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    2f64.powf(h)
}

fn student_kernel(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..dims).map(|k| (y[i * dims + k] - y[j * dims + k]).powi(2)).sum();
            let v = 1.0 / (1.0 + d2);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

/// `KL(P‖Q)` for a layout `y` (row-major, `n × dims`).
pub fn kl_divergence(p: &AffinityMatrix, y: &[f64], dims: usize) -> f64 {
    let n = p.n;
    let (num, z) = student_kernel(y, n, dims);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i != j && pij > 0.0 {
                kl += pij * (pij / (num[i * n + j] / z).max(f64::MIN_POSITIVE)).ln();
            }
        }
    }
    kl
}

/// Analytic gradient of [`kl_divergence`], with `P` scaled by `exaggeration`.
pub fn kl_gradient(p: &AffinityMatrix, y: &[f64], dims: usize, exaggeration: f64) -> Vec<f64> {
    let n = p.n;
    let (num, z) = student_kernel(y, n, dims);
    let mut grad = vec![0.0; n * dims];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = num[i * n + j];
            let m = 4.0 * (exaggeration * p.get(i, j) - w / z) * w;
            for k in 0..dims {
                grad[i * dims + k] += m * (y[i * dims + k] - y[j * dims + k]);
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
    /// Project onto this many principal components first.
    pub pca_dims: Option<usize>,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            dims: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 42,
            pca_dims: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub n: usize,
    pub dims: usize,
    /// Row-major `n × dims`.
    pub layout: Vec<f64>,
    /// True (unexaggerated) KL after every iteration.
    pub kl_trace: Vec<f64>,
}

impl TsneResult {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.layout[i * self.dims..(i + 1) * self.dims]
    }

    pub fn final_kl(&self) -> f64 {
        self.kl_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn layout_bytes(&self) -> Vec<u8> {
        self.layout.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub fn tsne_embed(x: &Matrix, params: &TsneParams) -> Result<TsneResult> {
    if params.dims == 0 || params.learning_rate <= 0.0 {
        return Err(Error::Argument("t-SNE needs dims ≥ 1 and a positive learning rate".into()));
    }
    let reduced;
    let x = match params.pca_dims {
        Some(k) if k < x.cols() => {
            reduced = pca(x, k, params.seed)?;
            &reduced
        }
        _ => x,
    };
    let p = pairwise_affinities(x, params.perplexity)?;
    let (n, dims) = (p.n, params.dims);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).map_err(|e| Error::Argument(e.to_string()))?;
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; n * dims];
    let mut gains = vec![1.0f64; n * dims];
    let mut kl_trace = Vec::with_capacity(params.iterations);

    for it in 0..params.iterations {
        let exaggeration = if it < params.exaggeration_iterations { params.early_exaggeration } else { 1.0 };
        let momentum = if it < params.momentum_switch { params.initial_momentum } else { params.final_momentum };
        let grad = kl_gradient(&p, &y, dims, exaggeration);
        for k in 0..n * dims {
            // Adaptive per-coordinate gains.
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            velocity[k] = momentum * velocity[k] - params.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for d in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + d]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dims + d] -= mean;
            }
        }
        let kl = kl_divergence(&p, &y, dims);
        if !kl.is_finite() {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {it}")));
        }
        kl_trace.push(kl);
    }
    Ok(TsneResult { n, dims, layout: y, kl_trace })
}

/// Projects the centred rows of `x` onto their top `k` principal directions
/// using seeded subspace iteration.
pub fn pca(x: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let (n, d) = x.shape();
    if k == 0 || k > d {
        return Err(Error::Argument(format!("cannot keep {k} of {d} components")));
    }
    let mut rows = to_rows(x);
    for c in 0..d {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        for r in &mut rows {
            r[c] -= mean;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0f64..1.0)).collect()).collect();
    orthonormalize(&mut basis);
    for _ in 0..100 {
        // basis <- Xᵀ X basis
        let mut next = vec![vec![0.0; d]; k];
        for r in &rows {
            for (b, out) in basis.iter().zip(&mut next) {
                let s: f64 = r.iter().zip(b).map(|(a, b)| a * b).sum();
                for (o, a) in out.iter_mut().zip(r) {
                    *o += s * a;
                }
            }
        }
        orthonormalize(&mut next);
        basis = next;
    }
    let data = rows
        .iter()
        .flat_map(|r| basis.iter().map(move |b| r.iter().zip(b).map(|(a, b)| a * b).sum::<f64>() as f32))
        .collect();
    Matrix::new(n, k, data)
}

fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vs.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = vs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            vs[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// One row of the layout export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPoint {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub group: String,
}

pub fn layout_points(result: &TsneResult, ids: &[String], groups: &[String]) -> Result<Vec<LayoutPoint>> {
    if result.dims != 2 || ids.len() != result.n || groups.len() != result.n {
        return Err(Error::Shape("layout export needs a 2-d layout with one id and group per point".into()));
    }
    Ok((0..result.n)
        .map(|i| LayoutPoint {
            image_id: ids[i].clone(),
            x: result.layout[2 * i],
            y: result.layout[2 * i + 1],
            group: groups[i].clone(),
        })
        .collect())
}

pub fn write_layout_csv(points: &[LayoutPoint], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p).map_err(|e| Error::Data(format!("layout CSV: {e}")))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_layout_csv(r: impl std::io::Read) -> Result<Vec<LayoutPoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("layout CSV: {e}"))))
        .collect()
}
