//! Softmax regression with L2 regularisation on weights and bias.
//!
//! The objective for a label-weight matrix `Y` (one row per item) is
//! `(1/N) Σ_i [s_i·lse(z_i) − Σ_k Y_ik z_ik] + (μ/2)‖θ‖²` with `s_i = Σ_k Y_ik`
//! and `z_i = θ x̃_i`, where `x̃` is the feature vector with a trailing 1.

use nalgebra::{DMatrix, DVector};

/// Design matrix with a trailing column of ones.
pub fn augment(features: &[Vec<f64>]) -> DMatrix<f64> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { features[i][j] } else { 1.0 })
}

fn row_softmax(z: &mut DMatrix<f64>) -> Vec<f64> {
    let mut lse = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        let mut row = z.row_mut(i);
        let max = row.max();
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.unscale_mut(sum);
        lse.push(max + sum.ln());
    }
    lse
}

pub struct Evaluation {
    pub objective: f64,
    /// `K × D̃`, same layout as θ.
    pub gradient: DMatrix<f64>,
    /// Row-wise softmax probabilities.
    pub probs: DMatrix<f64>,
}

/// Objective and gradient at `theta` (`K × D̃`).
pub fn evaluate(theta: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, mu: f64) -> Evaluation {
    let n = x.nrows() as f64;
    let z = x * theta.transpose();
    let mut probs = z.clone();
    let lse = row_softmax(&mut probs);
    let mut data_term = 0.0;
    let mut residual = probs.clone();
    for i in 0..x.nrows() {
        let s: f64 = y.row(i).sum();
        data_term += s * lse[i] - y.row(i).dot(&z.row(i));
        for k in 0..y.ncols() {
            residual[(i, k)] = s * probs[(i, k)] - y[(i, k)];
        }
    }
    let gradient = residual.transpose() * x / n + theta * mu;
    Evaluation {
        objective: data_term / n + 0.5 * mu * theta.norm_squared(),
        gradient,
        probs,
    }
}

/// Objective only.
pub fn objective(theta: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, mu: f64) -> f64 {
    let n = x.nrows() as f64;
    let z = x * theta.transpose();
    let mut probs = z.clone();
    let lse = row_softmax(&mut probs);
    let mut data_term = 0.0;
    for i in 0..x.nrows() {
        data_term += y.row(i).sum() * lse[i] - y.row(i).dot(&z.row(i));
    }
    data_term / n + 0.5 * mu * theta.norm_squared()
}

/// Row-major flattening of a `K × D̃` matrix: index `k·D̃ + j`.
pub fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

pub fn unflatten(v: &DVector<f64>, k: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, d, v.as_slice())
}

/// Hessian in the flattened layout.
pub fn hessian(probs: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let k = probs.ncols();
    let s: Vec<f64> = (0..n).map(|i| y.row(i).sum()).collect();
    let mut h = DMatrix::<f64>::zeros(k * d, k * d);
    let mut scaled = x.clone();
    for a in 0..k {
        for b in a..k {
            let c: Vec<f64> = (0..n)
                .map(|i| {
                    let pa = probs[(i, a)];
                    s[i] * (if a == b { pa } else { 0.0 } - pa * probs[(i, b)])
                })
                .collect();
            for j in 0..d {
                for i in 0..n {
                    scaled[(i, j)] = x[(i, j)] * c[i];
                }
            }
            let block = x.transpose() * &scaled / n as f64;
            h.view_mut((a * d, b * d), (d, d)).copy_from(&block);
            if a != b {
                h.view_mut((b * d, a * d), (d, d)).copy_from(&block.transpose());
            }
        }
    }
    for i in 0..k * d {
        h[(i, i)] += mu;
    }
    h
}
