//! High-probability bound on the distance between the minimiser of the
//! importance-weighted loss and the fully supervised minimiser.

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBoundParams {
    /// Strong-convexity constant.
    pub mu: f64,
    pub n: usize,
    /// Lower bound on review probabilities.
    pub q: f64,
    /// Bound on per-item gradient gaps.
    pub c: f64,
    /// Failure probability.
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub c0: f64,
    pub c1: f64,
    /// Smallest `N` for which the concentration step applies; `None` when `c1 = 0`.
    pub n_threshold: Option<f64>,
    /// `N` meets `n_threshold`.
    pub valid: bool,
}

/// `sqrt(8·c1·ln(2/p) / (μ²·N))` with `c1 = (1 − q)·C²/q`.
pub fn theory_bound(params: &GapBoundParams) -> Result<BoundReport> {
    let GapBoundParams { mu, n, q, c, p } = *params;
    let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
    if q == 0.0 {
        return bad("q = 0 leaves the bound undefined");
    }
    if !(q > 0.0 && q <= 1.0) {
        return bad("q must lie in (0, 1]");
    }
    if !(c >= 0.0 && c.is_finite()) {
        return bad("C must be non-negative");
    }
    if !(p > 0.0 && p < 1.0) {
        return bad("p must lie in (0, 1)");
    }
    if !(mu > 0.0) || n == 0 {
        return bad("mu and N must be positive");
    }
    let c1 = (1.0 - q) * c * c / q;
    let c0 = (1.0f64).max((1.0 - q) / q) * c;
    let log_term = (2.0 / p).ln();
    let bound = (8.0 * c1 * log_term / (mu * mu * n as f64)).sqrt();
    let n_threshold = (c1 > 0.0).then(|| 8.0 * c0 * c0 * log_term / c1);
    Ok(BoundReport {
        bound,
        c0,
        c1,
        n_threshold,
        valid: n_threshold.is_none_or(|t| n as f64 >= t),
    })
}
