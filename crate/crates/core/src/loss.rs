//! Importance-weighted training loss over machine and human labels.
//!
//! Every variant has the per-item form `a_i·ℓ_i + c_i·ℓ^m_i` with
//! `a_i = δ_i·w_i` and `c_i = λ·(1 − δ_i·w_i)`, where `w_i = 1/π_i`. The
//! trainer consumes these coefficients directly.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, Stream};
use crate::sampling::sigmoid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("no samples")]
    Empty,
    #[error("variance needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("item {item_id}: review probability {pi} outside [0, 1]")]
    InvalidProbability { item_id: usize, pi: f64 },
    #[error("item {item_id} was reviewed with review probability 0")]
    ZeroProbabilityReviewed { item_id: usize },
    #[error("item {item_id}: review probability 0 makes the variance undefined")]
    ZeroProbability { item_id: usize },
    #[error("item {item_id}: loss values must be finite")]
    NonFinite { item_id: usize },
    #[error("item {item_id}: sample π = {found} but the {rule} rule gives {expected}")]
    RuleMismatch {
        item_id: usize,
        rule: &'static str,
        expected: f64,
        found: f64,
    },
    #[error("item {0} has no error-probability estimate")]
    MissingEstimate(usize),
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("gradient dimensions disagree: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("Monte Carlo needs at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub item_id: usize,
    /// Loss under the human (true) label.
    pub loss: f64,
    /// Loss under the machine label.
    pub machine_loss: f64,
    pub pi: f64,
    pub delta: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_probability: Option<f64>,
}

impl LossSample {
    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(LossError::InvalidProbability {
                item_id: self.item_id,
                pi: self.pi,
            });
        }
        if self.delta && self.pi == 0.0 {
            return Err(LossError::ZeroProbabilityReviewed { item_id: self.item_id });
        }
        if !self.loss.is_finite() || !self.machine_loss.is_finite() {
            return Err(LossError::NonFinite { item_id: self.item_id });
        }
        Ok(())
    }
}

/// Which sampling rule generated `π` and `δ`, with the parameters needed to recompute `π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LossRule {
    Normalization { budget: usize },
    Exponential { alpha: f64, beta: f64 },
    Threshold,
}

impl LossRule {
    fn name(&self) -> &'static str {
        match self {
            LossRule::Normalization { .. } => "normalization",
            LossRule::Exponential { .. } => "exponential",
            LossRule::Threshold => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActLossConfig {
    #[serde(flatten)]
    pub rule: LossRule,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

impl ActLossConfig {
    pub const LAMBDA_GRID: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];

    pub fn new(rule: LossRule, lambda: f64) -> Self {
        Self { rule, lambda }
    }
}

static NEGATIVE_EVALUATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of loss evaluations so far that returned a negative value.
pub fn negative_evaluations() -> u64 {
    NEGATIVE_EVALUATIONS.load(Ordering::Relaxed)
}

fn record(value: f64) -> f64 {
    if value < 0.0 {
        NEGATIVE_EVALUATIONS.fetch_add(1, Ordering::Relaxed);
    }
    value
}

/// Pairwise summation; the split points depend only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Per-item coefficients `(a_i, c_i)` with weights `w_i = 1/π_i` and power `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub human: f64,
    pub machine: f64,
}

fn term(loss: f64, machine_loss: f64, delta: bool, weight: f64, lambda: f64) -> f64 {
    if delta {
        // exact `loss` when weight = 1 and lambda = 1
        loss * weight + lambda * machine_loss * (1.0 - weight)
    } else {
        lambda * machine_loss
    }
}

fn coefficient(delta: bool, weight: f64, lambda: f64) -> Coefficients {
    if delta {
        Coefficients {
            human: weight,
            machine: lambda * (1.0 - weight),
        }
    } else {
        Coefficients {
            human: 0.0,
            machine: lambda,
        }
    }
}

/// `(1/N) Σ [ℓ^m_i + (ℓ_i − ℓ^m_i)·δ_i/π_i]`.
pub fn act_loss(samples: &[LossSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(LossError::Empty);
    }
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        s.check()?;
        let w = if s.delta { 1.0 / s.pi } else { 0.0 };
        terms.push(term(s.loss, s.machine_loss, s.delta, w, 1.0));
    }
    Ok(record(pairwise_sum(&terms) / samples.len() as f64))
}

/// Review probabilities implied by a rule, for provenance checks.
fn rule_probabilities(samples: &[LossSample], rule: LossRule) -> Result<Option<Vec<f64>>> {
    let eps = || {
        samples
            .iter()
            .map(|s| s.error_probability.ok_or(LossError::MissingEstimate(s.item_id)))
            .collect::<Result<Vec<f64>>>()
    };
    Ok(match rule {
        LossRule::Normalization { budget } => {
            let eps = eps()?;
            let total: f64 = eps.iter().sum();
            let n = eps.len() as f64;
            Some(
                eps.iter()
                    .map(|e| {
                        if total == 0.0 {
                            budget as f64 / n
                        } else {
                            (budget as f64 * e / total).min(1.0)
                        }
                    })
                    .collect(),
            )
        }
        LossRule::Exponential { alpha, beta } => {
            Some(eps()?.iter().map(|e| sigmoid(beta * (e - alpha))).collect())
        }
        LossRule::Threshold => None,
    })
}

/// Per-item coefficients for a rule-specific variant, after checking that
/// each sample's `π` is the one the rule produces.
pub fn variant_coefficients(samples: &[LossSample], config: &ActLossConfig) -> Result<Vec<Coefficients>> {
    if samples.is_empty() {
        return Err(LossError::Empty);
    }
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(LossError::InvalidLambda(config.lambda));
    }
    for s in samples {
        s.check()?;
    }
    let rule_pi = rule_probabilities(samples, config.rule)?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pi = match &rule_pi {
            Some(expected) => {
                let e = expected[i];
                if (e - s.pi).abs() > 1e-9 * e.max(1e-300).max(s.pi) {
                    return Err(LossError::RuleMismatch {
                        item_id: s.item_id,
                        rule: config.rule.name(),
                        expected: e,
                        found: s.pi,
                    });
                }
                e
            }
            None => {
                if s.pi != 0.0 && s.pi != 1.0 {
                    return Err(LossError::RuleMismatch {
                        item_id: s.item_id,
                        rule: config.rule.name(),
                        expected: s.pi.round(),
                        found: s.pi,
                    });
                }
                s.pi
            }
        };
        let w = if s.delta { 1.0 / pi } else { 0.0 };
        out.push(coefficient(s.delta, w, config.lambda));
    }
    Ok(out)
}

/// Rule-specific variant with power tuning `λ`.
pub fn act_loss_variant(samples: &[LossSample], config: &ActLossConfig) -> Result<f64> {
    let coeffs = variant_coefficients(samples, config)?;
    let terms: Vec<f64> = samples
        .iter()
        .zip(&coeffs)
        .map(|(s, c)| {
            let w = if s.delta { c.human } else { 0.0 };
            term(s.loss, s.machine_loss, s.delta, w, config.lambda)
        })
        .collect();
    Ok(record(pairwise_sum(&terms) / samples.len() as f64))
}

/// Gradient of [`act_loss_variant`] given per-item gradients `(∇ℓ_i, ∇ℓ^m_i)`.
pub fn act_loss_gradient(
    gradients: &[(Vec<f64>, Vec<f64>)],
    samples: &[LossSample],
    config: &ActLossConfig,
) -> Result<Vec<f64>> {
    if gradients.len() != samples.len() {
        return Err(LossError::LengthMismatch {
            expected: samples.len(),
            actual: gradients.len(),
        });
    }
    let coeffs = variant_coefficients(samples, config)?;
    let dim = gradients[0].0.len();
    let mut out = vec![0.0; dim];
    for ((g, gm), c) in gradients.iter().zip(&coeffs) {
        if g.len() != dim || gm.len() != dim {
            return Err(LossError::DimensionMismatch(dim, g.len().max(gm.len())));
        }
        for k in 0..dim {
            out[k] += c.human * g[k] + c.machine * gm[k];
        }
    }
    let n = samples.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// `(1/N)·[Var(ℓ) + mean((ℓ − ℓ^m)²·(1/π − 1))]` with population variance.
pub fn variance_estimate(samples: &[LossSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(LossError::TooFewSamples(samples.len()));
    }
    for s in samples {
        s.check()?;
        if s.pi == 0.0 {
            return Err(LossError::ZeroProbability { item_id: s.item_id });
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.loss).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.loss - mean).powi(2)).sum::<f64>() / n;
    let extra = samples
        .iter()
        .map(|s| (s.loss - s.machine_loss).powi(2) * (1.0 / s.pi - 1.0))
        .sum::<f64>()
        / n;
    Ok((var + extra) / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    /// Redraw only the indicators; the items stay fixed.
    IndicatorsOnly,
    /// Redraw the items with replacement, then their indicators.
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub mean: f64,
    /// Sample variance of the estimator across resamples.
    pub variance: f64,
    pub standard_error: f64,
    pub resamples: usize,
}

/// Empirical distribution of [`act_loss`] under repeated indicator draws.
pub fn monte_carlo_loss_distribution(
    loss: &[f64],
    machine_loss: &[f64],
    pi: &[f64],
    n_resamples: usize,
    seed: u64,
    scheme: ResampleScheme,
) -> Result<MonteCarloSummary> {
    let n = loss.len();
    if n == 0 {
        return Err(LossError::Empty);
    }
    for other in [machine_loss.len(), pi.len()] {
        if other != n {
            return Err(LossError::LengthMismatch { expected: n, actual: other });
        }
    }
    if n_resamples < 1000 {
        return Err(LossError::TooFewResamples(n_resamples));
    }
    for (i, &p) in pi.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(LossError::InvalidProbability { item_id: i, pi: p });
        }
    }
    let correction: Vec<f64> = (0..n).map(|i| (loss[i] - machine_loss[i]) / pi[i]).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut first = None;
    for r in 0..n_resamples {
        let mut rng = rng_for(seed, Stream::MonteCarlo, r as u64);
        let mut total = 0.0;
        for j in 0..n {
            let i = match scheme {
                ResampleScheme::IndicatorsOnly => j,
                ResampleScheme::Bootstrap => rng.random_range(0..n),
            };
            total += machine_loss[i];
            if rng.random::<f64>() < pi[i] {
                total += correction[i];
            }
        }
        let value = record(total / n as f64);
        // shift by the first value for a numerically stable variance
        let shift = *first.get_or_insert(value);
        let d = value - shift;
        sum += d;
        sum_sq += d * d;
    }
    let r = n_resamples as f64;
    let shift = first.unwrap_or(0.0);
    let mean_d = sum / r;
    let variance = ((sum_sq - r * mean_d * mean_d) / (r - 1.0)).max(0.0);
    Ok(MonteCarloSummary {
        mean: shift + mean_d,
        variance,
        standard_error: (variance / r).sqrt(),
        resamples: n_resamples,
    })
}
