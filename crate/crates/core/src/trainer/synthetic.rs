//! Synthetic softmax-regression data and the parameter-gap experiment.
//!
//! Labels come from a fixed teacher `y ~ softmax(W* x + b*)`. The machine
//! annotator draws its own label from the same conditional, so a machine
//! error swaps two exchangeable labels and its gradient gap has mean zero.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bound, parameter_gap, train_from, LossSelection, Optimizer, Result, TrainConfig, TrainError, TrainingData};
use crate::backends::{BetaParams, CriticCalibration};
use crate::loss::{ActLossConfig, LossRule};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::sampling::{build_plan, DrawMode, SamplingRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub dim: usize,
    /// Standard deviation of teacher weights; larger means sharper labels.
    pub teacher_scale: f64,
    /// Seed of the teacher, fixed across data-set draws.
    pub teacher_seed: u64,
    pub critic: CriticCalibration,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 20,
            teacher_scale: 1.0,
            teacher_seed: 0,
            critic: CriticCalibration::Beta {
                error: BetaParams::new(9.0, 1.0),
                correct: BetaParams::new(1.0, 9.0),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub features: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
    pub machine: Vec<usize>,
    pub error_probability: Vec<f64>,
}

impl SyntheticData {
    pub fn machine_error_rate(&self) -> f64 {
        let errors = self.truth.iter().zip(&self.machine).filter(|(a, b)| a != b).count();
        errors as f64 / self.truth.len().max(1) as f64
    }
}

fn teacher(config: &SyntheticConfig) -> DMatrix<f64> {
    let mut rng = rng_for(config.teacher_seed, Stream::Generator, u64::MAX);
    DMatrix::from_fn(config.n_classes, config.dim + 1, |_, _| {
        config.teacher_scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn draw_class(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Draw `n` items; item `i` depends only on `(seed, i)` and the teacher.
pub fn generate(config: &SyntheticConfig, n: usize, seed: u64) -> Result<SyntheticData> {
    let w = teacher(config);
    let k = config.n_classes;
    let d = config.dim;
    let mut data = SyntheticData {
        features: Vec::with_capacity(n),
        truth: Vec::with_capacity(n),
        machine: Vec::with_capacity(n),
        error_probability: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut rng = rng_for(seed, Stream::Generator, i as u64);
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..k)
            .map(|c| w[(c, d)] + (0..d).map(|j| w[(c, j)] * x[j]).sum::<f64>())
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / total).collect();
        let y = draw_class(&p, rng.random());
        let ym = draw_class(&p, rng.random());
        let eps = match config.critic {
            CriticCalibration::Perfect => {
                if y != ym {
                    1.0
                } else {
                    0.0
                }
            }
            CriticCalibration::Beta { error, correct } => {
                let b = if y != ym { error } else { correct };
                Beta::new(b.a, b.b)
                    .map_err(|e| TrainError::InvalidConfig(format!("beta: {e}")))?
                    .sample(&mut rng)
            }
        };
        data.features.push(x);
        data.truth.push(y);
        data.machine.push(ym);
        data.error_probability.push(eps);
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub sizes: Vec<usize>,
    pub rules: Vec<SamplingRule>,
    pub budget_proportion: f64,
    pub seeds: Vec<u64>,
    /// Strong-convexity constant of the trained objective.
    pub mu: f64,
    pub lambda: f64,
    /// Failure probability for the bound.
    pub p: f64,
}

impl Default for GapExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            sizes: vec![250, 500, 1000, 2000, 4000],
            rules: vec![SamplingRule::Threshold],
            budget_proportion: 0.2,
            seeds: (0..20).collect(),
            mu: 0.1,
            lambda: 1.0,
            p: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub rule: String,
    pub seed: u64,
    pub budget: usize,
    pub reviewed: usize,
    pub machine_error_rate: f64,
    pub gap: f64,
    /// Smallest review probability among reviewed items.
    #[serde(rename = "empirical_q")]
    pub q_reviewed: f64,
    /// Smallest review probability over all items.
    pub q_all: f64,
    /// Largest per-item gradient gap at the supervised optimum.
    #[serde(rename = "empirical_C")]
    pub c: f64,
    /// Bound with `q = q_reviewed`.
    #[serde(rename = "bound")]
    pub bound_reviewed: f64,
    pub bound_reviewed_valid: bool,
    /// Bound with `q = q_all`; infinite when some item has `π = 0`.
    pub bound_all: f64,
}

fn loss_rule(rule: SamplingRule, budget: usize, alpha: Option<f64>) -> Result<LossRule> {
    Ok(match rule {
        SamplingRule::Normalization => LossRule::Normalization { budget },
        SamplingRule::Exponential { beta } => LossRule::Exponential {
            alpha: alpha.unwrap_or(0.0),
            beta,
        },
        SamplingRule::Threshold => LossRule::Threshold,
        SamplingRule::PplPriority => {
            return Err(TrainError::InvalidConfig("perplexity priority has no loss variant".into()))
        }
    })
}

/// One trial: supervised and importance-weighted minimisers on the same sample.
pub fn gap_trial(
    config: &GapExperimentConfig,
    data: &SyntheticData,
    rule: SamplingRule,
    seed: u64,
) -> Result<GapRow> {
    let n = data.truth.len();
    let budget = ((config.budget_proportion * n as f64) + 1e-9).floor() as usize;
    let plan_seed = derive_seed(seed, Stream::Indicators, n as u64);
    let plan = build_plan(&data.error_probability, rule, budget, plan_seed, DrawMode::Expectation)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let training = TrainingData {
        features: data.features.clone(),
        n_classes: config.synthetic.n_classes,
        truth: data.truth.iter().map(|y| Some(*y)).collect(),
        reviewed: (0..n).map(|i| plan.delta[i].then_some(data.truth[i])).collect(),
        machine: data.machine.iter().map(|y| Some(*y)).collect(),
        pi: plan.pi.clone(),
        delta: plan.delta.clone(),
        error_probability: data.error_probability.iter().map(|e| Some(*e)).collect(),
    };
    let newton = TrainConfig {
        l2: config.mu,
        optimizer: Optimizer::Newton,
        epochs: 100,
        tolerance: 1e-10,
        loss: LossSelection::PlainHuman,
        ..TrainConfig::default()
    };
    let star = train_from(&training, &newton, None)?;
    let act_config = TrainConfig {
        loss: LossSelection::Act(ActLossConfig::new(loss_rule(rule, budget, plan.alpha)?, config.lambda)),
        ..newton.clone()
    };
    let act = train_from(&training, &act_config, Some(&star.params))?;
    let gap = parameter_gap(&star.params, &act.params)?;

    let q_reviewed = plan
        .pi
        .iter()
        .zip(&plan.delta)
        .filter(|(_, d)| **d)
        .map(|(p, _)| *p)
        .fold(1.0, f64::min);
    let q_all = plan.pi.iter().cloned().fold(1.0, f64::min);
    let c = training.gradient_gaps().into_iter().fold(0.0, f64::max);
    let bound_for = |q: f64| {
        bound::theory_bound(&bound::GapBoundParams {
            mu: config.mu,
            n,
            q,
            c,
            p: config.p,
        })
    };
    let reviewed_bound = bound_for(q_reviewed)?;
    let bound_all = if q_all > 0.0 { bound_for(q_all)?.bound } else { f64::INFINITY };
    Ok(GapRow {
        n,
        rule: rule.name().to_string(),
        seed,
        budget,
        reviewed: plan.reviewed(),
        machine_error_rate: data.machine_error_rate(),
        gap,
        q_reviewed,
        q_all,
        c,
        bound_reviewed: reviewed_bound.bound,
        bound_reviewed_valid: reviewed_bound.valid,
        bound_all,
    })
}

/// Every `(N, rule, seed)` combination.
pub fn gap_experiment(config: &GapExperimentConfig) -> Result<Vec<GapRow>> {
    let mut rows = Vec::new();
    for &n in &config.sizes {
        for &seed in &config.seeds {
            let data = generate(&config.synthetic, n, derive_seed(seed, Stream::Generator, n as u64))?;
            for &rule in &config.rules {
                rows.push(gap_trial(config, &data, rule, seed)?);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub rule: String,
    pub n: usize,
    pub trials: usize,
    pub mean_gap: f64,
    pub violation_rate_reviewed: f64,
    pub violation_rate_all: f64,
}

pub fn summarize(rows: &[GapRow]) -> Vec<GapSummary> {
    let mut keys: Vec<(String, usize)> = rows.iter().map(|r| (r.rule.clone(), r.n)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(rule, n)| {
            let group: Vec<&GapRow> = rows.iter().filter(|r| r.rule == rule && r.n == n).collect();
            let t = group.len() as f64;
            GapSummary {
                trials: group.len(),
                mean_gap: group.iter().map(|r| r.gap).sum::<f64>() / t,
                violation_rate_reviewed: group.iter().filter(|r| r.gap > r.bound_reviewed).count() as f64 / t,
                violation_rate_all: group.iter().filter(|r| r.gap > r.bound_all).count() as f64 / t,
                rule,
                n,
            }
        })
        .collect()
}

/// Least-squares slope of `ln(mean gap)` against `ln N` for one rule.
pub fn log_log_slope(summaries: &[GapSummary], rule: &str) -> Option<f64> {
    let pts: Vec<(f64, f64)> = summaries
        .iter()
        .filter(|s| s.rule == rule && s.mean_gap > 0.0)
        .map(|s| ((s.n as f64).ln(), s.mean_gap.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

pub fn write_gap_csv(rows: &[GapRow], path: &Path) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
