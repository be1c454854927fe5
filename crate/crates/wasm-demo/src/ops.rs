//! Demo operations on a small simulated data set. Pure Rust, so they are
//! tested natively.

use act_core::backends::{simulate_annotator, simulate_criticizer, BetaParams, CriticCalibration, SimulatorConfig};
use act_core::data::{Dataset, Item, ItemContent};
use act_core::loss::{self, LossSample};
use act_core::metrics::{self, QualityMeasure};
use act_core::rng::{uniform_for, Stream};
use act_core::sampling::{self, Budget, DrawMode, SamplingRule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] act_core::backends::BackendError),
    #[error(transparent)]
    Sampling(#[from] act_core::sampling::SamplingError),
    #[error(transparent)]
    Metrics(#[from] act_core::metrics::MetricsError),
    #[error(transparent)]
    Loss(#[from] act_core::loss::LossError),
    #[error(transparent)]
    Data(#[from] act_core::data::DataError),
}

type Result<T> = std::result::Result<T, DemoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Critic {
    Perfect,
    Informative,
    Uninformative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoRequest {
    pub n: usize,
    pub accuracy: f64,
    pub critic: Critic,
    /// `threshold`, `normalization` or `exponential`.
    pub rule: String,
    /// Sharpness for the exponential rule.
    pub beta: f64,
    pub proportion: f64,
    pub seed: u64,
    pub resamples: usize,
    pub bins: usize,
}

impl Default for DemoRequest {
    fn default() -> Self {
        Self {
            n: 200,
            accuracy: 0.8,
            critic: Critic::Informative,
            rule: "threshold".into(),
            beta: 10.0,
            proportion: 0.2,
            seed: 1,
            resamples: 2000,
            bins: 30,
        }
    }
}

const MAX_ITEMS: usize = 5000;
const LABELS: [&str; 4] = ["cat", "dog", "bird", "fish"];

/// Truth, machine labels and error estimates for a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub truth: Vec<usize>,
    pub machine: Vec<usize>,
    pub eps: Vec<f64>,
}

impl Instance {
    pub fn is_error(&self, i: usize) -> bool {
        self.truth[i] != self.machine[i]
    }
}

pub fn simulate(req: &DemoRequest) -> Result<Instance> {
    if req.n == 0 || req.n > MAX_ITEMS {
        return Err(DemoError::Invalid(format!("n must lie in 1..={MAX_ITEMS}")));
    }
    let calibration = match req.critic {
        Critic::Perfect => CriticCalibration::Perfect,
        Critic::Informative => CriticCalibration::Beta {
            error: BetaParams::new(9.0, 1.0),
            correct: BetaParams::new(1.0, 9.0),
        },
        Critic::Uninformative => CriticCalibration::UNINFORMATIVE,
    };
    let labels: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
    let items = (0..req.n)
        .map(|id| Item {
            id,
            content: ItemContent::Text { text: format!("item {id}") },
            hidden_truth: Some((uniform_for(req.seed, Stream::Generator, id as u64) * LABELS.len() as f64) as usize),
            label_space: labels.clone(),
            features: None,
        })
        .collect();
    let dataset = Dataset::new(items)?;
    let sim = SimulatorConfig {
        annotator_accuracy: req.accuracy,
        calibration,
        seed: req.seed,
    };
    let annotations = simulate_annotator(&dataset, &sim)?;
    let criticisms = simulate_criticizer(&annotations, &dataset, &sim)?;
    Ok(Instance {
        truth: dataset.hidden_truths().expect("simulated truth"),
        machine: annotations.iter().map(|a| a.machine_label.expect("simulated label")).collect(),
        eps: criticisms.iter().map(|c| c.error_probability.expect("naive estimate")).collect(),
    })
}

impl DemoRequest {
    pub fn sampling_rule(&self) -> Result<SamplingRule> {
        match self.rule.as_str() {
            "threshold" => Ok(SamplingRule::Threshold),
            "normalization" => Ok(SamplingRule::Normalization),
            "exponential" => Ok(SamplingRule::Exponential { beta: self.beta }),
            other => Err(DemoError::Invalid(format!(
                "unknown rule {other:?}; the demo criticizer reports probabilities, so ppl_priority is unavailable"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformView {
    pub budget: usize,
    pub eps: Vec<f64>,
    pub pi: Vec<f64>,
    pub delta: Vec<bool>,
    pub is_error: Vec<bool>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub reviewed: usize,
    pub errors: usize,
    pub errors_caught: usize,
}

pub fn sampling_transform(req: &DemoRequest) -> Result<TransformView> {
    let rule = req.sampling_rule()?;
    let inst = simulate(req)?;
    let budget = Budget::Proportion(req.proportion).resolve(req.n)?;
    let plan = sampling::build_plan(&inst.eps, rule, budget, req.seed, DrawMode::HardCap)?;
    let is_error: Vec<bool> = (0..req.n).map(|i| inst.is_error(i)).collect();
    Ok(TransformView {
        budget,
        errors: is_error.iter().filter(|e| **e).count(),
        errors_caught: (0..req.n).filter(|&i| is_error[i] && plan.delta[i]).count(),
        reviewed: plan.reviewed(),
        alpha: plan.alpha,
        tau: plan.tau,
        eps: inst.eps,
        pi: plan.pi,
        delta: plan.delta,
        is_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveView {
    pub b: Vec<f64>,
    pub aqg: Vec<f64>,
    pub abs: f64,
    pub abs_trapezoid: f64,
}

pub fn budget_curve(req: &DemoRequest) -> Result<CurveView> {
    let rule = req.sampling_rule()?;
    let inst = simulate(req)?;
    let curve = metrics::abs_from_estimates(
        &inst.truth,
        &inst.machine,
        &inst.eps,
        rule,
        req.seed,
        DrawMode::HardCap,
        &QualityMeasure::default(),
    )?;
    Ok(CurveView {
        b: curve.points.iter().map(|p| p.b).collect(),
        aqg: curve.points.iter().map(|p| p.aqg).collect(),
        abs: curve.abs,
        abs_trapezoid: curve.abs_trapezoid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossView {
    /// Mean loss under true labels, which the estimator targets.
    pub target: f64,
    /// Mean loss under machine labels alone.
    pub machine_only: f64,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Per-item losses: small under the true label, larger under a wrong machine label.
fn losses(inst: &Instance, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = inst.truth.len() as u64;
    let mut l = Vec::with_capacity(inst.truth.len());
    let mut lm = Vec::with_capacity(inst.truth.len());
    for i in 0..inst.truth.len() {
        let u = uniform_for(seed, Stream::Generator, n + i as u64);
        let base = -(0.5 + 0.5 * u).ln();
        l.push(base);
        lm.push(if inst.is_error(i) { base + 1.0 + 2.0 * u } else { base });
    }
    (l, lm)
}

/// Redraw review indicators `resamples` times under the rule's `π` and histogram the loss.
pub fn loss_distribution(req: &DemoRequest) -> Result<LossView> {
    let rule = req.sampling_rule()?;
    if req.resamples == 0 || req.resamples > 100_000 || req.bins == 0 {
        return Err(DemoError::Invalid("resamples must lie in 1..=100000 and bins must be positive".into()));
    }
    let inst = simulate(req)?;
    let budget = Budget::Proportion(req.proportion).resolve(req.n)?;
    let plan = sampling::build_plan(&inst.eps, rule, budget, req.seed, DrawMode::Expectation)?;
    let (l, lm) = losses(&inst, req.seed);
    let n = req.n;
    let mut samples: Vec<LossSample> = (0..n)
        .map(|i| LossSample {
            item_id: i,
            loss: l[i],
            machine_loss: lm[i],
            pi: plan.pi[i],
            delta: false,
            error_probability: Some(inst.eps[i]),
        })
        .collect();
    let mut values = Vec::with_capacity(req.resamples);
    for r in 0..req.resamples {
        for (i, s) in samples.iter_mut().enumerate() {
            s.delta = uniform_for(req.seed, Stream::MonteCarlo, (r * n + i) as u64) < s.pi;
        }
        values.push(loss::act_loss(&samples)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; req.bins];
    let width = (hi - lo) / req.bins as f64;
    for v in &values {
        let bin = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[bin.min(req.bins - 1)] += 1;
    }
    Ok(LossView {
        target: l.iter().sum::<f64>() / n as f64,
        machine_only: lm.iter().sum::<f64>() / n as f64,
        mean,
        std: var.sqrt(),
        histogram: Histogram { lo, hi, counts },
    })
}
