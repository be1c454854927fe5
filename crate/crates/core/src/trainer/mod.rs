//! Downstream training on pipeline output.
//!
//! The model is multinomial logistic regression with an L2 penalty `μ/2·‖θ‖²`
//! on all parameters, so the regularised objective is `μ`-strongly convex
//! under every loss selection with `λ ∈ [0, 1]`.

pub mod bound;
pub mod model;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_jsonl, CorrectedDataset, DataError, Dataset, Item};
use crate::loss::{variant_coefficients, ActLossConfig, LossError, LossSample};
use crate::rng::{rng_for, Stream};

pub use bound::{theory_bound, BoundReport, GapBoundParams};
pub use synthetic::{gap_experiment, GapExperimentConfig, GapRow, SyntheticConfig, SyntheticData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    Empty,
    #[error("item {item}: expected {expected} features, found {found}")]
    DimensionMismatch { item: usize, expected: usize, found: usize },
    #[error("item {item} has no {which} label")]
    MissingLabel { item: usize, which: &'static str },
    #[error("label {label} of item {item} is outside {classes} classes")]
    LabelOutOfRange { item: usize, label: usize, classes: usize },
    #[error("item {0} has no features and no embedding was supplied")]
    MissingFeatures(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("objective became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("Newton system is not positive definite")]
    NotPositiveDefinite,
    #[error("parameter shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `n_classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    /// `K × (D + 1)` matrix with the bias in the last column.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_classes, self.dim + 1, |k, j| {
            if j < self.dim {
                self.weights[k * self.dim + j]
            } else {
                self.bias[k]
            }
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (k, d1) = m.shape();
        let d = d1 - 1;
        Self {
            n_classes: k,
            dim: d,
            weights: (0..k).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect(),
            bias: (0..k).map(|r| m[(r, d)]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.n_classes {
            let z = self.bias[k]
                + self.weights[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
            if z > best.1 {
                best = (k, z);
            }
        }
        best.0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(x, y)| self.predict(x) == **y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Euclidean norm of the flattened difference.
pub fn parameter_gap(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if (a.n_classes, a.dim) != (b.n_classes, b.dim) {
        return Err(TrainError::ShapeMismatch((a.n_classes, a.dim), (b.n_classes, b.dim)));
    }
    Ok(a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Feature vectors for items, from the items themselves or an embedding table.
#[derive(Debug, Clone, Default)]
pub struct Featurizer {
    embeddings: HashMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
struct EmbeddingRow {
    item_id: usize,
    features: Vec<f64>,
}

impl Featurizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load `{"item_id": .., "features": [..]}` lines.
    pub fn with_embeddings(path: &Path) -> Result<Self> {
        let rows: Vec<EmbeddingRow> = read_jsonl(path)?;
        Ok(Self {
            embeddings: rows.into_iter().map(|r| (r.item_id, r.features)).collect(),
        })
    }

    pub fn featurize(&self, item: &Item) -> Result<Vec<f64>> {
        if let Some(f) = &item.features {
            return Ok(f.clone());
        }
        self.embeddings
            .get(&item.id)
            .cloned()
            .ok_or(TrainError::MissingFeatures(item.id))
    }
}

/// Which labels and weights enter the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSelection {
    /// Ground-truth labels for every item.
    PlainHuman,
    PlainMachine,
    /// Human labels where reviewed, machine labels elsewhere.
    CorrectedMean,
    Act(ActLossConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GradientDescent,
    /// Damped Newton with a Cholesky solve; converges to the exact minimiser.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Normal { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Strong-convexity constant `μ`.
    pub l2: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSelection,
    pub optimizer: Optimizer,
    pub init: Init,
    /// Gradient-norm tolerance for Newton.
    pub tolerance: f64,
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 200,
            l2: 0.1,
            batch_size: 0,
            seed: 0,
            loss: LossSelection::CorrectedMean,
            optimizer: Optimizer::GradientDescent,
            init: Init::Zeros,
            tolerance: 1e-10,
            record_trajectory: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::InvalidConfig("l2 must be non-negative".into()));
        }
        if self.optimizer == Optimizer::Newton && self.l2 <= 0.0 {
            return Err(TrainError::InvalidConfig("Newton needs l2 > 0".into()));
        }
        Ok(())
    }
}

/// Features, labels and review provenance for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub features: Vec<Vec<f64>>,
    pub n_classes: usize,
    /// Ground truth for every item, when known.
    pub truth: Vec<Option<usize>>,
    /// Human label where the item was reviewed.
    pub reviewed: Vec<Option<usize>>,
    pub machine: Vec<Option<usize>>,
    pub pi: Vec<f64>,
    pub delta: Vec<bool>,
    pub error_probability: Vec<Option<f64>>,
}

impl TrainingData {
    /// Fully supervised data: truth and "machine" labels coincide, nothing reviewed.
    pub fn supervised(features: Vec<Vec<f64>>, labels: &[usize], n_classes: usize) -> Self {
        let n = labels.len();
        Self {
            features,
            n_classes,
            truth: labels.iter().map(|l| Some(*l)).collect(),
            reviewed: vec![None; n],
            machine: labels.iter().map(|l| Some(*l)).collect(),
            pi: vec![0.0; n],
            delta: vec![false; n],
            error_probability: vec![None; n],
        }
    }

    /// Training data from a corrected data set and its items.
    pub fn from_corrected(dataset: &Dataset, corrected: &CorrectedDataset, featurizer: &Featurizer) -> Result<Self> {
        let n_classes = dataset.items().first().map_or(0, Item::num_labels);
        let mut data = Self {
            features: Vec::new(),
            n_classes,
            truth: Vec::new(),
            reviewed: Vec::new(),
            machine: Vec::new(),
            pi: Vec::new(),
            delta: Vec::new(),
            error_probability: Vec::new(),
        };
        for entry in &corrected.entries {
            let item = dataset.item(entry.item_id).ok_or(TrainError::MissingFeatures(entry.item_id))?;
            data.features.push(featurizer.featurize(item)?);
            data.truth.push(entry.hidden_truth.or(item.hidden_truth));
            data.reviewed.push(if entry.delta { entry.human_label } else { None });
            data.machine.push(entry.machine_label);
            data.pi.push(entry.pi.unwrap_or(if entry.delta { 1.0 } else { 0.0 }));
            data.delta.push(entry.delta);
            data.error_probability.push(entry.error_probability);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn check(&self) -> Result<usize> {
        if self.features.is_empty() {
            return Err(TrainError::Empty);
        }
        let d = self.features[0].len();
        for (item, f) in self.features.iter().enumerate() {
            if f.len() != d {
                return Err(TrainError::DimensionMismatch {
                    item,
                    expected: d,
                    found: f.len(),
                });
            }
        }
        let n = self.features.len();
        for len in [
            self.truth.len(),
            self.reviewed.len(),
            self.machine.len(),
            self.pi.len(),
            self.delta.len(),
            self.error_probability.len(),
        ] {
            if len != n {
                return Err(TrainError::InvalidConfig(format!("column length {len} != {n}")));
            }
        }
        Ok(d)
    }

    fn label(&self, item: usize, label: Option<usize>, which: &'static str) -> Result<usize> {
        let label = label.ok_or(TrainError::MissingLabel { item, which })?;
        if label >= self.n_classes {
            return Err(TrainError::LabelOutOfRange {
                item,
                label,
                classes: self.n_classes,
            });
        }
        Ok(label)
    }

    /// `N × K` label-weight matrix for a loss selection.
    pub fn label_weights(&self, selection: &LossSelection) -> Result<DMatrix<f64>> {
        self.check()?;
        let n = self.len();
        let mut y = DMatrix::zeros(n, self.n_classes);
        match selection {
            LossSelection::PlainHuman => {
                for i in 0..n {
                    y[(i, self.label(i, self.truth[i], "ground-truth")?)] = 1.0;
                }
            }
            LossSelection::PlainMachine => {
                for i in 0..n {
                    y[(i, self.label(i, self.machine[i], "machine")?)] = 1.0;
                }
            }
            LossSelection::CorrectedMean => {
                for i in 0..n {
                    let label = if self.delta[i] {
                        self.label(i, self.reviewed[i], "human")?
                    } else {
                        self.label(i, self.machine[i], "machine")?
                    };
                    y[(i, label)] = 1.0;
                }
            }
            LossSelection::Act(config) => {
                let samples: Vec<LossSample> = (0..n)
                    .map(|i| LossSample {
                        item_id: i,
                        loss: 0.0,
                        machine_loss: 0.0,
                        pi: self.pi[i],
                        delta: self.delta[i],
                        error_probability: self.error_probability[i],
                    })
                    .collect();
                let coeffs = variant_coefficients(&samples, config)?;
                for (i, c) in coeffs.iter().enumerate() {
                    if c.human != 0.0 {
                        y[(i, self.label(i, self.reviewed[i], "human")?)] += c.human;
                    }
                    if c.machine != 0.0 {
                        y[(i, self.label(i, self.machine[i], "machine")?)] += c.machine;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Per-item `‖∇ℓ^m_i − ∇ℓ_i‖` (same for every θ under softmax cross-entropy).
    pub fn gradient_gaps(&self) -> Vec<f64> {
        self.features
            .iter()
            .enumerate()
            .map(|(i, x)| match (self.truth[i], self.machine[i]) {
                (Some(a), Some(b)) if a != b => {
                    (2.0 * (1.0 + x.iter().map(|v| v * v).sum::<f64>())).sqrt()
                }
                _ => 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Objective after initialisation and after every step.
    pub objective: Vec<f64>,
    pub non_monotone_steps: usize,
    pub gradient_norm: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<ModelParams>,
}

fn initial(config: &TrainConfig, k: usize, d1: usize) -> DMatrix<f64> {
    match config.init {
        Init::Zeros => DMatrix::zeros(k, d1),
        Init::Normal { scale } => {
            let mut rng = rng_for(config.seed, Stream::Generator, u64::MAX);
            let normal = Normal::new(0.0, scale.abs()).expect("finite scale");
            DMatrix::from_fn(k, d1, |_, _| normal.sample(&mut rng))
        }
    }
}

/// Train under the configured loss and optimiser.
pub fn train(data: &TrainingData, config: &TrainConfig) -> Result<TrainReport> {
    train_from(data, config, None)
}

/// Train from an explicit starting point instead of the configured initialisation.
pub fn train_from(data: &TrainingData, config: &TrainConfig, start: Option<&ModelParams>) -> Result<TrainReport> {
    config.validate()?;
    let y = data.label_weights(&config.loss)?;
    let x = model::augment(&data.features);
    let theta = match start {
        Some(p) if p.n_classes == data.n_classes && p.dim + 1 == x.ncols() => p.to_matrix(),
        Some(p) => return Err(TrainError::ShapeMismatch((p.n_classes, p.dim), (data.n_classes, x.ncols() - 1))),
        None => initial(config, data.n_classes, x.ncols()),
    };
    match config.optimizer {
        Optimizer::GradientDescent if config.batch_size == 0 || config.batch_size >= data.len() => {
            gradient_descent(&x, &y, theta, config)
        }
        Optimizer::GradientDescent => minibatch_sgd(&x, &y, theta, config),
        Optimizer::Newton => newton(&x, &y, theta, config),
    }
}

fn gradient_descent(x: &DMatrix<f64>, y: &DMatrix<f64>, mut theta: DMatrix<f64>, config: &TrainConfig) -> Result<TrainReport> {
    let mut eval = model::evaluate(&theta, x, y, config.l2);
    let mut objective = vec![eval.objective];
    let mut trajectory = Vec::new();
    if config.record_trajectory {
        trajectory.push(ModelParams::from_matrix(&theta));
    }
    let mut non_monotone = 0;
    for step in 0..config.epochs {
        theta -= &eval.gradient * config.learning_rate;
        eval = model::evaluate(&theta, x, y, config.l2);
        if !eval.objective.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        if eval.objective > *objective.last().unwrap() + 1e-12 {
            non_monotone += 1;
            log::warn!("objective increased at step {step}; learning rate may be too large");
        }
        objective.push(eval.objective);
        if config.record_trajectory {
            trajectory.push(ModelParams::from_matrix(&theta));
        }
    }
    Ok(TrainReport {
        params: ModelParams::from_matrix(&theta),
        objective,
        non_monotone_steps: non_monotone,
        gradient_norm: eval.gradient.norm(),
        steps: config.epochs,
        trajectory,
    })
}

fn minibatch_sgd(x: &DMatrix<f64>, y: &DMatrix<f64>, mut theta: DMatrix<f64>, config: &TrainConfig) -> Result<TrainReport> {
    let n = x.nrows();
    let mut rng = rng_for(config.seed, Stream::Generator, u64::MAX - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut objective = vec![model::objective(&theta, x, y, config.l2)];
    let mut trajectory = Vec::new();
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let yb = y.select_rows(batch);
            let eval = model::evaluate(&theta, &xb, &yb, config.l2);
            theta -= &eval.gradient * config.learning_rate;
            steps += 1;
        }
        let obj = model::objective(&theta, x, y, config.l2);
        if !obj.is_finite() {
            return Err(TrainError::Diverged { step: epoch });
        }
        objective.push(obj);
        if config.record_trajectory {
            trajectory.push(ModelParams::from_matrix(&theta));
        }
    }
    let eval = model::evaluate(&theta, x, y, config.l2);
    Ok(TrainReport {
        params: ModelParams::from_matrix(&theta),
        objective,
        non_monotone_steps: 0,
        gradient_norm: eval.gradient.norm(),
        steps,
        trajectory,
    })
}

fn newton(x: &DMatrix<f64>, y: &DMatrix<f64>, mut theta: DMatrix<f64>, config: &TrainConfig) -> Result<TrainReport> {
    let (k, d1) = theta.shape();
    let mut eval = model::evaluate(&theta, x, y, config.l2);
    let mut objective = vec![eval.objective];
    let mut non_monotone = 0;
    let mut steps = 0;
    let max_steps = config.epochs.max(1);
    while eval.gradient.norm() > config.tolerance && steps < max_steps {
        let h = model::hessian(&eval.probs, x, y, config.l2);
        let g = model::flatten(&eval.gradient);
        let chol = h.cholesky().ok_or(TrainError::NotPositiveDefinite)?;
        let direction = model::unflatten(&chol.solve(&g), k, d1);
        let slope = g.dot(&model::flatten(&direction));
        let mut t = 1.0;
        let mut candidate = &theta - &direction * t;
        let mut value = model::objective(&candidate, x, y, config.l2);
        // backtracking; near the optimum the full step is accepted
        while value > eval.objective - 1e-4 * t * slope && t > 1e-8 {
            t *= 0.5;
            candidate = &theta - &direction * t;
            value = model::objective(&candidate, x, y, config.l2);
        }
        if !value.is_finite() {
            return Err(TrainError::Diverged { step: steps });
        }
        if value > eval.objective {
            non_monotone += 1;
        }
        let stalled = t <= 1e-8;
        theta = candidate;
        eval = model::evaluate(&theta, x, y, config.l2);
        objective.push(eval.objective);
        steps += 1;
        if stalled {
            break;
        }
    }
    Ok(TrainReport {
        params: ModelParams::from_matrix(&theta),
        objective,
        non_monotone_steps: non_monotone,
        gradient_norm: eval.gradient.norm(),
        steps,
        trajectory: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemContent;
    use crate::loss::LossRule;

    fn separable(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            let side = i % 2;
            let offset = if side == 0 { 1.5 } else { -1.5 };
            feats.push(vec![offset + (t - 0.5), (7.0 * t).sin()]);
            labels.push(side);
        }
        (feats, labels)
    }

    #[test]
    fn separable_data_is_learned() {
        let (f, l) = separable(200);
        let data = TrainingData::supervised(f.clone(), &l, 2);
        let cfg = TrainConfig {
            loss: LossSelection::PlainHuman,
            l2: 0.01,
            ..TrainConfig::default()
        };
        let report = train(&data, &cfg).unwrap();
        assert!(report.params.accuracy(&f, &l) >= 0.99);
        assert_eq!(report.non_monotone_steps, 0);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let (f, l) = separable(10);
        let data = TrainingData::supervised(f, &l, 2);
        let cfg = TrainConfig {
            epochs: 0,
            init: Init::Normal { scale: 0.3 },
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train(&data, &cfg).unwrap();
        assert_eq!(report.params.to_matrix(), initial(&cfg, 2, 3));
    }

    #[test]
    fn gap_examples() {
        let a = ModelParams {
            n_classes: 1,
            dim: 1,
            weights: vec![3.0],
            bias: vec![4.0],
        };
        let b = ModelParams::zeros(1, 1);
        assert_eq!(parameter_gap(&a, &b).unwrap(), 5.0);
        assert_eq!(parameter_gap(&a, &a).unwrap(), 0.0);
        assert!(parameter_gap(&a, &ModelParams::zeros(2, 1)).is_err());
    }

    #[test]
    fn newton_agrees_with_long_gradient_descent() {
        let (f, l) = separable(60);
        let data = TrainingData::supervised(f, &l, 2);
        let gd = train(
            &data,
            &TrainConfig {
                epochs: 5000,
                l2: 0.5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let nt = train(
            &data,
            &TrainConfig {
                l2: 0.5,
                optimizer: Optimizer::Newton,
                epochs: 50,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(nt.gradient_norm < 1e-10);
        assert!(parameter_gap(&gd.params, &nt.params).unwrap() < 1e-6);
    }

    #[test]
    fn featurize_passthrough_and_missing() {
        let item = Item {
            id: 0,
            content: ItemContent::Text { text: "t".into() },
            hidden_truth: None,
            label_space: vec!["a".into()],
            features: Some(vec![0.1, -0.2]),
        };
        let f = Featurizer::new();
        assert_eq!(f.featurize(&item).unwrap(), vec![0.1, -0.2]);
        assert_eq!(f.featurize(&item).unwrap(), f.featurize(&item).unwrap());
        let bare = Item {
            features: None,
            ..item
        };
        assert!(matches!(f.featurize(&bare), Err(TrainError::MissingFeatures(0))));
    }

    #[test]
    fn act_weights_combine_labels() {
        let data = TrainingData {
            features: vec![vec![0.0]; 2],
            n_classes: 3,
            truth: vec![None; 2],
            reviewed: vec![Some(2), None],
            machine: vec![Some(0), Some(1)],
            pi: vec![0.5, 0.5],
            delta: vec![true, false],
            error_probability: vec![Some(0.5), Some(0.5)],
        };
        let cfg = ActLossConfig::new(LossRule::Normalization { budget: 1 }, 0.8);
        let y = data.label_weights(&LossSelection::Act(cfg)).unwrap();
        // weight 1/0.5 on the human label, 0.8·(1 − 2) on the machine label
        assert_eq!(y.row(0).iter().copied().collect::<Vec<_>>(), vec![-0.8, 0.0, 2.0]);
        assert_eq!(y.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.8, 0.0]);
    }

    #[test]
    fn sgd_runs_deterministically() {
        let (f, l) = separable(50);
        let data = TrainingData::supervised(f, &l, 2);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        assert_eq!(train(&data, &cfg).unwrap(), train(&data, &cfg).unwrap());
    }
}
