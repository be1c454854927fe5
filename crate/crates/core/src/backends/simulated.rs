//! Seeded oracle annotator and criticizer for data sets with hidden truth.
//!
//! Each item's randomness comes from `(seed, item_id)`, so batch and per-item
//! calls, serial or parallel, produce identical records.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, AnnotationStrategy, Dataset, Item};
use crate::rng::{rng_for, Stream};

use super::{BackendError, CriticismRecord, CriticismStrategy, Decision};

pub const SIMULATED_BACKEND_ID: &str = "simulated";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub const fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// How the simulated criticizer's error probability relates to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticCalibration {
    /// `ε̂ ~ Beta(error)` when the machine label is wrong, `Beta(correct)` otherwise.
    Beta { error: BetaParams, correct: BetaParams },
    /// `ε̂` is exactly the error indicator.
    Perfect,
}

impl CriticCalibration {
    pub const UNINFORMATIVE: Self = Self::Beta {
        error: BetaParams::new(1.0, 1.0),
        correct: BetaParams::new(1.0, 1.0),
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub annotator_accuracy: f64,
    pub calibration: CriticCalibration,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            annotator_accuracy: 0.8,
            calibration: CriticCalibration::Beta {
                error: BetaParams::new(9.0, 1.0),
                correct: BetaParams::new(1.0, 9.0),
            },
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=1.0).contains(&self.annotator_accuracy) {
            return Err(BackendError::InvalidConfig(format!(
                "annotator_accuracy {} outside [0, 1]",
                self.annotator_accuracy
            )));
        }
        if let CriticCalibration::Beta { error, correct } = self.calibration {
            for p in [error.a, error.b, correct.a, correct.b] {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(BackendError::InvalidConfig(format!("beta parameter {p} must be positive")));
                }
            }
        }
        Ok(())
    }
}

fn truth_of(item: &Item) -> Result<usize, BackendError> {
    item.hidden_truth.ok_or(BackendError::MissingTruth(item.id))
}

/// Truth with probability `annotator_accuracy`, otherwise a uniformly chosen wrong label.
pub fn simulated_label(item: &Item, config: &SimulatorConfig) -> Result<usize, BackendError> {
    let truth = truth_of(item)?;
    let k = item.num_labels();
    let mut rng = rng_for(config.seed, Stream::Annotate, item.id as u64);
    if k < 2 || rng.random::<f64>() < config.annotator_accuracy {
        return Ok(truth);
    }
    let r = rng.random_range(0..k - 1);
    Ok(if r < truth { r } else { r + 1 })
}

/// Error-probability estimate for a machine label, drawn from the calibration channel.
pub fn simulated_error_probability(
    item: &Item,
    machine_label: Option<usize>,
    config: &SimulatorConfig,
) -> Result<f64, BackendError> {
    let truth = truth_of(item)?;
    let wrong = machine_label != Some(truth);
    Ok(match config.calibration {
        CriticCalibration::Perfect => {
            if wrong {
                1.0
            } else {
                0.0
            }
        }
        CriticCalibration::Beta { error, correct } => {
            let params = if wrong { error } else { correct };
            let beta = Beta::new(params.a, params.b)
                .map_err(|e| BackendError::InvalidConfig(format!("beta: {e}")))?;
            let mut rng = rng_for(config.seed, Stream::Criticize, item.id as u64);
            beta.sample(&mut rng)
        }
    })
}

pub fn simulated_annotation(
    item: &Item,
    strategy: AnnotationStrategy,
    config: &SimulatorConfig,
) -> Result<AnnotationRecord, BackendError> {
    let label = simulated_label(item, config)?;
    let reasoning = (strategy == AnnotationStrategy::Cot).then(|| {
        format!(
            "simulated reasoning for item {}: it looks like {}",
            item.id, item.label_space[label]
        )
    });
    Ok(AnnotationRecord {
        item_id: item.id,
        machine_label: Some(label),
        reasoning,
        strategy,
        backend_id: SIMULATED_BACKEND_ID.into(),
        parse_ok: true,
    })
}

/// Map an estimate in `[0, 1]` onto the five-level scale.
fn level_for(eps: f64) -> u8 {
    1 + ((eps * 5.0).floor() as u8).min(4)
}

/// Simulated perplexity: confident verdicts (ε̂ near 0 or 1) get low perplexity.
fn perplexity_for(eps: f64) -> f64 {
    1.0 + 4.0 * (1.0 - (2.0 * eps - 1.0).abs())
}

/// One criticism record for any strategy, driven by the calibration channel.
pub fn simulated_criticism(
    item: &Item,
    annotation: &AnnotationRecord,
    strategy: CriticismStrategy,
    config: &SimulatorConfig,
) -> Result<CriticismRecord, BackendError> {
    if strategy == CriticismStrategy::Devil && annotation.reasoning.is_none() {
        return Err(BackendError::MissingAnnotatorReasoning(item.id));
    }
    let eps = simulated_error_probability(item, annotation.machine_label, config)?;
    let mut record = CriticismRecord::empty(item.id, strategy, SIMULATED_BACKEND_ID);
    if strategy != CriticismStrategy::Naive && strategy != CriticismStrategy::NaiveLogit {
        record.reasoning = Some(format!("simulated critique of item {}", item.id));
    }
    match strategy {
        CriticismStrategy::Naive | CriticismStrategy::Cot | CriticismStrategy::Devil => {
            record.error_probability = Some(eps);
        }
        CriticismStrategy::Mc => {
            let level = level_for(eps);
            record.error_level = Some(level);
            record.error_probability = Some(super::map_error_level(level as i64)?);
        }
        CriticismStrategy::NaiveLogit | CriticismStrategy::CotLogit => {
            record.logit_p_yes = Some(eps);
            record.logit_p_no = Some(1.0 - eps);
            record.error_probability = Some(super::logit_error_probability(eps, 1.0 - eps)?);
            record.decision = Some(Decision::from_bool(eps >= 0.5));
        }
        CriticismStrategy::CotPpl => {
            record.decision = Some(Decision::from_bool(eps >= 0.5));
            record.perplexity = Some(perplexity_for(eps));
        }
    }
    Ok(record)
}

/// Annotate every item of a data set that carries hidden truth.
pub fn simulate_annotator(dataset: &Dataset, config: &SimulatorConfig) -> Result<Vec<AnnotationRecord>, BackendError> {
    config.validate()?;
    dataset
        .items()
        .iter()
        .map(|item| simulated_annotation(item, AnnotationStrategy::Naive, config))
        .collect()
}

/// Naive-strategy criticism of every annotation.
pub fn simulate_criticizer(
    annotations: &[AnnotationRecord],
    dataset: &Dataset,
    config: &SimulatorConfig,
) -> Result<Vec<CriticismRecord>, BackendError> {
    config.validate()?;
    annotations
        .iter()
        .map(|annotation| {
            let item = dataset
                .item(annotation.item_id)
                .ok_or(BackendError::MissingTruth(annotation.item_id))?;
            simulated_criticism(item, annotation, CriticismStrategy::Naive, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemContent;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn dataset(n: usize, k: usize, truth: impl Fn(usize) -> usize) -> Dataset {
        let label_space: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        Dataset::new(
            (0..n)
                .map(|id| Item {
                    id,
                    content: ItemContent::Image {
                        path: format!("img/{id}.png"),
                    },
                    hidden_truth: Some(truth(id)),
                    label_space: label_space.clone(),
                    features: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn config(acc: f64, calibration: CriticCalibration, seed: u64) -> SimulatorConfig {
        SimulatorConfig {
            annotator_accuracy: acc,
            calibration,
            seed,
        }
    }

    #[test]
    fn perfect_annotator_copies_truth() {
        let ds = dataset(50, 10, |i| i % 10);
        let ann = simulate_annotator(&ds, &config(1.0, CriticCalibration::Perfect, 1)).unwrap();
        assert!(ann.iter().zip(ds.items()).all(|(a, it)| a.machine_label == it.hidden_truth));
    }

    #[test]
    fn always_wrong_annotator_is_uniform_over_wrong_labels() {
        let ds = dataset(10_000, 10, |_| 3);
        let ann = simulate_annotator(&ds, &config(0.0, CriticCalibration::Perfect, 11)).unwrap();
        let mut counts = [0f64; 10];
        for a in &ann {
            counts[a.machine_label.unwrap()] += 1.0;
        }
        assert_eq!(counts[3], 0.0);
        let expected = 10_000.0 / 9.0;
        let stat: f64 = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 3)
            .map(|(_, c)| (c - expected).powi(2) / expected)
            .sum();
        let critical = ChiSquared::new(8.0).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "chi-square {stat} >= {critical}");
    }

    #[test]
    fn accuracy_matches_binomial_band() {
        let ds = dataset(10_000, 10, |i| i % 10);
        let ann = simulate_annotator(&ds, &config(0.8, CriticCalibration::Perfect, 5)).unwrap();
        let acc = ann
            .iter()
            .zip(ds.items())
            .filter(|(a, it)| a.machine_label == it.hidden_truth)
            .count() as f64
            / 10_000.0;
        assert!((acc - 0.8).abs() <= 0.012, "accuracy {acc}");
    }

    #[test]
    fn same_seed_same_records() {
        let ds = dataset(200, 5, |i| i % 5);
        let cfg = SimulatorConfig {
            seed: 42,
            ..SimulatorConfig::default()
        };
        let a1 = simulate_annotator(&ds, &cfg).unwrap();
        let a2 = simulate_annotator(&ds, &cfg).unwrap();
        assert_eq!(a1, a2);
        let c1 = simulate_criticizer(&a1, &ds, &cfg).unwrap();
        let c2 = simulate_criticizer(&a2, &ds, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&c1).unwrap(),
            serde_json::to_string(&c2).unwrap()
        );
    }

    #[test]
    fn perfect_criticizer_flags_exactly_errors() {
        let ds = dataset(500, 4, |i| i % 4);
        let cfg = config(0.7, CriticCalibration::Perfect, 9);
        let ann = simulate_annotator(&ds, &cfg).unwrap();
        let crit = simulate_criticizer(&ann, &ds, &cfg).unwrap();
        for ((a, c), it) in ann.iter().zip(&crit).zip(ds.items()) {
            let wrong = a.machine_label != it.hidden_truth;
            assert_eq!(c.error_probability, Some(if wrong { 1.0 } else { 0.0 }));
        }
    }

    #[test]
    fn beta_channel_means() {
        let ds = dataset(20_000, 10, |i| i % 10);
        let cfg = config(
            0.5,
            CriticCalibration::Beta {
                error: BetaParams::new(9.0, 1.0),
                correct: BetaParams::new(1.0, 9.0),
            },
            3,
        );
        let ann = simulate_annotator(&ds, &cfg).unwrap();
        let crit = simulate_criticizer(&ann, &ds, &cfg).unwrap();
        let (mut sum_err, mut n_err, mut sum_ok, mut n_ok) = (0.0, 0.0, 0.0, 0.0);
        for ((a, c), it) in ann.iter().zip(&crit).zip(ds.items()) {
            let e = c.error_probability.unwrap();
            if a.machine_label != it.hidden_truth {
                sum_err += e;
                n_err += 1.0;
            } else {
                sum_ok += e;
                n_ok += 1.0;
            }
        }
        // Beta(9,1) has sd 0.083; 10k draws give a standard error under 0.001
        assert!((sum_err / n_err - 0.9).abs() < 0.01);
        assert!((sum_ok / n_ok - 0.1).abs() < 0.01);
    }

    #[test]
    fn missing_truth_is_an_error() {
        let mut item = dataset(1, 2, |_| 0).items()[0].clone();
        item.hidden_truth = None;
        assert!(matches!(
            simulated_label(&item, &SimulatorConfig::default()),
            Err(BackendError::MissingTruth(0))
        ));
    }

    #[test]
    fn level_mapping_is_monotone() {
        assert_eq!(level_for(0.0), 1);
        assert_eq!(level_for(0.5), 3);
        assert_eq!(level_for(1.0), 5);
    }
}
