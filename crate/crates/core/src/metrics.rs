//! Annotation quality, quality gain from review, and its area over budgets.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::CriticismRecord;
use crate::sampling::{self, DrawMode, SamplingError, SamplingRule};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("quality needs at least one item")]
    Empty,
    #[error("stability runs need at least two repetitions, got {0}")]
    TooFewRuns(usize),
    #[error("run {run} reported metrics {found:?}, expected {expected:?}")]
    InconsistentMetrics {
        run: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("criticism for item {0} has no error probability")]
    MissingEstimate(usize),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("writing curve: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing curve: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    ExactMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMeasure {
    pub similarity: Similarity,
    pub q_min: f64,
    pub q_max: f64,
}

impl Default for QualityMeasure {
    fn default() -> Self {
        Self {
            similarity: Similarity::ExactMatch,
            q_min: 0.0,
            q_max: 1.0,
        }
    }
}

impl QualityMeasure {
    pub fn similarity<L: PartialEq>(&self, a: &L, b: &L) -> f64 {
        match self.similarity {
            Similarity::ExactMatch => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Mean pairwise similarity of two label vectors.
pub fn quality<L: PartialEq>(a: &[L], b: &[L], measure: &QualityMeasure) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = a.iter().zip(b).map(|(x, y)| measure.similarity(x, y)).sum();
    Ok(total / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aqg {
    pub value: f64,
    /// Machine labels already reach maximal quality; the value is fixed at 1.
    pub degenerate: bool,
}

/// Gain in quality from correction, relative to the room for improvement.
pub fn aqg<L: PartialEq>(human: &[L], machine: &[L], corrected: &[L], measure: &QualityMeasure) -> Result<Aqg> {
    let q_machine = quality(human, machine, measure)?;
    let q_corrected = quality(human, corrected, measure)?;
    Ok(aqg_from_qualities(q_machine, q_corrected, measure))
}

pub fn aqg_from_qualities(q_machine: f64, q_corrected: f64, measure: &QualityMeasure) -> Aqg {
    let room = measure.q_max - q_machine;
    if room <= 0.0 {
        return Aqg {
            value: 1.0,
            degenerate: true,
        };
    }
    Aqg {
        value: (q_corrected - q_machine) / room,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub b: f64,
    pub budget: usize,
    pub aqg: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub rule: SamplingRule,
    pub n: usize,
    /// Spacing of evaluated budgets; 1 means every budget was evaluated.
    pub stride: usize,
    pub points: Vec<CurvePoint>,
    /// `(1/N) Σ_{B=0}^{N} AQG(B)`.
    pub abs: f64,
    /// Trapezoid rule over `b ∈ [0, 1]`, for comparison.
    pub abs_trapezoid: f64,
}

impl BudgetCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["b", "B", "AQG"])?;
        for p in &self.points {
            w.write_record([format!("{}", p.b), p.budget.to_string(), format!("{}", p.aqg)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Maximum number of budgets evaluated for one curve.
pub const MAX_GRID_POINTS: usize = 2001;

/// Budgets at which AQG is evaluated, always including 0 and `n`.
pub fn budget_grid(n: usize) -> (Vec<usize>, usize) {
    let stride = n.div_ceil(MAX_GRID_POINTS - 1).max(1);
    let mut grid: Vec<usize> = (0..=n).step_by(stride).collect();
    if *grid.last().unwrap() != n {
        grid.push(n);
    }
    (grid, stride)
}

/// Sum of a piecewise-linear interpolation of `values` at every integer in `0..=n`.
fn interpolated_sum(grid: &[usize], values: &[f64]) -> f64 {
    let mut total = values[0];
    for k in 1..grid.len() {
        let (b0, b1) = (grid[k - 1], grid[k]);
        let (v0, v1) = (values[k - 1], values[k]);
        let width = (b1 - b0) as f64;
        for b in b0 + 1..=b1 {
            let t = (b - b0) as f64 / width;
            total += v0 + t * (v1 - v0);
        }
    }
    total
}

/// AQG over every budget for a fixed instance, given a plan builder per budget.
fn budget_curve<L: PartialEq + Clone>(
    human: &[L],
    machine: &[L],
    rule: SamplingRule,
    measure: &QualityMeasure,
    mut plan_delta: impl FnMut(usize) -> Result<Vec<bool>>,
) -> Result<BudgetCurve> {
    let n = human.len();
    if machine.len() != n {
        return Err(MetricsError::LengthMismatch(n, machine.len()));
    }
    let q_machine = quality(human, machine, measure)?;
    let (grid, stride) = budget_grid(n);
    let mut points = Vec::with_capacity(grid.len());
    for &budget in &grid {
        let delta = plan_delta(budget)?;
        if delta.len() != n {
            return Err(MetricsError::LengthMismatch(n, delta.len()));
        }
        let corrected: Vec<L> = (0..n)
            .map(|i| if delta[i] { human[i].clone() } else { machine[i].clone() })
            .collect();
        let g = aqg_from_qualities(q_machine, quality(human, &corrected, measure)?, measure);
        points.push(CurvePoint {
            b: budget as f64 / n as f64,
            budget,
            aqg: g.value,
            degenerate: g.degenerate,
        });
    }
    let values: Vec<f64> = points.iter().map(|p| p.aqg).collect();
    let sum = interpolated_sum(&grid, &values);
    let abs = sum / n as f64;
    let abs_trapezoid = (sum - 0.5 * (values[0] + values[values.len() - 1])) / n as f64;
    Ok(BudgetCurve {
        rule,
        n,
        stride,
        points,
        abs,
        abs_trapezoid,
    })
}

/// Budget curve and ABS for bare error-probability estimates.
///
/// Every budget uses the same seed, so threshold selections are nested.
pub fn abs_from_estimates<L: PartialEq + Clone>(
    human: &[L],
    machine: &[L],
    eps: &[f64],
    rule: SamplingRule,
    seed: u64,
    mode: DrawMode,
    measure: &QualityMeasure,
) -> Result<BudgetCurve> {
    if eps.len() != human.len() {
        return Err(MetricsError::LengthMismatch(human.len(), eps.len()));
    }
    budget_curve(human, machine, rule, measure, |budget| {
        Ok(sampling::build_plan(eps, rule, budget, seed, mode)?.delta)
    })
}

/// Budget curve and ABS from criticism records (any strategy, any rule).
pub fn abs_metric<L: PartialEq + Clone>(
    human: &[L],
    machine: &[L],
    criticisms: &[CriticismRecord],
    rule: SamplingRule,
    seed: u64,
    mode: DrawMode,
    measure: &QualityMeasure,
) -> Result<BudgetCurve> {
    if criticisms.len() != human.len() {
        return Err(MetricsError::LengthMismatch(human.len(), criticisms.len()));
    }
    if rule == SamplingRule::PplPriority {
        return budget_curve(human, machine, rule, measure, |budget| {
            Ok(sampling::build_ppl_plan(criticisms, budget, seed)?.delta)
        });
    }
    let eps = sampling::estimates(criticisms)
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or(MetricsError::MissingEstimate(i)))
        .collect::<Result<Vec<f64>>>()?;
    abs_from_estimates(human, machine, &eps, rule, seed, mode, measure)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`).
    pub std: f64,
}

/// Repeat a seeded experiment and summarise every metric it reports.
pub fn stability_runs<F>(seeds: &[u64], mut experiment: F) -> Result<BTreeMap<String, Summary>>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.len() < 2 {
        return Err(MetricsError::TooFewRuns(seeds.len()));
    }
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut expected: Option<Vec<String>> = None;
    for (run, &seed) in seeds.iter().enumerate() {
        let metrics = experiment(seed)?;
        let keys: Vec<String> = metrics.keys().cloned().collect();
        match &expected {
            None => expected = Some(keys),
            Some(e) if *e != keys => {
                return Err(MetricsError::InconsistentMetrics {
                    run,
                    expected: e.clone(),
                    found: keys,
                })
            }
            Some(_) => {}
        }
        for (k, v) in metrics {
            samples.entry(k).or_default().push(v);
        }
    }
    Ok(samples
        .into_iter()
        .map(|(k, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (k, Summary { mean, std: var.sqrt() })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{simulate_annotator, simulate_criticizer, BetaParams, CriticCalibration, SimulatorConfig};
    use crate::data::{Dataset, Item, ItemContent};
    use proptest::prelude::*;

    const M: QualityMeasure = QualityMeasure {
        similarity: Similarity::ExactMatch,
        q_min: 0.0,
        q_max: 1.0,
    };

    #[test]
    fn quality_examples() {
        assert_eq!(quality(&[1, 2, 3], &[1, 2, 3], &M).unwrap(), 1.0);
        assert_eq!(quality(&[1, 2, 3, 4], &[1, 2, 0, 0], &M).unwrap(), 0.5);
        assert_eq!(quality(&[1, 2], &[3, 4], &M).unwrap(), 0.0);
        assert!(quality(&[1], &[1, 2], &M).is_err());
        assert!(quality::<usize>(&[], &[], &M).is_err());
    }

    #[test]
    fn aqg_examples() {
        // Q(h,m) = 0.8, Q(h,c) = 0.95
        let h: Vec<usize> = (0..20).collect();
        let mut m = h.clone();
        for x in m.iter_mut().take(4) {
            *x += 100;
        }
        let mut c = h.clone();
        c[0] += 100;
        let g = aqg(&h, &m, &c, &M).unwrap();
        assert!((g.value - 0.75).abs() < 1e-12);
        assert_eq!(aqg(&h, &m, &m, &M).unwrap().value, 0.0);
        let g = aqg(&h, &h, &h, &M).unwrap();
        assert_eq!(g, Aqg { value: 1.0, degenerate: true });
    }

    #[test]
    fn grid_shapes() {
        let (g, s) = budget_grid(10);
        assert_eq!((g.len(), s), (11, 1));
        let (g, s) = budget_grid(2000);
        assert_eq!((g.len(), s), (2001, 1));
        let (g, s) = budget_grid(10_000);
        assert!(g.len() <= MAX_GRID_POINTS);
        assert_eq!((g[0], *g.last().unwrap(), s), (0, 10_000, 5));
        let (g, _) = budget_grid(4003);
        assert!(g.len() <= MAX_GRID_POINTS && *g.last().unwrap() == 4003);
    }

    #[test]
    fn interpolation_is_exact_for_linear_curves() {
        let (grid, _) = budget_grid(4003);
        let values: Vec<f64> = grid.iter().map(|b| *b as f64 / 4003.0).collect();
        let expected: f64 = (0..=4003).map(|b| b as f64 / 4003.0).sum();
        assert!((interpolated_sum(&grid, &values) - expected).abs() < 1e-8);
    }

    fn brute_force_abs(h: &[usize], m: &[usize], eps: &[f64], seed: u64) -> f64 {
        let n = h.len();
        let mut total = 0.0;
        for b in 0..=n {
            let plan = sampling::build_plan(eps, SamplingRule::Threshold, b, seed, DrawMode::HardCap).unwrap();
            let c: Vec<usize> = (0..n).map(|i| if plan.delta[i] { h[i] } else { m[i] }).collect();
            total += aqg(h, m, &c, &M).unwrap().value;
        }
        total / n as f64
    }

    #[test]
    fn perfect_criticizer_closed_form() {
        // 12 items, errors at 2, 5, 7, 11
        let h: Vec<usize> = vec![0; 12];
        let mut m = h.clone();
        for i in [2, 5, 7, 11] {
            m[i] = 1;
        }
        let eps: Vec<f64> = m.iter().map(|&x| x as f64).collect();
        let curve = abs_from_estimates(&h, &m, &eps, SamplingRule::Threshold, 0, DrawMode::HardCap, &M).unwrap();
        let e = 4.0;
        let closed: f64 = (0..=12).map(|b| (b as f64 / e).min(1.0)).sum::<f64>() / 12.0;
        assert!((curve.abs - closed).abs() < 1e-12);
        assert!((curve.abs - brute_force_abs(&h, &m, &eps, 0)).abs() < 1e-12);
    }

    #[test]
    fn machine_equals_human_gives_unit_abs() {
        let h = vec![3usize; 9];
        let curve =
            abs_from_estimates(&h, &h, &[0.2; 9], SamplingRule::Threshold, 0, DrawMode::HardCap, &M).unwrap();
        // the discrete sum has N + 1 terms over N; the area itself is exactly 1
        assert_eq!(curve.abs, 10.0 / 9.0);
        assert!((curve.abs_trapezoid - 1.0).abs() < 1e-12);
        assert!(curve.points.iter().all(|p| p.degenerate && p.aqg == 1.0));
    }

    fn dataset(n: usize) -> Dataset {
        let labels: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        Dataset::new(
            (0..n)
                .map(|id| Item {
                    id,
                    content: ItemContent::Image { path: format!("{id}.png") },
                    hidden_truth: Some(id % 10),
                    label_space: labels.clone(),
                    features: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn uninformative_criticizer_abs_near_half() {
        let ds = dataset(2000);
        let cfg = SimulatorConfig {
            annotator_accuracy: 0.7,
            calibration: CriticCalibration::Beta {
                error: BetaParams::new(1.0, 1.0),
                correct: BetaParams::new(1.0, 1.0),
            },
            seed: 4,
        };
        let ann = simulate_annotator(&ds, &cfg).unwrap();
        let crit = simulate_criticizer(&ann, &ds, &cfg).unwrap();
        let h = ds.hidden_truths().unwrap();
        let m: Vec<usize> = ann.iter().map(|a| a.machine_label.unwrap()).collect();
        let curve = abs_metric(&h, &m, &crit, SamplingRule::Threshold, 4, DrawMode::HardCap, &M).unwrap();
        assert!((curve.abs - 0.5).abs() <= 0.05, "abs {}", curve.abs);
    }

    #[test]
    fn csv_columns() {
        let h = vec![0usize, 0];
        let m = vec![1usize, 0];
        let curve =
            abs_from_estimates(&h, &m, &[0.9, 0.1], SamplingRule::Threshold, 0, DrawMode::HardCap, &M).unwrap();
        let mut out = Vec::new();
        curve.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "b,B,AQG\n0,0,0\n0.5,1,1\n1,2,1\n");
    }

    #[test]
    fn stability_examples() {
        let constant = stability_runs(&[1, 2, 3], |_| Ok(BTreeMap::from([("x".to_string(), 2.5)]))).unwrap();
        assert_eq!(constant["x"], Summary { mean: 2.5, std: 0.0 });
        assert!(matches!(
            stability_runs(&[1], |_| Ok(BTreeMap::new())),
            Err(MetricsError::TooFewRuns(1))
        ));
    }

    #[test]
    fn stability_of_simulated_accuracy() {
        let ds = dataset(10_000);
        let truth = ds.hidden_truths().unwrap();
        let stats = stability_runs(&[11, 12, 13, 14, 15], |seed| {
            let cfg = SimulatorConfig {
                annotator_accuracy: 0.8,
                seed,
                ..SimulatorConfig::default()
            };
            let ann = simulate_annotator(&ds, &cfg).unwrap();
            let m: Vec<usize> = ann.iter().map(|a| a.machine_label.unwrap()).collect();
            Ok(BTreeMap::from([("accuracy".to_string(), quality(&truth, &m, &M)?)]))
        })
        .unwrap();
        assert!(stats["accuracy"].std < 0.02);
        assert!((stats["accuracy"].mean - 0.8).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn quality_is_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            prop_assert_eq!(quality(&a, &b, &M).unwrap(), quality(&b, &a, &M).unwrap());
        }

        #[test]
        fn threshold_curve_is_bounded_and_monotone(
            rows in prop::collection::vec((0usize..3, 0usize..3, 0.0f64..=1.0), 1..25),
            seed in any::<u64>(),
        ) {
            let h: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let m: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let eps: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let curve = abs_from_estimates(&h, &m, &eps, SamplingRule::Threshold, seed, DrawMode::HardCap, &M).unwrap();
            let first = &curve.points[0];
            prop_assert!(first.degenerate || first.aqg == 0.0);
            for w in curve.points.windows(2) {
                prop_assert!(w[1].aqg >= w[0].aqg);
            }
            prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.aqg)));
        }

        #[test]
        fn perfect_criticizer_dominates(
            rows in prop::collection::vec((0usize..3, 0usize..3, 0.0f64..=1.0), 1..20),
            seed in any::<u64>(),
        ) {
            let h: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let m: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let eps: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let perfect: Vec<f64> = h.iter().zip(&m).map(|(a, b)| if a != b { 1.0 } else { 0.0 }).collect();
            let other = brute_force_abs(&h, &m, &eps, seed);
            let best = brute_force_abs(&h, &m, &perfect, seed);
            prop_assert!(best >= other - 1e-12);
        }
    }
}
