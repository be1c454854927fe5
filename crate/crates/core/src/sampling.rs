//! Budgeted selection of items for human review.
//!
//! Error-probability estimates `ε̂` are transformed into review probabilities
//! `π`, from which indicators `δ` are drawn. A plan never marks more than `B`
//! items in hard-cap mode, and threshold and perplexity-priority plans are
//! exact top-`B` selections.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{CriticismRecord, CriticismStrategy, Decision};
use crate::rng::{uniform_for, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("error probability {value} at index {index} is outside [0, 1]")]
    InvalidErrorProbability { index: usize, value: f64 },
    #[error("review probability {value} at index {index} is outside [0, 1]")]
    InvalidReviewProbability { index: usize, value: f64 },
    #[error("budget {budget} exceeds the {n} available items")]
    BudgetTooLarge { budget: usize, n: usize },
    #[error("budget proportion {0} is outside [0, 1]")]
    InvalidProportion(f64),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("perplexity priority needs cot_ppl records, item {item_id} is {strategy:?}")]
    MixedStrategies { item_id: usize, strategy: CriticismStrategy },
    #[error("item {0} lacks a decision or perplexity")]
    MissingPerplexity(usize),
    #[error("rule {0} needs criticism records, not bare estimates")]
    NeedsRecords(&'static str),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SamplingRule {
    Normalization,
    Exponential { beta: f64 },
    Threshold,
    PplPriority,
}

impl SamplingRule {
    pub const DEFAULT_BETAS: [f64; 2] = [10.0, 100.0];

    pub fn name(&self) -> &'static str {
        match self {
            SamplingRule::Normalization => "normalization",
            SamplingRule::Exponential { .. } => "exponential",
            SamplingRule::Threshold => "threshold",
            SamplingRule::PplPriority => "ppl_priority",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// Truncate over-budget draws to the `B` largest estimates.
    #[default]
    HardCap,
    /// Raw Bernoulli draws; the budget holds only in expectation.
    Expectation,
}

/// A budget given either as a count or as a proportion of the data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Count(usize),
    Proportion(f64),
}

impl Budget {
    /// Item count for a data set of size `n`; proportions round down.
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            Budget::Count(b) if b <= n => Ok(b),
            Budget::Count(b) => Err(SamplingError::BudgetTooLarge { budget: b, n }),
            Budget::Proportion(p) if (0.0..=1.0).contains(&p) => Ok(((p * n as f64) + 1e-9).floor() as usize),
            Budget::Proportion(p) => Err(SamplingError::InvalidProportion(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    #[serde(flatten)]
    pub rule: SamplingRule,
    pub budget: usize,
    pub proportion: f64,
    pub pi: Vec<f64>,
    pub delta: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub seed: u64,
    pub mode: DrawMode,
    /// Normalization saw all-zero estimates and used uniform `B/N`.
    #[serde(default)]
    pub uniform_fallback: bool,
    /// Exponential weighting could not meet the budget with `α ≤ 1`, so draws were hard-capped.
    #[serde(default)]
    pub forced_hard_cap: bool,
}

impl SamplingPlan {
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn reviewed(&self) -> usize {
        self.delta.iter().filter(|d| **d).count()
    }

    /// Ids of items selected for review, ascending.
    pub fn selected_ids(&self) -> Vec<usize> {
        self.delta
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.then_some(i))
            .collect()
    }
}

fn check_estimates(eps: &[f64]) -> Result<()> {
    for (index, &value) in eps.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(SamplingError::InvalidErrorProbability { index, value });
        }
    }
    Ok(())
}

fn check_budget(budget: usize, n: usize) -> Result<()> {
    if budget > n {
        return Err(SamplingError::BudgetTooLarge { budget, n });
    }
    Ok(())
}

/// `π_i = min(1, B·ε̂_i / Σε̂)`, or uniform `B/N` when every estimate is zero.
pub fn transform_normalization(eps: &[f64], budget: usize) -> Result<Vec<f64>> {
    check_estimates(eps)?;
    check_budget(budget, eps.len())?;
    let total: f64 = eps.iter().sum();
    if total == 0.0 {
        let u = if eps.is_empty() { 0.0 } else { budget as f64 / eps.len() as f64 };
        return Ok(vec![u; eps.len()]);
    }
    Ok(eps.iter().map(|e| (budget as f64 * e / total).min(1.0)).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn exponential_sum(eps: &[f64], beta: f64, alpha: f64) -> f64 {
    eps.iter().map(|e| sigmoid(beta * (e - alpha))).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialTransform {
    pub alpha: f64,
    pub pi: Vec<f64>,
    /// `Σπ > B` even at `α = 1`.
    pub over_budget: bool,
}

/// `π_i = σ(β(ε̂_i − α))` with the smallest `α ∈ [0, 1]` giving `Σπ ≤ B`.
pub fn transform_exponential(eps: &[f64], budget: usize, beta: f64) -> Result<ExponentialTransform> {
    check_estimates(eps)?;
    check_budget(budget, eps.len())?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(SamplingError::InvalidBeta(beta));
    }
    let b = budget as f64;
    let finish = |alpha: f64, over_budget: bool| ExponentialTransform {
        alpha,
        pi: eps.iter().map(|e| sigmoid(beta * (e - alpha))).collect(),
        over_budget,
    };
    if exponential_sum(eps, beta, 0.0) <= b {
        return Ok(finish(0.0, false));
    }
    if exponential_sum(eps, beta, 1.0) > b {
        return Ok(finish(1.0, true));
    }
    // invariant: sum(lo) > B >= sum(hi)
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        if b - exponential_sum(eps, beta, hi) <= 0.5 || hi - lo <= f64::EPSILON {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if exponential_sum(eps, beta, mid) <= b {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(finish(hi, false))
}

/// Order indices by descending estimate, breaking ties with seeded random keys.
fn descending_order(eps: &[f64], candidates: impl Iterator<Item = usize>, seed: u64) -> Vec<usize> {
    let mut keyed: Vec<(usize, f64, f64)> = candidates
        .map(|i| (i, eps[i], uniform_for(seed, Stream::TieBreak, i as u64)))
        .collect();
    keyed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
            .then(a.0.cmp(&b.0))
    });
    keyed.into_iter().map(|(i, _, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTransform {
    /// Estimate of the `B`-th ranked item; `None` when `B = 0`.
    pub tau: Option<f64>,
    pub pi: Vec<f64>,
}

/// Exact top-`B` selection by estimate with seeded tie-breaking at the boundary.
pub fn transform_threshold(eps: &[f64], budget: usize, seed: u64) -> Result<ThresholdTransform> {
    check_estimates(eps)?;
    check_budget(budget, eps.len())?;
    let order = descending_order(eps, 0..eps.len(), seed);
    let mut pi = vec![0.0; eps.len()];
    for &i in &order[..budget] {
        pi[i] = 1.0;
    }
    let tau = budget.checked_sub(1).map(|k| eps[order[k]]);
    Ok(ThresholdTransform { tau, pi })
}

/// Bernoulli draws `δ_i ~ B(π_i)` from `(seed, i)`-derived randomness.
pub fn draw_indicators(pi: &[f64], eps: &[f64], budget: usize, seed: u64, mode: DrawMode) -> Result<Vec<bool>> {
    if eps.len() != pi.len() {
        return Err(SamplingError::LengthMismatch {
            expected: pi.len(),
            actual: eps.len(),
        });
    }
    for (index, &value) in pi.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(SamplingError::InvalidReviewProbability { index, value });
        }
    }
    let mut delta: Vec<bool> = pi
        .iter()
        .enumerate()
        .map(|(i, &p)| uniform_for(seed, Stream::Indicators, i as u64) < p)
        .collect();
    if mode == DrawMode::HardCap {
        enforce_cap(&mut delta, eps, budget, seed);
    }
    Ok(delta)
}

fn enforce_cap(delta: &mut [bool], eps: &[f64], budget: usize, seed: u64) {
    let drawn = delta.iter().filter(|d| **d).count();
    if drawn <= budget {
        return;
    }
    let order = descending_order(eps, (0..delta.len()).filter(|&i| delta[i]), seed);
    for &i in &order[budget..] {
        delta[i] = false;
    }
}

/// Review order for perplexity-scored criticisms: "yes" verdicts first by
/// ascending perplexity, then "no" verdicts by descending perplexity.
pub fn ppl_priority_ranking(records: &[CriticismRecord]) -> Result<Vec<usize>> {
    let mut keyed = Vec::with_capacity(records.len());
    for r in records {
        if r.strategy != CriticismStrategy::CotPpl {
            return Err(SamplingError::MixedStrategies {
                item_id: r.item_id,
                strategy: r.strategy,
            });
        }
        let (Some(decision), Some(ppl)) = (r.decision, r.perplexity) else {
            return Err(SamplingError::MissingPerplexity(r.item_id));
        };
        keyed.push((r.item_id, decision == Decision::Yes, ppl));
    }
    keyed.sort_by(|a, b| {
        let group = b.1.cmp(&a.1);
        let within = if a.1 {
            a.2.partial_cmp(&b.2)
        } else {
            b.2.partial_cmp(&a.2)
        }
        .unwrap_or(Ordering::Equal);
        group.then(within).then(a.0.cmp(&b.0))
    });
    Ok(keyed.into_iter().map(|(id, _, _)| id).collect())
}

/// Indicators for the first `B` records in perplexity priority, indexed by item id.
pub fn ppl_priority_order(records: &[CriticismRecord], budget: usize) -> Result<Vec<bool>> {
    check_budget(budget, records.len())?;
    let ranking = ppl_priority_ranking(records)?;
    let n = records.iter().map(|r| r.item_id + 1).max().unwrap_or(0);
    let mut delta = vec![false; n];
    for &id in &ranking[..budget] {
        delta[id] = true;
    }
    Ok(delta)
}

/// Transform estimates and draw indicators under one rule.
pub fn build_plan(eps: &[f64], rule: SamplingRule, budget: usize, seed: u64, mode: DrawMode) -> Result<SamplingPlan> {
    check_estimates(eps)?;
    check_budget(budget, eps.len())?;
    let n = eps.len();
    let mut plan = SamplingPlan {
        rule,
        budget,
        proportion: if n == 0 { 0.0 } else { budget as f64 / n as f64 },
        pi: Vec::new(),
        delta: Vec::new(),
        alpha: None,
        tau: None,
        seed,
        mode,
        uniform_fallback: false,
        forced_hard_cap: false,
    };
    let draw_mode = match rule {
        SamplingRule::Normalization => {
            plan.uniform_fallback = eps.iter().all(|e| *e == 0.0);
            plan.pi = transform_normalization(eps, budget)?;
            mode
        }
        SamplingRule::Exponential { beta } => {
            let t = transform_exponential(eps, budget, beta)?;
            plan.alpha = Some(t.alpha);
            plan.pi = t.pi;
            plan.forced_hard_cap = t.over_budget && mode == DrawMode::Expectation;
            if t.over_budget {
                DrawMode::HardCap
            } else {
                mode
            }
        }
        SamplingRule::Threshold => {
            let t = transform_threshold(eps, budget, seed)?;
            plan.tau = t.tau;
            plan.pi = t.pi;
            DrawMode::HardCap
        }
        SamplingRule::PplPriority => return Err(SamplingError::NeedsRecords("ppl_priority")),
    };
    plan.delta = draw_indicators(&plan.pi, eps, budget, seed, draw_mode)?;
    Ok(plan)
}

/// Perplexity-priority plan; `π` equals the 0/1 selection.
pub fn build_ppl_plan(records: &[CriticismRecord], budget: usize, seed: u64) -> Result<SamplingPlan> {
    let delta = ppl_priority_order(records, budget)?;
    let n = delta.len();
    Ok(SamplingPlan {
        rule: SamplingRule::PplPriority,
        budget,
        proportion: if n == 0 { 0.0 } else { budget as f64 / n as f64 },
        pi: delta.iter().map(|d| if *d { 1.0 } else { 0.0 }).collect(),
        delta,
        alpha: None,
        tau: None,
        seed,
        mode: DrawMode::HardCap,
        uniform_fallback: false,
        forced_hard_cap: false,
    })
}

/// Error-probability estimates indexed by item id; `None` for cot_ppl records.
pub fn estimates(records: &[CriticismRecord]) -> Vec<Option<f64>> {
    let n = records.iter().map(|r| r.item_id + 1).max().unwrap_or(0);
    let mut out = vec![None; n];
    for r in records {
        out[r.item_id] = r.error_probability;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn normalization_examples() {
        assert!(close(&transform_normalization(&[0.5, 0.3, 0.2], 1).unwrap(), &[0.5, 0.3, 0.2]));
        assert!(close(&transform_normalization(&[0.8, 0.1, 0.1], 3).unwrap(), &[1.0, 0.3, 0.3]));
        assert!(close(&transform_normalization(&[0.0; 4], 2).unwrap(), &[0.5; 4]));
    }

    #[test]
    fn preconditions() {
        assert!(matches!(
            transform_normalization(&[0.1], 2),
            Err(SamplingError::BudgetTooLarge { .. })
        ));
        assert!(transform_normalization(&[1.2], 0).is_err());
        assert!(transform_exponential(&[0.5], 1, 0.0).is_err());
        assert_eq!(Budget::Proportion(0.25).resolve(10).unwrap(), 2);
        assert_eq!(Budget::Proportion(0.3).resolve(10).unwrap(), 3);
    }

    #[test]
    fn exponential_center() {
        let eps = [0.1, 0.4, 0.6, 0.9];
        let t = transform_exponential(&eps, 2, 10.0).unwrap();
        for (e, p) in eps.iter().zip(&t.pi) {
            assert!((p - sigmoid(10.0 * (e - t.alpha))).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn exponential_meets_budget_on_uniform_estimates() {
        let eps: Vec<f64> = (0..1000).map(|i| uniform_for(17, Stream::MonteCarlo, i)).collect();
        let t = transform_exponential(&eps, 100, 100.0).unwrap();
        let s: f64 = t.pi.iter().sum();
        assert!((99.5..=100.5).contains(&s), "sum {s}");
        assert!(!t.over_budget);
    }

    #[test]
    fn exponential_over_budget_falls_back_to_cap() {
        // every estimate at 1.0 gives π = 0.5 at α = 1, so Σπ = N/2 > B
        let eps = vec![1.0; 10];
        let plan = build_plan(&eps, SamplingRule::Exponential { beta: 10.0 }, 2, 3, DrawMode::Expectation).unwrap();
        assert!(plan.forced_hard_cap);
        assert!(plan.reviewed() <= 2);
    }

    #[test]
    fn exponential_limit_matches_threshold() {
        let eps: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 / 1000.0 + 0.001).collect();
        for k in [1, 10, 50, 199] {
            let e = transform_exponential(&eps, k, 1e6).unwrap();
            let t = transform_threshold(&eps, k, 0).unwrap();
            let es: Vec<bool> = e.pi.iter().map(|p| *p > 0.5).collect();
            let ts: Vec<bool> = t.pi.iter().map(|p| *p == 1.0).collect();
            assert_eq!(es, ts, "k={k}");
        }
    }

    #[test]
    fn threshold_examples() {
        let t = transform_threshold(&[0.9, 0.7, 0.2, 0.1], 2, 0).unwrap();
        assert_eq!(t.pi, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.tau, Some(0.7));
        let t = transform_threshold(&[0.5, 0.5, 0.5], 1, 0).unwrap();
        assert_eq!(t.pi.iter().sum::<f64>(), 1.0);
        let t0 = transform_threshold(&[0.5, 0.2], 0, 0).unwrap();
        assert_eq!(t0.pi, vec![0.0, 0.0]);
        assert_eq!(t0.tau, None);
    }

    #[test]
    fn threshold_ties_vary_with_seed() {
        let eps = vec![0.5; 20];
        let picks: std::collections::BTreeSet<Vec<usize>> = (0..20)
            .map(|s| {
                let t = transform_threshold(&eps, 3, s).unwrap();
                (0..20).filter(|&i| t.pi[i] == 1.0).collect()
            })
            .collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn indicator_examples() {
        let eps = vec![0.5; 8];
        assert!(draw_indicators(&[0.0; 8], &eps, 8, 1, DrawMode::Expectation)
            .unwrap()
            .iter()
            .all(|d| !d));
        assert!(draw_indicators(&[1.0; 8], &eps, 8, 1, DrawMode::HardCap)
            .unwrap()
            .iter()
            .all(|d| *d));
        let eps = vec![0.3; 10_000];
        let d = draw_indicators(&vec![0.5; 10_000], &eps, 5000, 9, DrawMode::Expectation).unwrap();
        let s = d.iter().filter(|x| **x).count() as i64;
        assert!((s - 5000).abs() <= 150, "{s}");
    }

    #[test]
    fn hard_cap_keeps_largest_estimates() {
        let eps = [0.1, 0.9, 0.5, 0.7];
        let d = draw_indicators(&[1.0; 4], &eps, 2, 0, DrawMode::HardCap).unwrap();
        assert_eq!(d, vec![false, true, false, true]);
    }

    fn ppl(id: usize, yes: bool, p: f64) -> CriticismRecord {
        let mut r = CriticismRecord::empty(id, CriticismStrategy::CotPpl, "t");
        r.decision = Some(Decision::from_bool(yes));
        r.perplexity = Some(p);
        r
    }

    #[test]
    fn ppl_priority_examples() {
        let recs = vec![ppl(0, true, 2.0), ppl(1, true, 9.0), ppl(2, false, 9.0), ppl(3, false, 2.0)];
        assert_eq!(ppl_priority_ranking(&recs).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(ppl_priority_order(&recs, 2).unwrap(), vec![true, true, false, false]);
        assert_eq!(ppl_priority_order(&recs, 3).unwrap(), vec![true, true, true, false]);
        assert_eq!(ppl_priority_order(&recs, 0).unwrap(), vec![false; 4]);
        let mut mixed = recs.clone();
        mixed.push(CriticismRecord::empty(4, CriticismStrategy::Naive, "t"));
        assert!(matches!(
            ppl_priority_order(&mixed, 1),
            Err(SamplingError::MixedStrategies { .. })
        ));
    }

    #[test]
    fn ppl_ties_broken_by_id() {
        let recs = vec![ppl(2, true, 3.0), ppl(0, true, 3.0), ppl(1, true, 3.0)];
        assert_eq!(ppl_priority_ranking(&recs).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn plan_serializes_rule_inline() {
        let plan = build_plan(&[0.9, 0.1], SamplingRule::Exponential { beta: 10.0 }, 1, 0, DrawMode::HardCap).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["rule"], "exponential");
        assert_eq!(v["beta"], 10.0);
        let back: SamplingPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
    }

    fn rule_strategy() -> impl Strategy<Value = SamplingRule> {
        prop_oneof![
            Just(SamplingRule::Normalization),
            (1.0f64..200.0).prop_map(|beta| SamplingRule::Exponential { beta }),
            Just(SamplingRule::Threshold),
        ]
    }

    proptest! {
        #[test]
        fn budget_safety_hard_cap(
            eps in prop::collection::vec(0.0f64..=1.0, 1..60),
            frac in 0.0f64..=1.0,
            rule in rule_strategy(),
            seed in any::<u64>(),
        ) {
            let b = (frac * eps.len() as f64).floor() as usize;
            let plan = build_plan(&eps, rule, b, seed, DrawMode::HardCap).unwrap();
            prop_assert!(plan.reviewed() <= b);
            for (d, p) in plan.delta.iter().zip(&plan.pi) {
                prop_assert!((0.0..=1.0).contains(p));
                prop_assert!(!*d || *p > 0.0);
            }
        }

        #[test]
        fn threshold_safe_in_expectation_mode(
            eps in prop::collection::vec(0.0f64..=1.0, 1..60),
            frac in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let b = (frac * eps.len() as f64).floor() as usize;
            let plan = build_plan(&eps, SamplingRule::Threshold, b, seed, DrawMode::Expectation).unwrap();
            prop_assert_eq!(plan.reviewed(), b);
            prop_assert!(plan.pi.iter().all(|p| *p == 0.0 || *p == 1.0));
        }

        #[test]
        fn transforms_are_monotone(
            eps in prop::collection::vec(0.0f64..=1.0, 2..40),
            frac in 0.0f64..=1.0,
            beta in 1.0f64..500.0,
        ) {
            let b = (frac * eps.len() as f64).floor() as usize;
            let norm = transform_normalization(&eps, b).unwrap();
            let exp = transform_exponential(&eps, b, beta).unwrap().pi;
            for i in 0..eps.len() {
                for j in 0..eps.len() {
                    if eps[i] >= eps[j] {
                        prop_assert!(norm[i] >= norm[j]);
                        prop_assert!(exp[i] >= exp[j]);
                    }
                }
            }
        }

        #[test]
        fn plans_are_deterministic(
            eps in prop::collection::vec(0.0f64..=1.0, 1..40),
            rule in rule_strategy(),
            seed in any::<u64>(),
        ) {
            let b = eps.len() / 3;
            let a = build_plan(&eps, rule, b, seed, DrawMode::Expectation).unwrap();
            let c = build_plan(&eps, rule, b, seed, DrawMode::Expectation).unwrap();
            prop_assert_eq!(a, c);
        }
    }
}
