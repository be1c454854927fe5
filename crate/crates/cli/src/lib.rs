//! Subcommand implementations for the `act` binary and the review HTTP API.

pub mod server;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use act_core::backends::{Backend, BackendConfig, CriticismRecord, CriticismStrategy, SimulatorConfig};
use act_core::data::{self, AnnotationRecord, AnnotationStrategy, Dataset};
use act_core::metrics::{self, QualityMeasure};
use act_core::pipeline::{self, PipelineConfig, Run, RunOptions, RunState, Stage, TrainStageConfig};
use act_core::sampling::{Budget, DrawMode, SamplingPlan, SamplingRule};
use act_core::trainer::synthetic::{self, GapExperimentConfig, GapSummary};
use act_core::trainer::TrainReport;
use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Backend from a TOML file, or the default simulator.
pub fn load_backend(path: Option<&Path>) -> Result<Backend> {
    let config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<BackendConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BackendConfig::simulated(SimulatorConfig::default()),
    };
    Ok(Backend::connect(&config)?)
}

pub fn annotate(
    dataset: &Path,
    backend: Option<&Path>,
    strategy: AnnotationStrategy,
    out: &Path,
    parallelism: usize,
) -> Result<usize> {
    let dataset = Dataset::load(dataset)?;
    let backend = load_backend(backend)?;
    let records = pipeline::annotate_all(&dataset, strategy, &backend, parallelism)?;
    data::write_jsonl(out, &records)?;
    Ok(records.iter().filter(|r| !r.parse_ok).count())
}

pub fn criticize(
    dataset: &Path,
    annotations: &Path,
    backend: Option<&Path>,
    strategy: CriticismStrategy,
    out: &Path,
    parallelism: usize,
) -> Result<usize> {
    let dataset = Dataset::load(dataset)?;
    let mut annotations: Vec<AnnotationRecord> = data::read_jsonl(annotations)?;
    annotations.sort_by_key(|a| a.item_id);
    let backend = load_backend(backend)?;
    if strategy.is_whitebox() && !backend.exposes_logprobs() {
        bail!("strategy {strategy:?} needs a backend that returns log-probabilities");
    }
    let records = pipeline::criticize_all(&dataset, &annotations, strategy, &backend, parallelism)?;
    data::write_jsonl(out, &records)?;
    Ok(records.iter().filter(|r| !r.parse_ok).count())
}

fn sorted_criticisms(path: &Path) -> Result<Vec<CriticismRecord>> {
    let mut records: Vec<CriticismRecord> = data::read_jsonl(path)?;
    records.sort_by_key(|r| r.item_id);
    Ok(records)
}

pub fn sample(criticisms: &Path, rule: SamplingRule, budget: Budget, seed: u64, mode: DrawMode) -> Result<SamplingPlan> {
    let records = sorted_criticisms(criticisms)?;
    let b = budget.resolve(records.len())?;
    Ok(pipeline::plan_from_criticisms(&records, rule, b, seed, mode)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n_items: usize,
    pub quality_machine: f64,
    pub rule: SamplingRule,
    pub abs: f64,
    pub abs_trapezoid: f64,
}

/// Machine quality and ABS for a criticizer on data with hidden truth.
pub fn metrics(
    dataset: &Path,
    annotations: &Path,
    criticisms: &Path,
    rule: SamplingRule,
    seed: u64,
    curve_out: Option<&Path>,
) -> Result<MetricsReport> {
    let dataset = Dataset::load(dataset)?;
    let Some(truth) = dataset.hidden_truths() else {
        bail!("metrics need hidden_truth on every item");
    };
    let truth: Vec<Option<usize>> = truth.into_iter().map(Some).collect();
    let mut annotations: Vec<AnnotationRecord> = data::read_jsonl(annotations)?;
    annotations.sort_by_key(|a| a.item_id);
    let machine: Vec<Option<usize>> = annotations.iter().map(|a| a.machine_label).collect();
    let records = sorted_criticisms(criticisms)?;
    let measure = QualityMeasure::default();
    let curve = metrics::abs_metric(&truth, &machine, &records, rule, seed, DrawMode::HardCap, &measure)?;
    if let Some(path) = curve_out {
        curve.save_csv(path)?;
    }
    Ok(MetricsReport {
        n_items: truth.len(),
        quality_machine: metrics::quality(&truth, &machine, &measure)?,
        rule,
        abs: curve.abs,
        abs_trapezoid: curve.abs_trapezoid,
    })
}

pub fn run(config: &Path, stop_after: Option<Stage>) -> Result<(PathBuf, Option<RunState>)> {
    let config = PipelineConfig::load(config)?;
    let run = pipeline::run_pipeline_with(&config, RunOptions { stop_after })?;
    Ok((run.dir().to_path_buf(), run.state().cloned()))
}

pub fn import_reviews(runs: &Path, run_id: &str, file: &Path) -> Result<RunState> {
    let mut run = Run::open_id(runs, run_id)?;
    let n = run.import_reviews(file)?;
    log::info!("imported {n} reviews");
    Ok(run.state().cloned().expect("reviewing runs have state"))
}

pub fn export(runs: &Path, run_id: &str) -> Result<pipeline::ExportBundle> {
    Ok(Run::open_id(runs, run_id)?.export()?)
}

pub fn train(runs: &Path, run_id: &str, config: &Path) -> Result<TrainReport> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let train: TrainStageConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    Ok(Run::open_id(runs, run_id)?.train_with(&train)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub summaries: Vec<GapSummary>,
    /// Log-log slope of mean gap against `N`, per rule.
    pub slopes: BTreeMap<String, Option<f64>>,
}

pub fn gap_experiment(config: &GapExperimentConfig, csv_out: Option<&Path>) -> Result<GapReport> {
    let rows = synthetic::gap_experiment(config)?;
    if let Some(path) = csv_out {
        synthetic::write_gap_csv(&rows, path)?;
    }
    let summaries = synthetic::summarize(&rows);
    let slopes = config
        .rules
        .iter()
        .map(|r| (r.name().to_string(), synthetic::log_log_slope(&summaries, r.name())))
        .collect();
    Ok(GapReport { summaries, slopes })
}

/// Parse `threshold`, `normalization`, `exponential` (with `beta`) or `ppl_priority`.
pub fn parse_rule(name: &str, beta: f64) -> Result<SamplingRule> {
    Ok(match name {
        "threshold" => SamplingRule::Threshold,
        "normalization" => SamplingRule::Normalization,
        "exponential" => SamplingRule::Exponential { beta },
        "ppl_priority" => SamplingRule::PplPriority,
        other => bail!("unknown sampling rule {other:?}"),
    })
}
