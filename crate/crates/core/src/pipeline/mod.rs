//! Resumable run state machine: annotate, criticize, sample, review, correct,
//! and optionally train.
//!
//! A run lives in `<output_dir>/<run_id>/`:
//!
//! | file | written at |
//! |---|---|
//! | `manifest.json` | start; config, hashes, seeds |
//! | `dataset.jsonl` | start |
//! | `annotations.jsonl` | annotated |
//! | `criticisms.jsonl` | criticized |
//! | `sampling.json` | sampled |
//! | `reviews.jsonl` | appended per review |
//! | `corrected.jsonl` | corrected |
//! | `model.json` | trained |
//! | `export/` | [`Run::export`] |
//! | `state.json` | after every transition |
//!
//! Each artifact is written before `state.json` records the stage, so a crash
//! between the two just repeats a deterministic stage on the next run.

pub mod config;
pub mod state;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{self, Backend, BackendError, CriticismRecord, CriticismStrategy};
use crate::data::{
    self, AnnotationRecord, AnnotationStrategy, CorrectedDataset, DataError, Dataset, ItemContent, ReviewRecord,
};
use crate::loss::{ActLossConfig, LossRule};
use crate::metrics::{self, Aqg, MetricsError, QualityMeasure};
use crate::sampling::{self, DrawMode, SamplingError, SamplingPlan, SamplingRule};
use crate::trainer::{self, Featurizer, LossSelection, TrainError, TrainReport, TrainingData};
use crate::SCHEMA_VERSION;

pub use config::{PipelineConfig, ReviewMode, TrainObjective, TrainStageConfig};
pub use state::{Manifest, PendingItem, RunState, Stage};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("operation needs stage {expected} but the run is at {actual}")]
    Stage { expected: Stage, actual: Stage },
    #[error("item {0} was already reviewed")]
    Conflict(usize),
    #[error("item {0} is not awaiting review")]
    NotPending(usize),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("item {0} has no hidden truth to answer its review")]
    MissingTruth(usize),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Run `f(i)` for `i in 0..n` on up to `parallelism` threads, keeping results in index order.
/// The first error by index wins; remaining work is abandoned once any call fails.
fn fan_out<T, F>(n: usize, parallelism: usize, f: F) -> Result<Vec<T>, BackendError>
where
    T: Send,
    F: Fn(usize) -> Result<T, BackendError> + Sync,
{
    if parallelism <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<T, BackendError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(n) {
            scope.spawn(|| {
                while !failed.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let out = f(i);
                    if out.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    *slots[i].lock().expect("slot lock") = Some(out);
                }
            });
        }
    });
    let mut results = Vec::with_capacity(n);
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(v)) => results.push(v),
            Some(Err(e)) => return Err(e),
            None => return Err(BackendError::Transport("stage aborted after an earlier failure".into())),
        }
    }
    Ok(results)
}

/// Annotate every item, `parallelism` backend calls at a time.
pub fn annotate_all(
    dataset: &Dataset,
    strategy: AnnotationStrategy,
    backend: &Backend,
    parallelism: usize,
) -> Result<Vec<AnnotationRecord>> {
    let items = dataset.items();
    Ok(fan_out(items.len(), parallelism, |i| {
        backends::annotate(&items[i], strategy, backend)
    })?)
}

/// Criticize every annotation. `annotations` must be indexed by item id.
pub fn criticize_all(
    dataset: &Dataset,
    annotations: &[AnnotationRecord],
    strategy: CriticismStrategy,
    backend: &Backend,
    parallelism: usize,
) -> Result<Vec<CriticismRecord>> {
    check_indexed(annotations.iter().map(|a| a.item_id), dataset.len())?;
    let items = dataset.items();
    Ok(fan_out(items.len(), parallelism, |i| {
        backends::criticize(&items[i], &annotations[i], strategy, backend)
    })?)
}

fn check_indexed(ids: impl Iterator<Item = usize>, n: usize) -> Result<()> {
    let mut count = 0;
    for (expected, id) in ids.enumerate() {
        if id != expected {
            return Err(PipelineError::Validation(format!(
                "records must be in item order; position {expected} holds item {id}"
            )));
        }
        count += 1;
    }
    if count != n {
        return Err(DataError::LengthMismatch { expected: n, actual: count }.into());
    }
    Ok(())
}

/// Sampling plan for a set of criticisms. Unparsed criticisms already carry `ε̂ = 1`.
pub fn plan_from_criticisms(
    criticisms: &[CriticismRecord],
    rule: SamplingRule,
    budget: usize,
    seed: u64,
    mode: DrawMode,
) -> Result<SamplingPlan> {
    if rule == SamplingRule::PplPriority {
        return Ok(sampling::build_ppl_plan(criticisms, budget, seed)?);
    }
    let eps = sampling::estimates(criticisms)
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or(MetricsError::MissingEstimate(i)))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(sampling::build_plan(&eps, rule, budget, seed, mode)?)
}

/// Selected items in review order: descending `ε̂` with ties by id, or
/// perplexity priority when the criticisms carry no `ε̂`.
fn review_order(plan: &SamplingPlan, criticisms: &[CriticismRecord]) -> Result<Vec<usize>> {
    let mut ids = plan.selected_ids();
    if plan.rule == SamplingRule::PplPriority {
        let ranking = sampling::ppl_priority_ranking(criticisms)?;
        let chosen: HashSet<usize> = ids.into_iter().collect();
        return Ok(ranking.into_iter().filter(|id| chosen.contains(id)).collect());
    }
    let eps = |id: usize| criticisms[id].error_probability.unwrap_or(f64::NEG_INFINITY);
    ids.sort_by(|&a, &b| eps(b).total_cmp(&eps(a)).then(a.cmp(&b)));
    Ok(ids)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Identity of a configuration on a data set. The output directory does not
/// take part, so moving the runs root keeps ids stable.
pub fn run_identity(config: &PipelineConfig, dataset_bytes: &[u8]) -> (String, String, String) {
    let mut hashed = config.clone();
    hashed.output_dir = PathBuf::new();
    hashed.dataset = PathBuf::new();
    let config_hash = sha256_hex(serde_json::to_string(&hashed).expect("config serializes").as_bytes());
    let dataset_hash = sha256_hex(dataset_bytes);
    let run_id = sha256_hex(format!("{config_hash}:{dataset_hash}").as_bytes())[..16].to_string();
    (run_id, config_hash, dataset_hash)
}

/// Stop early, for resumption tests and step-by-step CLI use.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub stop_after: Option<Stage>,
}

/// Execute or resume the run described by `config`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunState> {
    let run = run_pipeline_with(config, RunOptions::default())?;
    Ok(run.state.expect("annotation always runs"))
}

pub fn run_pipeline_with(config: &PipelineConfig, options: RunOptions) -> Result<Run> {
    config.validate()?;
    let bytes = std::fs::read(&config.dataset).map_err(|e| PipelineError::io(&config.dataset, e))?;
    let dataset = Dataset::load(&config.dataset)?;
    let budget = config.budget_for(dataset.len())?;
    let (run_id, config_hash, dataset_hash) = run_identity(config, &bytes);
    let dir = config.output_dir.join(&run_id);
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;

    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        dataset.save(&dir.join(DATASET))?;
        let mut seeds = BTreeMap::new();
        seeds.insert("sampling".to_string(), config.sampling.seed);
        if let Some(sim) = &config.annotator.backend.simulator {
            seeds.insert("annotator".to_string(), sim.seed);
        }
        if let Some(sim) = &config.criticizer.backend.simulator {
            seeds.insert("criticizer".to_string(), sim.seed);
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.clone(),
            config_hash,
            dataset_hash,
            n_items: dataset.len(),
            seeds,
            config: config.clone(),
        };
        state::write_json(&manifest_path, &manifest)?;
    }
    let mut run = Run::open(&dir)?;
    run.advance(options, budget)?;
    Ok(run)
}

const MANIFEST: &str = "manifest.json";
const STATE: &str = "state.json";
const DATASET: &str = "dataset.jsonl";
const ANNOTATIONS: &str = "annotations.jsonl";
const CRITICISMS: &str = "criticisms.jsonl";
const SAMPLING: &str = "sampling.json";
const REVIEWS: &str = "reviews.jsonl";
const CORRECTED: &str = "corrected.jsonl";
const MODEL: &str = "model.json";
const EXPORT: &str = "export";

/// A pending item with everything a reviewer needs to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub item_id: usize,
    pub content: ItemContent,
    pub machine_label: Option<usize>,
    pub machine_label_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_probability: Option<f64>,
    pub label_space: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub run_id: String,
    pub stage: Stage,
    /// Zero-based.
    pub page: usize,
    pub page_size: usize,
    /// Pending items across all pages.
    pub total: usize,
    pub budget: usize,
    pub budget_consumed: usize,
    pub items: Vec<QueueItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub n_items: usize,
    pub rule: SamplingRule,
    pub budget: usize,
    pub budget_used: usize,
    pub unparsed_annotations: usize,
    pub unparsed_criticisms: usize,
    /// Share of reviewed items where the reviewer kept the machine label.
    pub reviewed_agreement: Option<f64>,
    /// Against hidden truth, when every item has it.
    pub quality_machine: Option<f64>,
    pub quality_corrected: Option<f64>,
    pub aqg: Option<Aqg>,
    pub abs: Option<f64>,
    pub abs_trapezoid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportBundle {
    pub dir: PathBuf,
    pub corrected: CorrectedDataset,
    pub metrics: RunMetrics,
    pub curve_written: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub stage: Stage,
    pub n_items: usize,
    pub budget: usize,
    pub budget_consumed: usize,
    pub pending: usize,
}

/// Runs under `output_dir` that have recorded at least one stage, by id.
pub fn list_runs(output_dir: &Path) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(output_dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(PipelineError::io(output_dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::io(output_dir, e))?;
        let dir = entry.path();
        if !dir.join(STATE).exists() || !dir.join(MANIFEST).exists() {
            continue;
        }
        let manifest: Manifest = state::read_json(&dir.join(MANIFEST))?;
        let state: RunState = state::read_json(&dir.join(STATE))?;
        out.push(RunSummary {
            run_id: state.run_id,
            stage: state.stage,
            n_items: manifest.n_items,
            budget: state.budget,
            budget_consumed: state.budget_consumed,
            pending: state.pending.len(),
        });
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// An opened run directory. All writes to one run go through one `Run`.
#[derive(Debug)]
pub struct Run {
    dir: PathBuf,
    manifest: Manifest,
    dataset: Dataset,
    /// `None` until annotation finishes.
    state: Option<RunState>,
}

impl Run {
    /// Open an existing run directory, reconciling the state with `reviews.jsonl`.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            let id = dir.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            return Err(PipelineError::UnknownRun(id));
        }
        let manifest: Manifest = state::read_json(&manifest_path)?;
        let dataset = Dataset::load(&dir.join(DATASET))?;
        let state_path = dir.join(STATE);
        let state = if state_path.exists() {
            Some(state::read_json(&state_path)?)
        } else {
            None
        };
        let mut run = Self {
            dir: dir.to_path_buf(),
            manifest,
            dataset,
            state,
        };
        run.reconcile_reviews()?;
        Ok(run)
    }

    /// Open `<output_dir>/<run_id>`.
    pub fn open_id(output_dir: &Path, run_id: &str) -> Result<Self> {
        let valid = !run_id.is_empty() && run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(PipelineError::UnknownRun(run_id.to_string()));
        }
        Self::open(&output_dir.join(run_id))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.manifest.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    /// Current state; a run that has not finished annotating reports `None`.
    pub fn state(&self) -> Option<&RunState> {
        self.state.as_ref()
    }

    fn state_ref(&self) -> Result<&RunState> {
        self.state.as_ref().ok_or_else(|| PipelineError::Validation("run has not finished annotating".into()))
    }

    fn stage(&self) -> Option<Stage> {
        self.state.as_ref().map(|s| s.stage)
    }

    fn require(&self, at_least: Stage) -> Result<&RunState> {
        let state = self.state_ref()?;
        if state.stage < at_least {
            return Err(PipelineError::Stage {
                expected: at_least,
                actual: state.stage,
            });
        }
        Ok(state)
    }

    fn save_state(&self) -> Result<()> {
        if let Some(state) = &self.state {
            state::write_json(&self.dir.join(STATE), state)?;
        }
        Ok(())
    }

    fn transition(&mut self, next: Stage) -> Result<()> {
        let run_id = self.manifest.run_id.clone();
        self.state.get_or_insert_with(|| RunState::new(run_id)).advance(next)?;
        self.save_state()
    }

    pub fn annotations(&self) -> Result<Vec<AnnotationRecord>> {
        Ok(data::read_jsonl(&self.dir.join(ANNOTATIONS))?)
    }

    pub fn criticisms(&self) -> Result<Vec<CriticismRecord>> {
        Ok(data::read_jsonl(&self.dir.join(CRITICISMS))?)
    }

    pub fn plan(&self) -> Result<SamplingPlan> {
        state::read_json(&self.dir.join(SAMPLING))
    }

    pub fn reviews(&self) -> Result<Vec<ReviewRecord>> {
        let path = self.dir.join(REVIEWS);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(data::read_jsonl(&path)?)
    }

    pub fn corrected(&self) -> Result<CorrectedDataset> {
        self.require(Stage::Corrected)?;
        Ok(CorrectedDataset::load(&self.dir.join(CORRECTED))?)
    }

    fn reconcile_reviews(&mut self) -> Result<()> {
        if self.stage() != Some(Stage::Reviewing) {
            return Ok(());
        }
        let reviews = self.reviews()?;
        let state = self.state.as_mut().expect("reviewing implies state");
        let done: HashSet<usize> = reviews.iter().map(|r| r.item_id).collect();
        state.pending.retain(|p| !done.contains(&p.item_id));
        state.completed = reviews.iter().map(|r| r.item_id).collect();
        state.budget_consumed = reviews.len();
        Ok(())
    }

    fn advance(&mut self, options: RunOptions, budget: usize) -> Result<()> {
        let config = self.manifest.config.clone();
        let stop = |s: Option<Stage>| s.is_some() && s == options.stop_after;
        if self.state.is_none() {
            let backend = Backend::connect(&config.annotator.backend)?;
            let annotations = annotate_all(&self.dataset, config.annotator.strategy, &backend, config.parallelism)?;
            data::write_jsonl(&self.dir.join(ANNOTATIONS), &annotations)?;
            self.transition(Stage::Annotated)?;
            log::info!("run {}: annotated {} items", self.run_id(), annotations.len());
        }
        if stop(self.stage()) {
            return Ok(());
        }
        if self.stage() < Some(Stage::Criticized) {
            let backend = Backend::connect(&config.criticizer.backend)?;
            if config.criticizer.strategy.is_whitebox() && !backend.exposes_logprobs() {
                return Err(PipelineError::Config("criticizer backend does not return log-probabilities".into()));
            }
            let annotations = self.annotations()?;
            let criticisms = criticize_all(
                &self.dataset,
                &annotations,
                config.criticizer.strategy,
                &backend,
                config.parallelism,
            )?;
            data::write_jsonl(&self.dir.join(CRITICISMS), &criticisms)?;
            self.transition(Stage::Criticized)?;
            log::info!("run {}: criticized", self.run_id());
        }
        if stop(self.stage()) {
            return Ok(());
        }
        if self.stage() < Some(Stage::Sampled) {
            let criticisms = self.criticisms()?;
            let s = &config.sampling;
            let plan = plan_from_criticisms(&criticisms, s.rule, budget, s.seed, s.mode)?;
            state::write_json(&self.dir.join(SAMPLING), &plan)?;
            self.state.as_mut().expect("annotated").budget = budget;
            self.transition(Stage::Sampled)?;
            log::info!("run {}: {} of {} items selected", self.run_id(), plan.reviewed(), plan.len());
        }
        if stop(self.stage()) {
            return Ok(());
        }
        if self.stage() < Some(Stage::Reviewing) {
            self.open_review_queue()?;
        }
        if stop(self.stage()) {
            return Ok(());
        }
        if self.stage() == Some(Stage::Reviewing) {
            match config.review.mode {
                ReviewMode::Interactive => {}
                ReviewMode::SimulatedOracle => self.answer_with_truth()?,
                ReviewMode::ImportFile => {
                    let file = config.review.file.as_ref().expect("validated");
                    self.import_reviews(file)?;
                }
            }
            if self.state_ref()?.pending.is_empty() {
                self.finalize()?;
            }
        }
        if stop(self.stage()) {
            return Ok(());
        }
        if self.stage() == Some(Stage::Corrected) {
            if let Some(train) = &config.train {
                let report = self.train_with(train)?;
                state::write_json(&self.dir.join(MODEL), &report)?;
                self.transition(Stage::Trained)?;
            }
        }
        Ok(())
    }

    fn open_review_queue(&mut self) -> Result<()> {
        let plan = self.plan()?;
        let criticisms = self.criticisms()?;
        let annotations = self.annotations()?;
        let pending = review_order(&plan, &criticisms)?
            .into_iter()
            .map(|id| PendingItem {
                item_id: id,
                error_probability: criticisms[id].error_probability,
                machine_label: annotations[id].machine_label,
                reasoning: criticisms[id].reasoning.clone(),
            })
            .collect();
        // a stale file could only come from an interrupted earlier attempt
        data::write_jsonl::<ReviewRecord>(&self.dir.join(REVIEWS), &[])?;
        let state = self.state.as_mut().expect("sampled");
        state.pending = pending;
        state.completed.clear();
        state.budget_consumed = 0;
        self.transition(Stage::Reviewing)
    }

    fn answer_with_truth(&mut self) -> Result<()> {
        let pending: Vec<usize> = self.state_ref()?.pending.iter().map(|p| p.item_id).collect();
        for id in pending {
            let truth = self.dataset.items()[id].hidden_truth.ok_or(PipelineError::MissingTruth(id))?;
            self.submit_review(id, truth, "oracle")?;
        }
        Ok(())
    }

    /// One page of the pending queue. An empty queue in the reviewing stage
    /// applies the correction immediately; after correction every page is empty.
    pub fn review_queue(&mut self, page: usize, page_size: usize) -> Result<QueuePage> {
        if self.queue_needs_finalize() {
            self.finalize()?;
        }
        self.peek_queue(page, page_size)
    }

    /// The reviewing stage has nothing left to review but has not been corrected yet.
    pub fn queue_needs_finalize(&self) -> bool {
        self.state
            .as_ref()
            .is_some_and(|s| s.stage == Stage::Reviewing && s.pending.is_empty())
    }

    /// Read-only variant of [`Run::review_queue`] that never advances the stage.
    pub fn peek_queue(&self, page: usize, page_size: usize) -> Result<QueuePage> {
        if page_size == 0 {
            return Err(PipelineError::Validation("page_size must be at least 1".into()));
        }
        let state = self.require(Stage::Reviewing)?;
        let items = state
            .pending
            .iter()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .map(|p| {
                let item = &self.dataset.items()[p.item_id];
                QueueItem {
                    item_id: p.item_id,
                    content: item.content.clone(),
                    machine_label: p.machine_label,
                    machine_label_name: p.machine_label.and_then(|l| item.label_space.get(l).cloned()),
                    reasoning: p.reasoning.clone(),
                    error_probability: p.error_probability,
                    label_space: item.label_space.clone(),
                }
            })
            .collect();
        Ok(QueuePage {
            run_id: state.run_id.clone(),
            stage: state.stage,
            page,
            page_size,
            total: state.pending.len(),
            budget: state.budget,
            budget_consumed: state.budget_consumed,
            items,
        })
    }

    /// Record a human label. The first accepted submission for an item is final.
    pub fn submit_review(&mut self, item_id: usize, label: usize, reviewer: &str) -> Result<&RunState> {
        self.submit_review_at(item_id, label, reviewer, now_secs())
    }

    pub fn submit_review_at(&mut self, item_id: usize, label: usize, reviewer: &str, timestamp: u64) -> Result<&RunState> {
        let state = self.state_ref()?;
        if state.completed.contains(&item_id)
            || (state.stage >= Stage::Corrected && self.plan()?.delta.get(item_id) == Some(&true))
        {
            return Err(PipelineError::Conflict(item_id));
        }
        if state.stage != Stage::Reviewing {
            return Err(PipelineError::Stage {
                expected: Stage::Reviewing,
                actual: state.stage,
            });
        }
        let Some(pos) = state.pending.iter().position(|p| p.item_id == item_id) else {
            return Err(PipelineError::NotPending(item_id));
        };
        self.dataset.items()[item_id].check_label(label)?;
        let record = ReviewRecord {
            item_id,
            human_label: label,
            reviewer_id: reviewer.to_string(),
            timestamp,
        };
        data::append_jsonl(&self.dir.join(REVIEWS), &record)?;
        let state = self.state.as_mut().expect("checked");
        state.pending.remove(pos);
        state.completed.push(item_id);
        state.budget_consumed += 1;
        debug_assert!(state.budget_consumed <= state.budget);
        if state.pending.is_empty() {
            self.finalize()?;
        } else {
            self.save_state()?;
        }
        self.state_ref()
    }

    /// Apply every review in a JSONL file. The whole file is checked before
    /// anything is recorded.
    pub fn import_reviews(&mut self, path: &Path) -> Result<usize> {
        let records: Vec<ReviewRecord> = data::read_jsonl(path)?;
        let state = self.state_ref()?;
        if state.stage != Stage::Reviewing {
            return Err(PipelineError::Stage {
                expected: Stage::Reviewing,
                actual: state.stage,
            });
        }
        let pending: HashSet<usize> = state.pending.iter().map(|p| p.item_id).collect();
        let mut seen = HashSet::new();
        for r in &records {
            if state.completed.contains(&r.item_id) || !seen.insert(r.item_id) {
                return Err(PipelineError::Conflict(r.item_id));
            }
            if !pending.contains(&r.item_id) {
                return Err(PipelineError::NotPending(r.item_id));
            }
            self.dataset.items()[r.item_id].check_label(r.human_label)?;
        }
        for r in &records {
            self.submit_review_at(r.item_id, r.human_label, &r.reviewer_id, r.timestamp)?;
        }
        Ok(records.len())
    }

    fn finalize(&mut self) -> Result<()> {
        let plan = self.plan()?;
        let annotations = self.annotations()?;
        let criticisms = self.criticisms()?;
        let reviews = self.reviews()?;
        let mut corrected = data::apply_correction(&annotations, &plan.delta, &reviews)?;
        let eps: Vec<Option<f64>> = criticisms.iter().map(|c| c.error_probability).collect();
        corrected.attach_sampling(&plan.pi, &eps)?;
        corrected.attach_truth(&self.dataset)?;
        corrected.save(&self.dir.join(CORRECTED))?;
        self.transition(Stage::Corrected)?;
        log::info!("run {}: corrected with {} reviews", self.run_id(), reviews.len());
        Ok(())
    }

    /// Train on the corrected data without recording a stage transition.
    pub fn train_with(&self, train: &config::TrainStageConfig) -> Result<TrainReport> {
        let featurizer = match &train.embeddings {
            Some(path) => Featurizer::with_embeddings(path)?,
            None => Featurizer::new(),
        };
        let corrected = self.corrected()?;
        let data = TrainingData::from_corrected(&self.dataset, &corrected, &featurizer)?;
        let plan = self.plan()?;
        let loss = match train.objective {
            TrainObjective::CorrectedMean => LossSelection::CorrectedMean,
            TrainObjective::PlainMachine => LossSelection::PlainMachine,
            TrainObjective::Act { lambda } => LossSelection::Act(ActLossConfig {
                rule: loss_rule_for(&plan)?,
                lambda,
            }),
        };
        let mut cfg = train.optimizer.clone();
        cfg.loss = loss;
        Ok(trainer::train(&data, &cfg)?)
    }

    /// Write `export/corrected.jsonl`, `export/metrics.json` and, when enabled
    /// and truth is known, `export/curve.csv`. Output depends only on run artifacts.
    pub fn export(&self) -> Result<ExportBundle> {
        let state = self.require(Stage::Corrected)?;
        let corrected = self.corrected()?;
        let annotations = self.annotations()?;
        let criticisms = self.criticisms()?;
        let plan = self.plan()?;
        let toggles = self.config().metrics;
        let measure = QualityMeasure::default();

        let machine: Vec<Option<usize>> = annotations.iter().map(|a| a.machine_label).collect();
        let finals = corrected.final_labels();
        let reviewed: Vec<_> = corrected.entries.iter().filter(|e| e.delta).collect();
        let reviewed_agreement = (!reviewed.is_empty()).then(|| {
            let same = reviewed.iter().filter(|e| e.human_label == e.machine_label).count();
            same as f64 / reviewed.len() as f64
        });
        let truth: Option<Vec<Option<usize>>> = self
            .dataset
            .hidden_truths()
            .filter(|_| toggles.quality || toggles.curve)
            .map(|t| t.into_iter().map(Some).collect());

        let mut metrics = RunMetrics {
            run_id: state.run_id.clone(),
            n_items: self.dataset.len(),
            rule: plan.rule,
            budget: state.budget,
            budget_used: reviewed.len(),
            unparsed_annotations: annotations.iter().filter(|a| !a.parse_ok).count(),
            unparsed_criticisms: criticisms.iter().filter(|c| !c.parse_ok).count(),
            reviewed_agreement,
            quality_machine: None,
            quality_corrected: None,
            aqg: None,
            abs: None,
            abs_trapezoid: None,
        };
        let dir = self.dir.join(EXPORT);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let mut curve_written = false;
        if let Some(truth) = &truth {
            if toggles.quality {
                metrics.quality_machine = Some(metrics::quality(truth, &machine, &measure)?);
                metrics.quality_corrected = Some(metrics::quality(truth, &finals, &measure)?);
                metrics.aqg = Some(metrics::aqg(truth, &machine, &finals, &measure)?);
            }
            if toggles.curve {
                let curve = metrics::abs_metric(
                    truth,
                    &machine,
                    &criticisms,
                    plan.rule,
                    plan.seed,
                    DrawMode::HardCap,
                    &measure,
                )?;
                curve.save_csv(&dir.join("curve.csv"))?;
                metrics.abs = Some(curve.abs);
                metrics.abs_trapezoid = Some(curve.abs_trapezoid);
                curve_written = true;
            }
        }
        corrected.save(&dir.join(CORRECTED))?;
        state::write_json(&dir.join("metrics.json"), &metrics)?;
        Ok(ExportBundle {
            dir,
            corrected,
            metrics,
            curve_written,
        })
    }

    /// Trained parameters, once the train stage has run.
    pub fn model(&self) -> Result<TrainReport> {
        self.require(Stage::Trained)?;
        state::read_json(&self.dir.join(MODEL))
    }
}

/// The loss-side description of how a plan's `π` was produced.
pub fn loss_rule_for(plan: &SamplingPlan) -> Result<LossRule> {
    Ok(match plan.rule {
        SamplingRule::Normalization => LossRule::Normalization { budget: plan.budget },
        SamplingRule::Exponential { beta } => LossRule::Exponential {
            alpha: plan
                .alpha
                .ok_or_else(|| PipelineError::Validation("exponential plan lacks alpha".into()))?,
            beta,
        },
        SamplingRule::Threshold | SamplingRule::PplPriority => LossRule::Threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendConfig, CriticCalibration, SimulatorConfig};
    use crate::data::Item;
    use crate::sampling::Budget;

    fn dataset(n: usize, k: usize) -> Dataset {
        let labels: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        Dataset::new(
            (0..n)
                .map(|id| Item {
                    id,
                    content: ItemContent::Text {
                        text: format!("item {id}"),
                    },
                    hidden_truth: Some(id % k),
                    label_space: labels.clone(),
                    features: Some(vec![(id % k) as f64, 1.0 - (id % 3) as f64]),
                })
                .collect(),
        )
        .unwrap()
    }

    fn config(root: &Path, n: usize, mode: ReviewMode) -> PipelineConfig {
        let data_path = root.join("data.jsonl");
        dataset(n, 4).save(&data_path).unwrap();
        let sim = SimulatorConfig {
            annotator_accuracy: 0.8,
            calibration: CriticCalibration::Perfect,
            seed: 11,
        };
        PipelineConfig {
            dataset: data_path,
            output_dir: root.join("runs"),
            annotator: config::AnnotatorConfig {
                strategy: AnnotationStrategy::Naive,
                backend: BackendConfig::simulated(sim),
            },
            criticizer: config::CriticizerConfig {
                strategy: CriticismStrategy::Naive,
                backend: BackendConfig::simulated(sim),
            },
            sampling: config::SamplingConfig {
                rule: SamplingRule::Threshold,
                budget: Budget::Proportion(0.2),
                mode: DrawMode::HardCap,
                seed: 5,
            },
            review: config::ReviewConfig { mode, file: None },
            metrics: config::MetricToggles {
                quality: true,
                curve: true,
            },
            train: None,
            parallelism: 3,
        }
    }

    #[test]
    fn fan_out_keeps_order_and_reports_first_error() {
        let out = fan_out(50, 4, |i| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
        let err = fan_out(50, 4, |i| {
            if i == 7 {
                Err(BackendError::Transport("down".into()))
            } else {
                Ok(i)
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn interactive_run_stops_at_review_with_full_queue() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 40, ReviewMode::Interactive);
        let mut run = run_pipeline_with(&cfg, RunOptions::default()).unwrap();
        let state = run.state().unwrap().clone();
        assert_eq!(state.stage, Stage::Reviewing);
        assert_eq!(state.pending.len(), run.plan().unwrap().reviewed());
        assert_eq!(state.budget, 8);

        let page = run.review_queue(0, 100).unwrap();
        let eps: Vec<f64> = page.items.iter().map(|i| i.error_probability.unwrap()).collect();
        assert!(eps.windows(2).all(|w| w[0] >= w[1]));
        assert!(run.review_queue(5, 100).unwrap().items.is_empty());
        assert_eq!(run.review_queue(5, 100).unwrap().total, state.pending.len());

        assert!(matches!(run.export(), Err(PipelineError::Stage { .. })));

        let first = page.items[0].item_id;
        run.submit_review(first, 0, "alice").unwrap();
        assert!(matches!(run.submit_review(first, 1, "bob"), Err(PipelineError::Conflict(_))));
        let bad = page.items[1].item_id;
        assert!(matches!(run.submit_review(bad, 99, "bob"), Err(PipelineError::Data(_))));

        let remaining: Vec<usize> = run.state().unwrap().pending.iter().map(|p| p.item_id).collect();
        for id in remaining {
            run.submit_review(id, 0, "alice").unwrap();
        }
        assert_eq!(run.state().unwrap().stage, Stage::Corrected);
        assert!(run.dir().join(CORRECTED).exists());
        assert_eq!(run.state().unwrap().budget_consumed, run.reviews().unwrap().len());
    }

    #[test]
    fn reopening_reconciles_reviews_written_before_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 30, ReviewMode::Interactive);
        let run = run_pipeline_with(&cfg, RunOptions::default()).unwrap();
        let first = run.state().unwrap().pending[0].item_id;
        // review appended, state.json never updated
        let record = ReviewRecord {
            item_id: first,
            human_label: 1,
            reviewer_id: "r".into(),
            timestamp: 0,
        };
        data::append_jsonl(&run.dir().join(REVIEWS), &record).unwrap();
        let reopened = Run::open(run.dir()).unwrap();
        let state = reopened.state().unwrap();
        assert_eq!(state.budget_consumed, 1);
        assert!(state.pending.iter().all(|p| p.item_id != first));
    }

    #[test]
    fn oracle_run_completes_and_rerun_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 60, ReviewMode::SimulatedOracle);
        let state = run_pipeline(&cfg).unwrap();
        assert_eq!(state.stage, Stage::Corrected);
        let again = run_pipeline(&cfg).unwrap();
        assert_eq!(again, state);
        let runs = list_runs(&cfg.output_dir).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].stage, Stage::Corrected);
    }

    #[test]
    fn empty_queue_advances_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), 10, ReviewMode::Interactive);
        cfg.sampling.budget = Budget::Count(0);
        let mut run = run_pipeline_with(&cfg, RunOptions::default()).unwrap();
        assert_eq!(run.state().unwrap().stage, Stage::Corrected);
        let page = run.review_queue(0, 10).unwrap();
        assert!(page.items.is_empty());
        assert_eq!(page.stage, Stage::Corrected);
    }

    #[test]
    fn import_rejects_unrequested_items_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), 20, ReviewMode::Interactive);
        let mut run = run_pipeline_with(&cfg, RunOptions::default()).unwrap();
        let plan = run.plan().unwrap();
        let outside = plan.delta.iter().position(|d| !d).unwrap();
        let inside = plan.selected_ids()[0];
        let file = dir.path().join("reviews.jsonl");
        let rec = |item_id| ReviewRecord {
            item_id,
            human_label: 0,
            reviewer_id: "ext".into(),
            timestamp: 1,
        };
        data::write_jsonl(&file, &[rec(inside), rec(outside)]).unwrap();
        assert!(matches!(run.import_reviews(&file), Err(PipelineError::NotPending(_))));
        assert_eq!(run.state().unwrap().budget_consumed, 0);
        data::write_jsonl(&file, &[rec(inside)]).unwrap();
        assert_eq!(run.import_reviews(&file).unwrap(), 1);
        assert_eq!(run.state().unwrap().budget_consumed, 1);
    }

    #[test]
    fn act_train_stage_uses_the_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), 40, ReviewMode::SimulatedOracle);
        cfg.sampling.rule = SamplingRule::Exponential { beta: 10.0 };
        cfg.train = Some(config::TrainStageConfig {
            objective: TrainObjective::Act { lambda: 1.0 },
            embeddings: None,
            optimizer: trainer::TrainConfig {
                epochs: 5,
                ..Default::default()
            },
        });
        let run = run_pipeline_with(&cfg, RunOptions::default()).unwrap();
        assert_eq!(run.state().unwrap().stage, Stage::Trained);
        let model = run.model().unwrap();
        assert_eq!(model.params.n_classes, 4);
        assert!(run.export().is_ok());
    }
}
