//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::backends::{BackendConfig, CriticismStrategy};
use crate::data::AnnotationStrategy;
use crate::sampling::{Budget, DrawMode, SamplingRule};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    #[serde(default = "default_annotation_strategy")]
    pub strategy: AnnotationStrategy,
    #[serde(default)]
    pub backend: BackendConfig,
}

fn default_annotation_strategy() -> AnnotationStrategy {
    AnnotationStrategy::Naive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticizerConfig {
    #[serde(default = "default_criticism_strategy")]
    pub strategy: CriticismStrategy,
    #[serde(default)]
    pub backend: BackendConfig,
}

fn default_criticism_strategy() -> CriticismStrategy {
    CriticismStrategy::Naive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    #[serde(flatten)]
    pub rule: SamplingRule,
    pub budget: Budget,
    #[serde(default)]
    pub mode: DrawMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    /// Stop at the review stage and wait for submissions.
    #[default]
    Interactive,
    /// Answer every review with the item's hidden truth.
    SimulatedOracle,
    /// Read reviews from a JSONL file.
    ImportFile,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReviewConfig {
    #[serde(default)]
    pub mode: ReviewMode,
    /// Source for `import_file` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    /// Report quality against hidden truth when every item has it.
    pub quality: bool,
    /// Write the budget curve CSV and report ABS.
    pub curve: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            quality: true,
            curve: false,
        }
    }
}

/// Objective for the optional train stage. ACT weights are rebuilt from the
/// run's sampling plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainObjective {
    CorrectedMean,
    PlainMachine,
    Act {
        #[serde(default = "one")]
        lambda: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub objective: TrainObjective,
    /// JSONL of `{item_id, features}` for items without inline features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub annotator: AnnotatorConfig,
    pub criticizer: CriticizerConfig,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub review: ReviewConfig,
    #[serde(default)]
    pub metrics: MetricToggles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainStageConfig>,
    /// Concurrent backend calls within a stage.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl PipelineConfig {
    /// Parse a TOML file. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(file) = self.review.file.as_mut() {
            fix(file);
        }
        if let Some(emb) = self.train.as_mut().and_then(|t| t.embeddings.as_mut()) {
            fix(emb);
        }
    }

    /// Checks that need no data. Budget against `N` is checked once the data set is loaded.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.annotator.backend.validate()?;
        self.criticizer.backend.validate()?;
        let strategy = self.criticizer.strategy;
        let backend = &self.criticizer.backend;
        if strategy.is_whitebox() && !backend.is_simulated() && !backend.logprobs {
            return bad(format!(
                "criticizer strategy {strategy:?} needs token log-probabilities; set logprobs = true on a backend that returns them"
            ));
        }
        let ppl_rule = self.sampling.rule == SamplingRule::PplPriority;
        if ppl_rule != (strategy == CriticismStrategy::CotPpl) {
            return bad("the ppl_priority rule pairs with the cot_ppl strategy and only with it".into());
        }
        if let SamplingRule::Exponential { beta } = self.sampling.rule {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad(format!("beta {beta} must be positive"));
            }
        }
        if self.sampling.mode != DrawMode::HardCap {
            return bad("review runs draw with mode = hard_cap so the budget is never exceeded".into());
        }
        match self.sampling.budget {
            Budget::Proportion(p) if !(0.0..=1.0).contains(&p) => {
                return bad(format!("budget proportion {p} outside [0, 1]"));
            }
            _ => {}
        }
        if self.review.mode == ReviewMode::ImportFile && self.review.file.is_none() {
            return bad("import_file review mode needs review.file".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if let Some(train) = &self.train {
            if let TrainObjective::Act { lambda } = train.objective {
                if !(0.0..=1.0).contains(&lambda) {
                    return bad(format!("lambda {lambda} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// `B` for a data set of `n` items; must not exceed `n`.
    pub fn budget_for(&self, n: usize) -> Result<usize> {
        Ok(self.sampling.budget.resolve(n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
dataset = "data.jsonl"
output_dir = "runs"

[annotator.backend]
endpoint = "simulated"
simulator = { annotator_accuracy = 0.8, seed = 1, calibration = "perfect" }

[criticizer]
strategy = "naive"
backend = { endpoint = "simulated", simulator = { annotator_accuracy = 0.8, seed = 1, calibration = "perfect" } }

[sampling]
rule = "exponential"
beta = 10.0
budget = { proportion = 0.2 }
seed = 3

[review]
mode = "simulated_oracle"

[train]
objective = { kind = "act", lambda = 0.9 }
optimizer = { epochs = 10 }
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = PipelineConfig::from_toml(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sampling.rule, SamplingRule::Exponential { beta: 10.0 });
        assert_eq!(cfg.sampling.budget, Budget::Proportion(0.2));
        assert_eq!(cfg.review.mode, ReviewMode::SimulatedOracle);
        assert_eq!(cfg.train.as_ref().unwrap().optimizer.epochs, 10);
        assert_eq!(cfg.parallelism, 4);
        let again = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn whitebox_needs_logprobs() {
        let mut cfg = PipelineConfig::from_toml(EXAMPLE).unwrap();
        cfg.criticizer.strategy = CriticismStrategy::NaiveLogit;
        cfg.criticizer.backend = BackendConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            ..BackendConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        cfg.criticizer.backend.logprobs = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn ppl_rule_and_strategy_go_together() {
        let mut cfg = PipelineConfig::from_toml(EXAMPLE).unwrap();
        cfg.sampling.rule = SamplingRule::PplPriority;
        assert!(cfg.validate().is_err());
        cfg.criticizer.strategy = CriticismStrategy::CotPpl;
        cfg.validate().unwrap();
    }

    #[test]
    fn budget_over_n_is_rejected() {
        let mut cfg = PipelineConfig::from_toml(EXAMPLE).unwrap();
        cfg.sampling.budget = Budget::Count(11);
        assert!(cfg.budget_for(10).is_err());
        assert_eq!(cfg.budget_for(11).unwrap(), 11);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("act.toml");
        std::fs::write(&path, EXAMPLE).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("data.jsonl"));
        assert_eq!(cfg.output_dir, dir.path().join("runs"));
    }
}
