//! Persisted run state and manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Annotated,
    Criticized,
    Sampled,
    Reviewing,
    Corrected,
    Trained,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Annotated => "annotated",
            Stage::Criticized => "criticized",
            Stage::Sampled => "sampled",
            Stage::Reviewing => "reviewing",
            Stage::Corrected => "corrected",
            Stage::Trained => "trained",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An item awaiting human review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub item_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_probability: Option<f64>,
    pub machine_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub stage: Stage,
    /// `B`; zero until sampling.
    pub budget: usize,
    pub budget_consumed: usize,
    /// Review order: descending `ε̂`, ties by id.
    pub pending: Vec<PendingItem>,
    /// Reviewed item ids in submission order.
    pub completed: Vec<usize>,
}

impl RunState {
    pub fn new(run_id: String) -> Self {
        Self {
            run_id,
            stage: Stage::Annotated,
            budget: 0,
            budget_consumed: 0,
            pending: Vec::new(),
            completed: Vec::new(),
        }
    }

    /// Move to `next`; moving backwards is a bug in the caller.
    pub(crate) fn advance(&mut self, next: Stage) -> Result<()> {
        if next < self.stage {
            return Err(PipelineError::Stage {
                expected: next,
                actual: self.stage,
            });
        }
        self.stage = next;
        Ok(())
    }

    pub fn is_complete(&self, training: bool) -> bool {
        self.stage == Stage::Trained || (self.stage == Stage::Corrected && !training)
    }
}

/// Identity of a run: what was configured and what data it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub n_items: usize,
    pub seeds: BTreeMap<String, u64>,
    pub config: PipelineConfig,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_only_move_forward() {
        let mut s = RunState::new("r".into());
        s.advance(Stage::Sampled).unwrap();
        s.advance(Stage::Sampled).unwrap();
        assert!(matches!(s.advance(Stage::Criticized), Err(PipelineError::Stage { .. })));
        assert_eq!(s.stage, Stage::Sampled);
    }

    #[test]
    fn stage_names_match_serde() {
        for st in [Stage::Annotated, Stage::Reviewing, Stage::Trained] {
            assert_eq!(serde_json::to_string(&st).unwrap(), format!("\"{st}\""));
        }
    }
}
