//! Prompt templates keyed by task kind and strategy.
//!
//! Templates use `{name}` placeholders. The bundled set ships with the crate;
//! a directory of `<task>_<prompt>.txt` files overrides individual entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{AnnotationStrategy, Item, ItemContent, TaskKind};

use super::{BackendError, CriticismStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    Annotate(AnnotationStrategy),
    Criticize(CriticismStrategy),
}

impl PromptKind {
    /// File stem suffix. `cot_ppl` shares the white-box CoT prompt.
    pub fn key(self) -> &'static str {
        match self {
            PromptKind::Annotate(AnnotationStrategy::Naive) => "annotate_naive",
            PromptKind::Annotate(AnnotationStrategy::Cot) => "annotate_cot",
            PromptKind::Criticize(s) => match s {
                CriticismStrategy::Naive => "criticize_naive",
                CriticismStrategy::Cot => "criticize_cot",
                CriticismStrategy::Mc => "criticize_mc",
                CriticismStrategy::Devil => "criticize_devil",
                CriticismStrategy::NaiveLogit => "criticize_naive_logit",
                CriticismStrategy::CotLogit | CriticismStrategy::CotPpl => "criticize_cot_logit",
            },
        }
    }

    fn all() -> Vec<PromptKind> {
        let mut kinds = vec![
            PromptKind::Annotate(AnnotationStrategy::Naive),
            PromptKind::Annotate(AnnotationStrategy::Cot),
        ];
        kinds.extend(CriticismStrategy::ALL.iter().map(|&s| PromptKind::Criticize(s)));
        kinds
    }
}

pub const KNOWN_PLACEHOLDERS: &[&str] = &[
    "data",
    "label_list_with_index",
    "first_label",
    "label_index",
    "CoT_A",
];

/// Placeholders a template must contain exactly once.
pub fn required_placeholders(task: TaskKind, kind: PromptKind) -> Vec<&'static str> {
    let mut out = Vec::new();
    if task != TaskKind::ImageCls {
        out.push("data");
    }
    out.push("label_list_with_index");
    match kind {
        PromptKind::Annotate(_) => out.push("first_label"),
        PromptKind::Criticize(CriticismStrategy::Devil) => out.push("CoT_A"),
        PromptKind::Criticize(_) => out.push("label_index"),
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub task: TaskKind,
    pub kind: PromptKind,
    pub text: String,
}

/// Names of `{placeholder}` occurrences in order of appearance.
fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(task: TaskKind, kind: PromptKind, text: impl Into<String>) -> Result<Self, BackendError> {
        let template = Self {
            task,
            kind,
            text: text.into(),
        };
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let found = placeholders(&self.text);
        let name = format!("{}_{}", self.task.as_str(), self.kind.key());
        for p in &found {
            if !KNOWN_PLACEHOLDERS.contains(p) {
                return Err(BackendError::Template(format!("{name}: unknown placeholder {{{p}}}")));
            }
        }
        for required in required_placeholders(self.task, self.kind) {
            let count = found.iter().filter(|p| **p == required).count();
            if count != 1 {
                return Err(BackendError::Template(format!(
                    "{name}: placeholder {{{required}}} appears {count} times, expected once"
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &PromptValues<'_>) -> String {
        let lookup = |name: &str| match name {
            "data" => values.data,
            "label_list_with_index" => Some(values.label_list_with_index.as_str()),
            "first_label" => Some(values.first_label),
            "label_index" => values.label_index.as_deref(),
            "CoT_A" => values.annotator_reasoning,
            _ => None,
        };
        // single pass, so substituted values are never re-scanned
        let mut out = String::with_capacity(self.text.len() + 64);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}').and_then(|close| lookup(&after[..close]).map(|v| (close, v))) {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Values substituted into a template for one item.
#[derive(Debug, Clone)]
pub struct PromptValues<'a> {
    pub data: Option<&'a str>,
    pub label_list_with_index: String,
    pub first_label: &'a str,
    pub label_index: Option<String>,
    pub annotator_reasoning: Option<&'a str>,
}

impl<'a> PromptValues<'a> {
    pub fn for_item(item: &'a Item) -> Self {
        let data = match &item.content {
            ItemContent::Image { .. } => None,
            ItemContent::Text { text } => Some(text.as_str()),
            ItemContent::Vqa { question, .. } => Some(question.as_str()),
        };
        Self {
            data,
            label_list_with_index: item.label_list_with_index(),
            first_label: item.label_space.first().map(String::as_str).unwrap_or(""),
            label_index: None,
            annotator_reasoning: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<(TaskKind, PromptKind), PromptTemplate>,
}

const TASKS: [TaskKind; 3] = [TaskKind::ImageCls, TaskKind::TextCls, TaskKind::Vqa];

impl TemplateSet {
    /// The templates compiled into the crate.
    pub fn bundled() -> Self {
        let mut templates = BTreeMap::new();
        for task in TASKS {
            for kind in PromptKind::all() {
                let stem = format!("{}_{}", task.as_str(), kind.key());
                let text = super::bundled::BUNDLED
                    .iter()
                    .find(|(name, _)| *name == stem)
                    .map(|(_, text)| text.trim_end())
                    .unwrap_or_else(|| panic!("bundled template {stem} missing"));
                let template = PromptTemplate::new(task, kind, text).expect("bundled templates are valid");
                templates.insert((task, kind), template);
            }
        }
        Self { templates }
    }

    /// Bundled templates overridden by any `<task>_<prompt>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, BackendError> {
        let mut set = Self::bundled();
        for task in TASKS {
            for kind in PromptKind::all() {
                let path = dir.join(format!("{}_{}.txt", task.as_str(), kind.key()));
                if path.exists() {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| BackendError::Template(format!("{}: {e}", path.display())))?;
                    set.templates
                        .insert((task, kind), PromptTemplate::new(task, kind, text.trim_end())?);
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, task: TaskKind, kind: PromptKind) -> Result<&PromptTemplate, BackendError> {
        self.templates
            .get(&(task, kind))
            .ok_or_else(|| BackendError::Template(format!("no template for {}_{}", task.as_str(), kind.key())))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_set_is_complete_and_valid() {
        let set = TemplateSet::bundled();
        for task in TASKS {
            for kind in PromptKind::all() {
                assert!(set.get(task, kind).is_ok());
            }
        }
    }

    #[test]
    fn duplicate_placeholder_is_rejected() {
        let err = PromptTemplate::new(
            TaskKind::ImageCls,
            PromptKind::Annotate(AnnotationStrategy::Naive),
            "{label_list_with_index} {label_list_with_index} {first_label}",
        );
        assert!(err.is_err());
        let unknown = PromptTemplate::new(
            TaskKind::ImageCls,
            PromptKind::Annotate(AnnotationStrategy::Naive),
            "{label_list_with_index} {first_label} {mystery}",
        );
        assert!(unknown.is_err());
    }

    #[test]
    fn render_fills_every_placeholder() {
        let item = Item {
            id: 0,
            content: ItemContent::Text { text: "so happy".into() },
            hidden_truth: None,
            label_space: vec!["anger".into(), "joy".into()],
            features: None,
        };
        let set = TemplateSet::bundled();
        let template = set
            .get(TaskKind::TextCls, PromptKind::Criticize(CriticismStrategy::Cot))
            .unwrap();
        let mut values = PromptValues::for_item(&item);
        values.label_index = Some("1".into());
        let text = template.render(&values);
        assert!(text.contains("so happy"));
        assert!(text.contains("0: anger, 1: joy"));
        assert!(placeholders(&text).is_empty(), "{text}");
    }

    #[test]
    fn overrides_replace_bundled_entries() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("image_cls_annotate_naive.txt"),
            "Labels: {label_list_with_index}. Example {first_label} -> [0].",
        )
        .unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        let t = set
            .get(TaskKind::ImageCls, PromptKind::Annotate(AnnotationStrategy::Naive))
            .unwrap();
        assert!(t.text.starts_with("Labels:"));
    }
}
