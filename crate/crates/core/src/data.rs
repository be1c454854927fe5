//! Items, datasets, annotation and review records, the correction operator and
//! JSONL persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate item id {0}")]
    DuplicateId(usize),
    #[error("item ids must be 0..{n} but id {id} is out of range")]
    NonContiguousIds { id: usize, n: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("item {0} has an empty label space")]
    EmptyLabelSpace(usize),
    #[error("item {item_id}: label {label} is outside a label space of size {size}")]
    InvalidLabel {
        item_id: usize,
        label: usize,
        size: usize,
    },
    #[error("review indicator set without a review for items {0:?}")]
    MissingReview(Vec<usize>),
    #[error("duplicate review for item {0}")]
    DuplicateReview(usize),
    #[error("no annotation for item {0}")]
    MissingAnnotation(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// What a backend is shown for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemContent {
    Image { path: String },
    Text { text: String },
    Vqa { question: String, image: String },
}

/// Broad task family, used to pick prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ImageCls,
    TextCls,
    Vqa,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ImageCls => "image_cls",
            TaskKind::TextCls => "text_cls",
            TaskKind::Vqa => "vqa",
        }
    }
}

impl ItemContent {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            ItemContent::Image { .. } => TaskKind::ImageCls,
            ItemContent::Text { .. } => TaskKind::TextCls,
            ItemContent::Vqa { .. } => TaskKind::Vqa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub content: ItemContent,
    /// Ground truth, only present for simulated or benchmark data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_truth: Option<usize>,
    pub label_space: Vec<String>,
    /// Raw feature vector for synthetic data sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl Item {
    pub fn num_labels(&self) -> usize {
        self.label_space.len()
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label < self.label_space.len() {
            Ok(())
        } else {
            Err(DataError::InvalidLabel {
                item_id: self.id,
                label,
                size: self.label_space.len(),
            })
        }
    }

    /// `"0: airplane, 1: automobile, ..."`
    pub fn label_list_with_index(&self) -> String {
        self.label_space
            .iter()
            .enumerate()
            .map(|(i, name)| format!("{i}: {name}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn validate(&self) -> Result<()> {
        if self.label_space.is_empty() {
            return Err(DataError::EmptyLabelSpace(self.id));
        }
        if let Some(truth) = self.hidden_truth {
            self.check_label(truth)?;
        }
        Ok(())
    }
}

/// Items indexed `0..N`, stored in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
}

impl Dataset {
    /// Validates ids (unique and contiguous from zero) and labels, then sorts by id.
    pub fn new(mut items: Vec<Item>) -> Result<Self> {
        if items.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let n = items.len();
        let mut seen = HashSet::with_capacity(n);
        for item in &items {
            if !seen.insert(item.id) {
                return Err(DataError::DuplicateId(item.id));
            }
        }
        for item in &items {
            if item.id >= n {
                return Err(DataError::NonContiguousIds { id: item.id, n });
            }
            item.validate()?;
        }
        items.sort_by_key(|item| item.id);
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> Option<&Item> {
        self.items.get(id)
    }

    /// Hidden truth for every item, or `None` if any item lacks it.
    pub fn hidden_truths(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|item| item.hidden_truth).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<Item> = read_jsonl(path)?;
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStrategy {
    Naive,
    Cot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: usize,
    /// `None` only when the backend never produced a parseable label.
    pub machine_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub strategy: AnnotationStrategy,
    pub backend_id: String,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub item_id: usize,
    pub human_label: usize,
    pub reviewer_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Machine,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedEntry {
    pub item_id: usize,
    pub final_label: Option<usize>,
    pub source: LabelSource,
    pub machine_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<usize>,
    /// Kept next to the human label so disagreements stay auditable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_truth: Option<usize>,
    pub delta: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectedDataset {
    pub entries: Vec<CorrectedEntry>,
}

impl CorrectedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn final_labels(&self) -> Vec<Option<usize>> {
        self.entries.iter().map(|e| e.final_label).collect()
    }

    /// Carry the sampling transform and criticizer estimate alongside each entry.
    pub fn attach_sampling(&mut self, pi: &[f64], error_probability: &[Option<f64>]) -> Result<()> {
        check_len(self.entries.len(), pi.len())?;
        check_len(self.entries.len(), error_probability.len())?;
        for (entry, (&p, &eps)) in self.entries.iter_mut().zip(pi.iter().zip(error_probability)) {
            entry.pi = Some(p);
            entry.error_probability = eps;
        }
        Ok(())
    }

    pub fn attach_truth(&mut self, dataset: &Dataset) -> Result<()> {
        check_len(self.entries.len(), dataset.len())?;
        for (entry, item) in self.entries.iter_mut().zip(dataset.items()) {
            entry.hidden_truth = item.hidden_truth;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            entries: read_jsonl(path)?,
        })
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DataError::LengthMismatch { expected, actual })
    }
}

/// Replace machine labels by human labels exactly where the review indicator is set.
///
/// `annotations` may arrive in any order but must cover ids `0..indicators.len()`.
pub fn apply_correction(
    annotations: &[AnnotationRecord],
    indicators: &[bool],
    reviews: &[ReviewRecord],
) -> Result<CorrectedDataset> {
    let n = indicators.len();
    check_len(n, annotations.len())?;
    let mut machine: Vec<Option<Option<usize>>> = vec![None; n];
    for record in annotations {
        if record.item_id >= n {
            return Err(DataError::NonContiguousIds { id: record.item_id, n });
        }
        if machine[record.item_id].replace(record.machine_label).is_some() {
            return Err(DataError::DuplicateId(record.item_id));
        }
    }
    let mut human: BTreeMap<usize, usize> = BTreeMap::new();
    for review in reviews {
        if human.insert(review.item_id, review.human_label).is_some() {
            return Err(DataError::DuplicateReview(review.item_id));
        }
    }
    let missing: Vec<usize> = (0..n)
        .filter(|&i| indicators[i] && !human.contains_key(&i))
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingReview(missing));
    }

    let mut entries = Vec::with_capacity(n);
    for (i, &delta) in indicators.iter().enumerate() {
        let machine_label = machine[i].ok_or(DataError::MissingAnnotation(i))?;
        let human_label = human.get(&i).copied();
        let (final_label, source) = if delta {
            (human_label, LabelSource::Human)
        } else {
            (machine_label, LabelSource::Machine)
        };
        entries.push(CorrectedEntry {
            item_id: i,
            final_label,
            source,
            machine_label,
            human_label,
            hidden_truth: None,
            delta,
            pi: None,
            error_probability: None,
        });
    }
    Ok(CorrectedDataset { entries })
}

/// Least budget that can fix every machine error, plus an optional buffer,
/// as an item count clamped to `n`.
pub fn ideal_budget(machine_accuracy: f64, n: usize, buffer: f64) -> usize {
    assert!(
        (0.0..=1.0).contains(&machine_accuracy),
        "machine accuracy must lie in [0, 1]"
    );
    assert!(buffer >= 0.0, "buffer must be non-negative");
    let raw = (1.0 - machine_accuracy + buffer) * n as f64;
    // absorb representation error such as (1 - 0.8848) * 50000 = 5759.999...
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    #[serde(default = "default_schema")]
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize one record as a JSONL line carrying the schema version.
pub fn to_jsonl_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(&EnvelopeRef {
        schema_version: SCHEMA_VERSION,
        record,
    })
    .expect("records serialize to JSON")
}

/// Write all records, replacing `path` atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = BufWriter::new(file);
        for record in records {
            writeln!(out, "{}", to_jsonl_line(record)).map_err(io_err(&tmp))?;
        }
        out.flush().map_err(io_err(&tmp))?;
        out.get_ref().sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Append one record to a JSONL file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(file, "{}", to_jsonl_line(record)).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Read every non-blank line. Errors name the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let envelope: Envelope<T> =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                line: index + 1,
                message: e.to_string(),
            })?;
        if envelope.schema_version > SCHEMA_VERSION {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: index + 1,
                message: format!("unsupported schema_version {}", envelope.schema_version),
            });
        }
        records.push(envelope.record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: usize, truth: Option<usize>) -> Item {
        Item {
            id,
            content: ItemContent::Text {
                text: format!("text {id}"),
            },
            hidden_truth: truth,
            label_space: vec!["neg".into(), "neu".into(), "pos".into(), "other".into()],
            features: None,
        }
    }

    fn annotation(item_id: usize, label: usize) -> AnnotationRecord {
        AnnotationRecord {
            item_id,
            machine_label: Some(label),
            reasoning: None,
            strategy: AnnotationStrategy::Naive,
            backend_id: "test".into(),
            parse_ok: true,
        }
    }

    fn review(item_id: usize, label: usize) -> ReviewRecord {
        ReviewRecord {
            item_id,
            human_label: label,
            reviewer_id: "r".into(),
            timestamp: 0,
        }
    }

    #[test]
    fn loads_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let mut text = String::new();
        for id in 0..3 {
            text.push_str(&format!(
                r#"{{"id":{id},"content":{{"type":"text","text":"t{id}"}},"label_space":["a","b"]}}"#
            ));
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.hidden_truths().is_none());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let items = vec![item(7, None), item(7, None)];
        assert!(matches!(Dataset::new(items), Err(DataError::DuplicateId(7))));
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(Dataset::load(&path), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":0,\"content\":{\"type\":\"text\",\"text\":\"x\"},\"label_space\":[\"a\"]}\n{oops\n",
        )
        .unwrap();
        match Dataset::load(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_truth_is_rejected() {
        assert!(matches!(
            Dataset::new(vec![item(0, Some(9))]),
            Err(DataError::InvalidLabel { label: 9, .. })
        ));
    }

    #[test]
    fn correction_identity_and_full_review() {
        let ann: Vec<_> = [1, 2, 3].iter().enumerate().map(|(i, &l)| annotation(i, l)).collect();
        let none = apply_correction(&ann, &[false; 3], &[]).unwrap();
        assert_eq!(none.final_labels(), vec![Some(1), Some(2), Some(3)]);
        assert!(none.entries.iter().all(|e| e.source == LabelSource::Machine));

        let reviews = vec![review(0, 1), review(1, 0), review(2, 3)];
        let all = apply_correction(&ann, &[true; 3], &reviews).unwrap();
        assert_eq!(all.final_labels(), vec![Some(1), Some(0), Some(3)]);
        assert!(all.entries.iter().all(|e| e.source == LabelSource::Human));
    }

    #[test]
    fn correction_selects_per_item() {
        let ann: Vec<_> = [1, 2, 3].iter().enumerate().map(|(i, &l)| annotation(i, l)).collect();
        let out = apply_correction(&ann, &[false, true, false], &[review(1, 0)]).unwrap();
        assert_eq!(out.final_labels(), vec![Some(1), Some(0), Some(3)]);
    }

    #[test]
    fn correction_requires_reviews() {
        let ann: Vec<_> = (0..3).map(|i| annotation(i, 0)).collect();
        match apply_correction(&ann, &[true, false, true], &[]) {
            Err(DataError::MissingReview(ids)) => assert_eq!(ids, vec![0, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ideal_budget_examples() {
        assert_eq!(ideal_budget(0.8848, 50_000, 0.0), 5760);
        assert_eq!(ideal_budget(1.0, 1000, 0.0), 0);
        assert_eq!(ideal_budget(0.8848, 50_000, 0.10), 10_760);
        assert_eq!(ideal_budget(0.0, 10, 0.5), 10);
    }

    proptest! {
        #[test]
        fn ideal_budget_monotone(a in 0.0f64..1.0, d in 0.0f64..1.0, n in 1usize..100_000, buf in 0.0f64..0.5) {
            let b = (a + d).min(1.0);
            prop_assert!(ideal_budget(b, n, buf) <= ideal_budget(a, n, buf));
            prop_assert!(ideal_budget(a, n, buf) <= n);
        }

        #[test]
        fn correction_is_pointwise(
            machine in proptest::collection::vec(0usize..4, 1..30),
            seed_labels in proptest::collection::vec(0usize..4, 30),
            mask in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let n = machine.len();
            let ann: Vec<_> = machine.iter().enumerate().map(|(i, &l)| annotation(i, l)).collect();
            let delta = &mask[..n];
            let reviews: Vec<_> = (0..n).filter(|&i| delta[i]).map(|i| review(i, seed_labels[i])).collect();
            let out = apply_correction(&ann, delta, &reviews).unwrap();
            for i in 0..n {
                let expected = if delta[i] { seed_labels[i] } else { machine[i] };
                prop_assert_eq!(out.entries[i].final_label, Some(expected));
                prop_assert_eq!(out.entries[i].source == LabelSource::Human, delta[i]);
            }
        }

        #[test]
        fn dataset_round_trip(truths in proptest::collection::vec(proptest::option::of(0usize..4), 1..20),
                              feats in proptest::collection::vec(-1e3f64..1e3, 3)) {
            let items: Vec<Item> = truths.iter().enumerate().map(|(i, &t)| {
                let mut it = item(i, t);
                if i % 2 == 0 {
                    it.features = Some(feats.clone());
                    it.content = ItemContent::Vqa { question: format!("q{i}?"), image: format!("img/{i}.png") };
                }
                it
            }).collect();
            let ds = Dataset::new(items).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            ds.save(&path).unwrap();
            prop_assert_eq!(Dataset::load(&path).unwrap(), ds);
        }
    }

    #[test]
    fn corrected_round_trip() {
        let ann: Vec<_> = (0..4).map(|i| annotation(i, i % 3)).collect();
        let mut out =
            apply_correction(&ann, &[true, false, false, true], &[review(0, 2), review(3, 1)]).unwrap();
        out.attach_sampling(&[1.0, 0.25, 0.0, 0.123456789], &[Some(0.9), Some(0.1), None, Some(0.7)])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrected.jsonl");
        out.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.contains("\"schema_version\":1") && l.contains("item_id")));
        assert_eq!(CorrectedDataset::load(&path).unwrap(), out);
    }
}
