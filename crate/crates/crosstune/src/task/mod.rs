//! Task schemas, labeled examples, and corpora.
//!
//! A [`TaskSpec`] names an ordered label space of [`ClassDef`]s plus the
//! instruction/guideline texts that frame every prompt. A [`Corpus`] is an
//! ordered list of validated [`Example`]s for one split of one task.
//!
//! File formats:
//! - task spec: one JSON document with `task_id`, `multi_label`, `metric`,
//!   `instruction`, `guidelines`, `label_space: [{name, definition}]`
//! - corpus: JSONL, one `{"id", "text", "labels": [...], "audio_path"?}`
//!   record per line, UTF-8 with LF line endings
//!
//! Unknown fields in corpus records are carried through load/write untouched
//! so externally produced manifests survive a round trip. `audio_path` is an
//! opaque reference: nothing in this crate decodes audio; at desk scale the
//! transcript in `text` stands in for the spoken query.

pub mod synth;

pub use synth::{
    decode_by_definitions, definition_triggers, make_synthetic_pair, make_synthetic_task,
    SynthPairConfig, SyntheticPair, TaskFiles,
};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricKind;

/// One class of a task's label space: a short name plus the free-text
/// definition the strategies permute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub definition: String,
}

/// A classification task: ordered label space, instruction and guideline
/// texts, single/multi-label flag, and the metric the task is scored with.
///
/// The metric is declared in the task file, never inferred from
/// `multi_label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub multi_label: bool,
    pub metric: MetricKind,
    pub instruction: String,
    pub guidelines: String,
    pub label_space: Vec<ClassDef>,
}

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labeled utterance. `text` is the transcript; `audio_ref` is carried
/// opaquely (serialized as `audio_path`) and never decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<String>,
    #[serde(rename = "audio_path", default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    /// Unknown record fields, preserved verbatim for write-back.
    #[serde(flatten, default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A validated, ordered list of examples for one split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task_id: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}:{line}: bad corpus record: {message}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("task {task_id:?}: label space needs at least 2 classes, got {got}")]
    TooFewClasses { task_id: String, got: usize },
    #[error("task {task_id:?}: duplicate class name {name:?}")]
    DuplicateClassName { task_id: String, name: String },
    #[error("task {task_id:?}: class name {name:?} must be non-empty and contain no whitespace")]
    BadClassName { task_id: String, name: String },
    #[error("task {task_id:?}: class {name:?} has an empty definition")]
    EmptyDefinition { task_id: String, name: String },
    #[error("task {task_id:?}: {field} contains a reserved <Speech> tag")]
    ReservedTag { task_id: String, field: String },
    #[error("example {id:?}: label {label:?} is not in task {task_id:?}'s label space")]
    UnknownLabel {
        id: String,
        label: String,
        task_id: String,
    },
    #[error("example {id:?}: single-label task {task_id:?} requires exactly 1 label, got {got}")]
    LabelArity {
        id: String,
        task_id: String,
        got: usize,
    },
    #[error("example {id:?}: gold label set is empty")]
    EmptyLabels { id: String },
    #[error("duplicate example id {id:?}")]
    DuplicateId { id: String },
    #[error("example {id:?}: text contains a reserved <Speech> tag")]
    TextReservedTag { id: String },
    #[error("corpus has {got} examples, expected {expected}")]
    CountMismatch { got: usize, expected: usize },
    #[error("synthetic task: {0}")]
    Synth(String),
}

pub(crate) fn contains_speech_tag(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("<speech>") || lower.contains("</speech>")
}

impl TaskSpec {
    /// Checks every structural invariant. Called by every loader; exposed for
    /// programmatically built specs.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.label_space.len() < 2 {
            return Err(TaskError::TooFewClasses {
                task_id: self.task_id.clone(),
                got: self.label_space.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for class in &self.label_space {
            if class.name.is_empty() || class.name.chars().any(char::is_whitespace) {
                return Err(TaskError::BadClassName {
                    task_id: self.task_id.clone(),
                    name: class.name.clone(),
                });
            }
            if class.definition.trim().is_empty() {
                return Err(TaskError::EmptyDefinition {
                    task_id: self.task_id.clone(),
                    name: class.name.clone(),
                });
            }
            if !seen.insert(class.name.as_str()) {
                return Err(TaskError::DuplicateClassName {
                    task_id: self.task_id.clone(),
                    name: class.name.clone(),
                });
            }
            if contains_speech_tag(&class.definition) {
                return Err(TaskError::ReservedTag {
                    task_id: self.task_id.clone(),
                    field: format!("definition of {:?}", class.name),
                });
            }
        }
        for (field, text) in [("instruction", &self.instruction), ("guidelines", &self.guidelines)]
        {
            if contains_speech_tag(text) {
                return Err(TaskError::ReservedTag {
                    task_id: self.task_id.clone(),
                    field: field.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.label_space.iter().map(|c| c.name.as_str())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.label_space.iter().position(|c| c.name == name)
    }

    pub fn has_class(&self, name: &str) -> bool {
        self.class_index(name).is_some()
    }

    /// Validates one example against this task's label space and arity rules.
    pub fn validate_example(&self, example: &Example) -> Result<(), TaskError> {
        if example.labels.is_empty() {
            return Err(TaskError::EmptyLabels {
                id: example.id.clone(),
            });
        }
        if !self.multi_label && example.labels.len() != 1 {
            return Err(TaskError::LabelArity {
                id: example.id.clone(),
                task_id: self.task_id.clone(),
                got: example.labels.len(),
            });
        }
        for label in &example.labels {
            if !self.has_class(label) {
                return Err(TaskError::UnknownLabel {
                    id: example.id.clone(),
                    label: label.clone(),
                    task_id: self.task_id.clone(),
                });
            }
        }
        if contains_speech_tag(&example.text) {
            return Err(TaskError::TextReservedTag {
                id: example.id.clone(),
            });
        }
        Ok(())
    }
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: &[&str]) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            audio_ref: None,
            extra: serde_json::Map::new(),
        }
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Opt-in dataset-size check; corpora may legally be subsets of the
    /// official splits, so this is never enforced at load time.
    pub fn verify_count(&self, expected: usize) -> Result<(), TaskError> {
        if self.len() != expected {
            return Err(TaskError::CountMismatch {
                got: self.len(),
                expected,
            });
        }
        Ok(())
    }
}

/// Loads and validates a task-spec JSON document.
pub fn load_task_spec(path: &Path) -> Result<TaskSpec, TaskError> {
    let raw = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    task_spec_from_json(&raw).map_err(|e| match e {
        TaskError::Parse { message, .. } => TaskError::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Parses and validates a task spec from a JSON string.
pub fn task_spec_from_json(raw: &str) -> Result<TaskSpec, TaskError> {
    let spec: TaskSpec = serde_json::from_str(raw).map_err(|e| TaskError::Parse {
        path: PathBuf::from("<inline>"),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Writes a task spec as pretty-printed JSON.
pub fn write_task_spec(path: &Path, spec: &TaskSpec) -> Result<(), TaskError> {
    let json = serde_json::to_string_pretty(spec).expect("task spec serializes");
    fs::write(path, json + "\n").map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a JSONL corpus, validating every record against `task`.
/// Record order is preserved; blank lines are skipped.
pub fn load_corpus(path: &Path, task: &TaskSpec, split: Split) -> Result<Corpus, TaskError> {
    let raw = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut examples = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(line).map_err(|e| TaskError::BadRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        task.validate_example(&example)?;
        if !seen_ids.insert(example.id.clone()) {
            return Err(TaskError::DuplicateId { id: example.id });
        }
        examples.push(example);
    }
    Ok(Corpus {
        task_id: task.task_id.clone(),
        split,
        examples,
    })
}

/// Writes a corpus in the JSONL format `load_corpus` reads.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), TaskError> {
    let mut out = Vec::new();
    for example in &corpus.examples {
        serde_json::to_writer(&mut out, example).expect("example serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dialog18, sentiment3};
    use tempfile::TempDir;

    #[test]
    fn load_task_spec_three_class() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("sentiment3.task.json");
        write_task_spec(&path, &sentiment3()).unwrap();
        let spec = load_task_spec(&path).unwrap();
        assert_eq!(spec.n_classes(), 3);
        assert!(!spec.multi_label);
        assert_eq!(spec.metric, MetricKind::MacroF1);
        // Ordering preserved from file.
        assert_eq!(
            spec.class_names().collect::<Vec<_>>(),
            ["positive", "negative", "neutral"]
        );
    }

    #[test]
    fn load_task_spec_eighteen_class_multi_label() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("dialog18.task.json");
        write_task_spec(&path, &dialog18()).unwrap();
        let spec = load_task_spec(&path).unwrap();
        assert_eq!(spec.n_classes(), 18);
        assert!(spec.multi_label);
    }

    #[test]
    fn duplicate_class_name_rejected() {
        let mut spec = sentiment3();
        spec.label_space.push(ClassDef {
            name: "neutral".into(),
            definition: "again".into(),
        });
        assert!(matches!(
            spec.validate(),
            Err(TaskError::DuplicateClassName { name, .. }) if name == "neutral"
        ));
    }

    #[test]
    fn tiny_label_space_rejected() {
        let mut spec = sentiment3();
        spec.label_space.truncate(1);
        assert!(matches!(
            spec.validate(),
            Err(TaskError::TooFewClasses { got: 1, .. })
        ));
    }

    #[test]
    fn parse_failure_reported_with_path() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("broken.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_task_spec(&path),
            Err(TaskError::Parse { .. })
        ));
    }

    #[test]
    fn corpus_record_validation() {
        let task = sentiment3();
        let ok = Example::new("e1", "lovely weather today", &["positive"]);
        task.validate_example(&ok).unwrap();

        let two = Example::new("e2", "hm", &["positive", "negative"]);
        assert!(matches!(
            task.validate_example(&two),
            Err(TaskError::LabelArity { got: 2, .. })
        ));

        let unknown = Example::new("e3", "hm", &["joyful"]);
        assert!(matches!(
            task.validate_example(&unknown),
            Err(TaskError::UnknownLabel { label, .. }) if label == "joyful"
        ));

        let tagged = Example::new("e4", "hello <Speech> there", &["neutral"]);
        assert!(matches!(
            task.validate_example(&tagged),
            Err(TaskError::TextReservedTag { .. })
        ));
    }

    #[test]
    fn corpus_round_trip_preserves_records_and_extra_fields() {
        let task = sentiment3();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("train.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","text":"great stuff","labels":["positive"],"audio_path":"x/a.wav","speaker":"s1"}"#,
                "\n",
                r#"{"id":"b","text":"meh","labels":["neutral"]}"#,
                "\n",
            ),
        )
        .unwrap();
        let corpus = load_corpus(&path, &task, Split::Train).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.examples[0].audio_ref.as_deref(), Some("x/a.wav"));
        assert_eq!(
            corpus.examples[0].extra.get("speaker"),
            Some(&serde_json::json!("s1"))
        );

        let out = dir.path().join("roundtrip.jsonl");
        write_corpus(&out, &corpus).unwrap();
        let reloaded = load_corpus(&out, &task, Split::Train).unwrap();
        assert_eq!(reloaded, corpus);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let task = sentiment3();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("dup.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","text":"x","labels":["positive"]}"#,
                "\n",
                r#"{"id":"a","text":"y","labels":["negative"]}"#,
                "\n",
            ),
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path, &task, Split::Train),
            Err(TaskError::DuplicateId { id }) if id == "a"
        ));
    }

    #[test]
    fn empty_corpus_is_legal() {
        let task = sentiment3();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let corpus = load_corpus(&path, &task, Split::Eval).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn count_check_is_opt_in() {
        let task = sentiment3();
        let corpus = Corpus {
            task_id: task.task_id.clone(),
            split: Split::Eval,
            examples: vec![Example::new("a", "x", &["positive"])],
        };
        corpus.verify_count(1).unwrap();
        assert!(matches!(
            corpus.verify_count(3553),
            Err(TaskError::CountMismatch { got: 1, expected: 3553 })
        ));
    }
}
