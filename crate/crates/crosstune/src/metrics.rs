//! Prediction parsing and F1 scoring.
//!
//! Scoring conventions worth knowing before comparing numbers elsewhere:
//!
//! - Macro-F1 averages over ALL classes in the label space. A class with no
//!   gold and no predicted occurrences contributes F1 = 0, the conservative
//!   convention. On corpora that do not cover every class this caps the
//!   achievable macro score below 1.
//! - Parsing matches display names token-exactly, never by substring, so
//!   "neutral" does not fire inside "neutrality". For single-label tasks the
//!   first recognized label wins and the rest are dropped.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelmap::LabelMapping;
use crate::prompt::tokenize_words;
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MacroF1,
    MicroF1,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::MicroF1 => "micro_f1",
        })
    }
}

/// A set of gold-space class names. Gold sets are never empty; predicted
/// sets may be (nothing recognized in the model output).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: BTreeSet<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LabelSet {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn empty() -> Self {
        LabelSet::default()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
}

impl From<&BTreeSet<String>> for LabelSet {
    fn from(labels: &BTreeSet<String>) -> Self {
        LabelSet {
            labels: labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_class: Vec<ClassScore>,
    pub aggregate: f64,
    pub metric: MetricKind,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold and prediction counts differ: {golds} vs {preds}")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("cannot score an empty instance list")]
    EmptyInput,
    #[error("gold label set at index {index} is empty")]
    EmptyGold { index: usize },
    #[error("label {label:?} at index {index} is not a class of task {task_id:?}")]
    UnknownClass {
        label: String,
        index: usize,
        task_id: String,
    },
}

/// Extracts the predicted label set from free-form model output.
///
/// The text is lowercased and split on commas, semicolons, and newlines;
/// each piece is word-tokenized and scanned for display names of `mapping`
/// (a display name matches only as a contiguous run of whole tokens).
/// Matches are inverted to gold names. Unrecognized text is dropped, so an
/// unparseable answer scores as all false negatives rather than erroring.
pub fn parse_prediction(raw: &str, task: &TaskSpec, mapping: &LabelMapping) -> LabelSet {
    let display_tokens: Vec<(Vec<String>, &str)> = mapping
        .entries
        .iter()
        .map(|e| (tokenize_words(&e.display_name), e.gold_name.as_str()))
        .collect();

    let mut found: Vec<&str> = Vec::new();
    for piece in raw.split(|c| c == ',' || c == ';' || c == '\n') {
        let tokens = tokenize_words(piece);
        let mut i = 0;
        while i < tokens.len() {
            // Longest display name starting at this token wins, so a
            // one-token name never shadows a longer one it prefixes.
            let matched = display_tokens
                .iter()
                .filter(|(name, _)| {
                    !name.is_empty()
                        && i + name.len() <= tokens.len()
                        && tokens[i..i + name.len()] == name[..]
                })
                .max_by_key(|(name, _)| name.len());
            if let Some((name, gold)) = matched {
                if !found.contains(gold) {
                    found.push(*gold);
                }
                i += name.len();
            } else {
                i += 1;
            }
        }
    }
    if !task.multi_label {
        found.truncate(1);
    }
    LabelSet::new(found)
}

struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

fn validate_inputs(
    golds: &[LabelSet],
    preds: &[LabelSet],
    task: &TaskSpec,
) -> Result<(), MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    for (index, gold) in golds.iter().enumerate() {
        if gold.is_empty() {
            return Err(MetricsError::EmptyGold { index });
        }
    }
    for (index, set) in golds.iter().chain(preds.iter()).enumerate() {
        for label in &set.labels {
            if !task.has_class(label) {
                return Err(MetricsError::UnknownClass {
                    label: label.clone(),
                    index: index % golds.len(),
                    task_id: task.task_id.clone(),
                });
            }
        }
    }
    Ok(())
}

fn count_class(golds: &[LabelSet], preds: &[LabelSet], class: &str) -> Counts {
    let mut counts = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
    };
    for (gold, pred) in golds.iter().zip(preds) {
        match (gold.contains(class), pred.contains(class)) {
            (true, true) => counts.tp += 1,
            (false, true) => counts.fp += 1,
            (true, false) => counts.fn_ += 1,
            (false, false) => {}
        }
    }
    counts
}

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn per_class_scores(golds: &[LabelSet], preds: &[LabelSet], task: &TaskSpec) -> Vec<ClassScore> {
    task.label_space
        .iter()
        .map(|class| {
            let c = count_class(golds, preds, &class.name);
            let (precision, recall, f1) = prf(c.tp, c.fp, c.fn_);
            ClassScore {
                class: class.name.clone(),
                precision,
                recall,
                f1,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over the whole label space.
pub fn macro_f1(
    golds: &[LabelSet],
    preds: &[LabelSet],
    task: &TaskSpec,
) -> Result<ScoreReport, MetricsError> {
    validate_inputs(golds, preds, task)?;
    let per_class = per_class_scores(golds, preds, task);
    let aggregate = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(ScoreReport {
        per_class,
        aggregate,
        metric: MetricKind::MacroF1,
    })
}

/// F1 of the tp/fp/fn counts pooled across all classes.
pub fn micro_f1(
    golds: &[LabelSet],
    preds: &[LabelSet],
    task: &TaskSpec,
) -> Result<ScoreReport, MetricsError> {
    validate_inputs(golds, preds, task)?;
    let per_class = per_class_scores(golds, preds, task);
    let tp: u64 = per_class.iter().map(|c| c.tp).sum();
    let fp: u64 = per_class.iter().map(|c| c.fp).sum();
    let fn_: u64 = per_class.iter().map(|c| c.fn_).sum();
    let denom = 2 * tp + fp + fn_;
    let aggregate = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Ok(ScoreReport {
        per_class,
        aggregate,
        metric: MetricKind::MicroF1,
    })
}

/// Scores under the task's declared metric.
pub fn score(
    golds: &[LabelSet],
    preds: &[LabelSet],
    task: &TaskSpec,
) -> Result<ScoreReport, MetricsError> {
    match task.metric {
        MetricKind::MacroF1 => macro_f1(golds, preds, task),
        MetricKind::MicroF1 => micro_f1(golds, preds, task),
    }
}

impl ScoreReport {
    /// Header matching [`Self::csv_row`]: fixed run columns, then one F1
    /// column per class.
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "task".to_string(),
            "strategy".to_string(),
            "shots".to_string(),
            "metric".to_string(),
            "aggregate".to_string(),
        ];
        cols.extend(self.per_class.iter().map(|c| format!("f1_{}", c.class)));
        cols.join(",")
    }

    pub fn csv_row(&self, task_id: &str, strategy: &str, shots: usize) -> String {
        let mut cols = vec![
            task_id.to_string(),
            strategy.to_string(),
            shots.to_string(),
            self.metric.to_string(),
            format!("{:.6}", self.aggregate),
        ];
        cols.extend(self.per_class.iter().map(|c| format!("{:.6}", c.f1)));
        cols.join(",")
    }
}
