//! Shared fixtures for unit tests.

use crate::metrics::MetricKind;
use crate::task::{ClassDef, TaskSpec};

pub(crate) fn sentiment3() -> TaskSpec {
    TaskSpec {
        task_id: "sentiment3".into(),
        multi_label: false,
        metric: MetricKind::MacroF1,
        instruction: "Classify the overall sentiment of the statement below.".into(),
        guidelines: "Respond with exactly one class name and nothing else.".into(),
        label_space: vec![
            ClassDef {
                name: "positive".into(),
                definition: "any hint of approval or happiness".into(),
            },
            ClassDef {
                name: "negative".into(),
                definition: "any hint of criticism or sadness".into(),
            },
            ClassDef {
                name: "neutral".into(),
                definition: "no discernible emotional lean either way".into(),
            },
        ],
    }
}

pub(crate) fn dialog18() -> TaskSpec {
    let names = [
        "acknowledge",
        "answer_agree",
        "answer_dis",
        "answer_general",
        "apology",
        "backchannel",
        "disfluency",
        "other",
        "question_check",
        "question_general",
        "question_repeat",
        "self_talk",
        "statement_close",
        "statement_general",
        "statement_instruct",
        "statement_open",
        "statement_problem",
        "thanks",
    ];
    TaskSpec {
        task_id: "dialog18".into(),
        multi_label: true,
        metric: MetricKind::MacroF1,
        instruction: "Identify all applicable dialogue actions from the given categories.".into(),
        guidelines: "Respond with a comma-separated list of category names.".into(),
        label_space: names
            .iter()
            .map(|n| ClassDef {
                name: n.to_string(),
                definition: format!("utterances functioning as {}", n.replace('_', " ")),
            })
            .collect(),
    }
}
