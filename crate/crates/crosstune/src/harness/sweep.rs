//! Evaluation sweeps. Whatever the backend was trained with, evaluation
//! prompts always carry the task's own class definitions: the identity
//! mapping, checked on every single prompt. Demonstrations come from the
//! train and validation splits pooled together.

use std::collections::BTreeSet;

use super::backend::ModelBackend;
use super::config::ExperimentConfig;
use super::{load_split, load_task, HarnessError};
use crate::labelmap::identity_mapping;
use crate::metrics::{parse_prediction, score, LabelSet, ScoreReport};
use crate::prompt::{assemble, render, validate};
use crate::retrieval::Retriever;
use crate::task::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct ShotScore {
    pub shots: usize,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub eval_task_id: String,
    pub scores: Vec<ShotScore>,
}

impl SweepResult {
    pub fn aggregate_at(&self, shots: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.shots == shots)
            .map(|s| s.report.aggregate)
    }
}

pub fn run_eval_sweep(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
) -> Result<SweepResult, HarnessError> {
    let task = load_task(&cfg.data_dir, &cfg.eval_task_id)?;
    let train = load_split(&cfg.data_dir, &task, Split::Train)?;
    let validation = load_split(&cfg.data_dir, &task, Split::Validation)?;
    let eval = load_split(&cfg.data_dir, &task, Split::Eval)?;
    if eval.examples.is_empty() {
        return Err(HarnessError::Config(format!(
            "evaluation corpus for {} is empty",
            task.task_id
        )));
    }

    let retriever = Retriever::from_corpora(&[&train, &validation])?;
    let identity = identity_mapping(&task);
    let identity_ref = identity.reference();
    let golds: Vec<LabelSet> = eval
        .examples
        .iter()
        .map(|e| LabelSet::from(&e.labels))
        .collect();

    let mut scores = Vec::with_capacity(cfg.shots.len());
    for &k in &cfg.shots {
        let mut preds = Vec::with_capacity(eval.examples.len());
        for example in &eval.examples {
            let exclude: BTreeSet<String> = [example.id.clone()].into();
            let demos = retriever.retrieve(example, k, &exclude, &identity)?;
            let bundle = assemble(&task, &identity, &demos, example, false)?;
            validate(&bundle)?;
            if bundle.mapping_ref != identity_ref {
                return Err(HarnessError::Invariant(format!(
                    "evaluation prompt for {} was not assembled under the identity mapping",
                    example.id
                )));
            }
            if bundle.shot_count != demos.len() {
                return Err(HarnessError::Invariant(format!(
                    "evaluation prompt for {} carries {} demonstrations, expected {}",
                    example.id,
                    bundle.shot_count,
                    demos.len()
                )));
            }
            let raw = backend.generate(&render(&bundle))?;
            preds.push(parse_prediction(&raw, &task, &identity));
        }
        let report = score(&golds, &preds, &task)?;
        scores.push(ShotScore { shots: k, report });
    }
    Ok(SweepResult {
        eval_task_id: task.task_id.clone(),
        scores,
    })
}
