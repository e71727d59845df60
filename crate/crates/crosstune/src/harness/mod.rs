//! Experiment orchestration: fine-tuning runs, 0..5-shot evaluation
//! sweeps, the strategy-by-task run matrix, run persistence, and the
//! text-backend abstraction the toy model plugs into.
//!
//! Two invariants the whole experiment design leans on are enforced here
//! rather than trusted: evaluation prompts always carry the task's own
//! class definitions (identity mapping) no matter how the backend was
//! fine-tuned, and within one training example the demonstrations and the
//! target are remapped under the same mapping instance.

pub mod backend;
pub mod config;
pub mod finetune;
pub mod matrix;
pub mod runlog;
pub mod sweep;
pub mod table;

pub use backend::{
    ConstantBackend, FinetuneExample, ModelBackend, OracleBackend, ToyBackend,
};
pub use config::{
    config_hash, load_experiment_config, load_matrix_config, AdapterSpec, BackendKind,
    ExperimentConfig, FtStrategy, MatrixConfig, ModelConfig,
};
pub use finetune::{
    build_finetune_plan, read_schedule, run_finetune, schedule_fingerprint, write_schedule,
    FinetunePlan, MappingScheduleRow,
};
pub use matrix::{
    build_backend, build_toy_backend, run_matrix, toy_multi_label, toy_vocab, MatrixOutcome,
};
pub use runlog::{load_runs, persist_runs, RunRecord};
pub use sweep::{run_eval_sweep, ShotScore, SweepResult};
pub use table::{report, EvalTable, ReportFormat, TableKey, TableRow};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hash::Fnv64;
use crate::labelmap::MappingError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::prompt::PromptError;
use crate::retrieval::RetrievalError;
use crate::task::{load_corpus, load_task_spec, Corpus, Split, TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("run log {path}: {message}")]
    RunLog { path: String, message: String },
}

/// Stable per-purpose seed derivation, so one run seed can feed several
/// independent generators without them sharing streams.
pub(crate) fn subseed(seed: u64, label: &str) -> u64 {
    let mut h = Fnv64::new();
    h.update(&seed.to_le_bytes());
    h.update_str(label);
    h.finish()
}

pub fn task_path(data_dir: &Path, task_id: &str) -> PathBuf {
    data_dir.join(format!("{task_id}.task.json"))
}

pub fn corpus_path(data_dir: &Path, task_id: &str, split: Split) -> PathBuf {
    data_dir.join(format!("{task_id}.{}.jsonl", split.as_str()))
}

pub fn load_task(data_dir: &Path, task_id: &str) -> Result<TaskSpec, HarnessError> {
    Ok(load_task_spec(&task_path(data_dir, task_id))?)
}

pub fn load_split(
    data_dir: &Path,
    task: &TaskSpec,
    split: Split,
) -> Result<Corpus, HarnessError> {
    Ok(load_corpus(
        &corpus_path(data_dir, &task.task_id, split),
        task,
        split,
    )?)
}
