//! Fine-tuning strategies for cross-task in-context learning, at desk scale.
//!
//! The crate covers the full experiment loop for studying how the fine-tuning
//! strategy affects few-shot generalization to tasks unseen during training:
//!
//! - [`task`]: task schemas, labeled corpora, and synthetic definition-dependent
//!   tasks for desk-scale experiments
//! - [`labelmap`]: the strategies as transformations of the class-name ->
//!   definition mapping (identity, symbolic names, seeded permutation pools)
//! - [`retrieval`]: TF-IDF demonstration retrieval and shot-count sampling
//! - [`prompt`]: six-segment prompt assembly plus the tokenizer/vocabulary used
//!   by the toy backend
//! - [`metrics`]: free-text prediction parsing and macro/micro-averaged F1
//! - [`model`]: a from-scratch single-block attention classifier with LoRA
//!   adapters, warmup-cosine schedule, clipping and accumulation
//! - [`harness`]: fine-tuning runs, 0-5 shot evaluation sweeps, run logs,
//!   reports, and the model-backend abstraction
//!
//! Everything is deterministic under explicit seeds: identical configuration
//! and seeds reproduce run logs and reports byte for byte.

pub mod harness;
pub mod hash;
pub mod labelmap;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod retrieval;
pub mod selfcheck;
pub mod task;

#[cfg(test)]
pub(crate) mod testutil;

pub use labelmap::{LabelMapping, MappingPool, Strategy};
pub use metrics::{LabelSet, MetricKind, ScoreReport};
pub use task::{ClassDef, Corpus, Example, Split, TaskSpec};
