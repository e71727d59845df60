//! Fine-tuning stream construction. Per training example: draw a shot
//! count in 0..=5, retrieve that many demonstrations from the training
//! split (the example itself excluded), draw the label mapping the
//! strategy prescribes, and render one prompt in which demonstrations and
//! target share that single mapping. The whole schedule is logged so the
//! shared-mapping invariant can be audited after the fact.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{FinetuneExample, ModelBackend};
use super::config::{ExperimentConfig, FtStrategy};
use super::{load_split, load_task, subseed, HarnessError};
use crate::hash::Fnv64;
use crate::labelmap::{
    draw_for_batch, enumerate_permutation_pool, identity_mapping, sample_permutation_pool,
    symbol_mapping, LabelMapping, MappingPool, DEFAULT_SYMBOLS,
};
use crate::model::OptimConfig;
use crate::prompt::{assemble, render};
use crate::retrieval::{display_labels_for, sample_shot_count, Retriever};
use crate::task::{Corpus, Split, TaskSpec};

/// One training batch's audit row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingScheduleRow {
    pub step: usize,
    pub epoch: usize,
    pub example_id: String,
    pub shots: usize,
    /// Pool index for random-label draws; fixed-mapping strategies log none.
    pub mapping_index: Option<usize>,
    pub mapping_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct FinetunePlan {
    pub stream: Vec<FinetuneExample>,
    pub schedule: Vec<MappingScheduleRow>,
    /// The run's optimizer config with `total_steps` spanning the stream,
    /// so the cosine phase anneals to zero exactly at the end of training.
    pub optim: OptimConfig,
}

enum MappingSource {
    Fixed(LabelMapping),
    Pool(MappingPool),
}

pub fn build_finetune_plan(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    train: &Corpus,
    seed: u64,
) -> Result<FinetunePlan, HarnessError> {
    if train.examples.is_empty() {
        return Err(HarnessError::Config(format!(
            "training corpus for {} is empty",
            task.task_id
        )));
    }
    let source = match cfg.strategy {
        FtStrategy::None => {
            return Err(HarnessError::Config(
                "strategy none has no fine-tuning plan".into(),
            ))
        }
        FtStrategy::Regular => MappingSource::Fixed(identity_mapping(task)),
        FtStrategy::Symbol => MappingSource::Fixed(symbol_mapping(task, &DEFAULT_SYMBOLS)?),
        FtStrategy::RandomLabel => MappingSource::Pool(match cfg.pool_size {
            None => enumerate_permutation_pool(task, cfg.include_identity)?,
            Some(n) => {
                sample_permutation_pool(task, n, subseed(seed, "pool"), cfg.include_identity)?
            }
        }),
    };

    let retriever = Retriever::from_corpora(&[train])?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "schedule"));
    let mut stream = Vec::new();
    let mut schedule = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..train.examples.len()).collect();
        order.shuffle(&mut rng);
        for idx in order {
            let example = &train.examples[idx];
            step += 1;
            let shots = sample_shot_count(&mut rng);
            let mapping = match &source {
                MappingSource::Fixed(m) => m,
                MappingSource::Pool(pool) => draw_for_batch(pool, &mut rng)?,
            };
            let exclude: BTreeSet<String> = [example.id.clone()].into();
            let demos = retriever.retrieve(example, shots, &exclude, mapping)?;
            let bundle = assemble(task, mapping, &demos, example, false)?;
            stream.push(FinetuneExample {
                prompt: render(&bundle),
                target: display_labels_for(mapping, example)?.join(", "),
            });
            schedule.push(MappingScheduleRow {
                step,
                epoch,
                example_id: example.id.clone(),
                shots,
                mapping_index: mapping.pool_index,
                mapping_fingerprint: mapping.reference().fingerprint,
            });
        }
    }

    let mut optim = cfg.optim.clone();
    optim.total_steps = stream.len().div_ceil(optim.accumulation.max(1));
    if optim.warmup_steps >= optim.total_steps {
        return Err(HarnessError::Config(format!(
            "warmup_steps {} will not fit a run of {} optimizer steps; lower warmup_steps or train on more data",
            optim.warmup_steps, optim.total_steps
        )));
    }
    Ok(FinetunePlan {
        stream,
        schedule,
        optim,
    })
}

/// Fine-tunes `backend` per the config, returning the trained backend and
/// the mapping-schedule log.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
    seed: u64,
) -> Result<(Box<dyn ModelBackend>, Vec<MappingScheduleRow>), HarnessError> {
    if !backend.can_finetune() {
        return Err(HarnessError::Backend(
            "configured backend cannot fine-tune".into(),
        ));
    }
    let ft_id = cfg
        .ft_task_id
        .as_ref()
        .ok_or_else(|| HarnessError::Config("ft_task_id is required to fine-tune".into()))?;
    let task = load_task(&cfg.data_dir, ft_id)?;
    let train = load_split(&cfg.data_dir, &task, Split::Train)?;
    let plan = build_finetune_plan(cfg, &task, &train, seed)?;
    let trained = backend.finetune(&plan.stream, &plan.optim, seed)?;
    Ok((trained, plan.schedule))
}

pub fn schedule_fingerprint(rows: &[MappingScheduleRow]) -> u64 {
    let mut h = Fnv64::new();
    for row in rows {
        h.update_str(&serde_json::to_string(row).expect("schedule row serializes"));
    }
    h.finish()
}

pub fn write_schedule(path: &Path, rows: &[MappingScheduleRow]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("schedule row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| HarnessError::RunLog {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_schedule(path: &Path) -> Result<Vec<MappingScheduleRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::RunLog {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(line).map_err(|e| HarnessError::RunLog {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?,
        );
    }
    Ok(rows)
}
