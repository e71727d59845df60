//! The experiment matrix. Every (config, seed) pair is one cell; cells run
//! in parallel and fail independently, so a broken corpus or a diverged
//! training run lands in that cell's record instead of aborting the sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::labelmap::{identity_mapping, symbol_mapping, LabelMapping, DEFAULT_SYMBOLS};
use crate::prompt::build_vocab;
use crate::task::{Corpus, Split, TaskSpec};

use super::backend::{ConstantBackend, ModelBackend, OracleBackend, ToyBackend};
use super::config::{config_hash, BackendKind, ExperimentConfig, FtStrategy, MatrixConfig};
use super::finetune::{run_finetune, schedule_fingerprint};
use super::runlog::RunRecord;
use super::sweep::run_eval_sweep;
use super::table::EvalTable;
use super::{load_split, load_task, HarnessError};

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub records: Vec<RunRecord>,
    pub table: EvalTable,
}

/// Builds the backend a config asks for.
///
/// The toy backend's vocabulary spans every task and split the run touches
/// (like a pretrained tokenizer that has seen both domains), so evaluating
/// on a task other than the fine-tuning one never hits unknown class names.
pub fn build_backend(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Box<dyn ModelBackend>, HarnessError> {
    match cfg.backend {
        BackendKind::Oracle => {
            let task = load_task(&cfg.data_dir, &cfg.eval_task_id)?;
            let eval = load_split(&cfg.data_dir, &task, Split::Eval)?;
            Ok(Box::new(OracleBackend::from_corpora(&[&eval])))
        }
        BackendKind::Constant => {
            let answer = cfg.constant_answer.clone().ok_or_else(|| {
                HarnessError::Config("constant backend needs constant_answer".into())
            })?;
            Ok(Box::new(ConstantBackend { answer }))
        }
        BackendKind::Toy => Ok(Box::new(build_toy_backend(cfg, seed)?)),
    }
}

/// The toy backend with its vocabulary fitted to everything the run
/// touches. Concrete so callers can checkpoint it.
pub fn build_toy_backend(cfg: &ExperimentConfig, seed: u64) -> Result<ToyBackend, HarnessError> {
    ToyBackend::new(toy_vocab(cfg)?, toy_multi_label(cfg)?, &cfg.model, toy_n_classes(cfg)?, seed)
}

/// The vocabulary [`build_toy_backend`] fits, exposed so a checkpoint can
/// be re-hosted against the same config.
pub fn toy_vocab(cfg: &ExperimentConfig) -> Result<crate::prompt::Vocab, HarnessError> {
    let (tasks, corpora) = toy_world(cfg)?;
    let mut views: Vec<(usize, LabelMapping)> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (i, identity_mapping(t)))
        .collect();
    if cfg.strategy == FtStrategy::Symbol {
        let ft_idx = tasks.len() - 1;
        views.push((ft_idx, symbol_mapping(&tasks[ft_idx], &DEFAULT_SYMBOLS)?));
    }
    let corpus_refs: Vec<&Corpus> = corpora.iter().collect();
    let view_refs: Vec<(&TaskSpec, &LabelMapping)> =
        views.iter().map(|(i, m)| (&tasks[*i], m)).collect();
    Ok(build_vocab(&corpus_refs, &view_refs)?)
}

pub fn toy_multi_label(cfg: &ExperimentConfig) -> Result<bool, HarnessError> {
    Ok(toy_world(cfg)?.0[0].multi_label)
}

pub fn toy_n_classes(cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
    Ok(toy_world(cfg)?.0[0].label_space.len())
}

/// Loads the tasks and splits the run touches: the eval task first with
/// its three splits, then the fine-tune task with its train split when it
/// is a different task. Checks the two label spaces are head-compatible.
fn toy_world(cfg: &ExperimentConfig) -> Result<(Vec<TaskSpec>, Vec<Corpus>), HarnessError> {
    let eval_task = load_task(&cfg.data_dir, &cfg.eval_task_id)?;
    let mut corpora = vec![
        load_split(&cfg.data_dir, &eval_task, Split::Train)?,
        load_split(&cfg.data_dir, &eval_task, Split::Validation)?,
        load_split(&cfg.data_dir, &eval_task, Split::Eval)?,
    ];
    let mut tasks = vec![eval_task];
    if let Some(ft_id) = cfg.ft_task_id.as_ref() {
        if *ft_id != cfg.eval_task_id {
            let ft_task = load_task(&cfg.data_dir, ft_id)?;
            corpora.push(load_split(&cfg.data_dir, &ft_task, Split::Train)?);
            tasks.push(ft_task);
        }
    }
    // The head is sized once; the model cannot retarget between label
    // spaces of different width or arity.
    let eval_task = &tasks[0];
    let ft_task = tasks.last().unwrap();
    if ft_task.label_space.len() != eval_task.label_space.len() {
        return Err(HarnessError::Config(format!(
            "fine-tune task {} has {} classes but eval task {} has {}",
            ft_task.task_id,
            ft_task.label_space.len(),
            eval_task.task_id,
            eval_task.label_space.len()
        )));
    }
    if ft_task.multi_label != eval_task.multi_label {
        return Err(HarnessError::Config(format!(
            "fine-tune task {} and eval task {} disagree on multi_label",
            ft_task.task_id, eval_task.task_id
        )));
    }
    Ok((tasks, corpora))
}

fn run_cell_inner(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    let base = build_backend(cfg, seed)?;
    let (backend, fingerprint) = match cfg.strategy {
        FtStrategy::None => (base, None),
        _ => {
            let (trained, schedule) = run_finetune(cfg, base.as_ref(), seed)?;
            let fp = format!("{:016x}", schedule_fingerprint(&schedule));
            (trained, Some(fp))
        }
    };
    let sweep = run_eval_sweep(cfg, backend.as_ref())?;
    let scores: BTreeMap<usize, f64> = sweep
        .scores
        .iter()
        .map(|s| (s.shots, s.report.aggregate))
        .collect();
    Ok(RunRecord {
        config_hash: config_hash(cfg),
        eval_task: cfg.eval_task_id.clone(),
        ft_task: cfg.ft_task_id.clone(),
        strategy: cfg.strategy,
        seed,
        scores,
        schedule_fingerprint: fingerprint,
        checkpoint_path: None,
        error: None,
    })
}

/// Never panics and never errors; failure goes into the record.
fn run_cell(cfg: &ExperimentConfig, seed: u64) -> RunRecord {
    run_cell_inner(cfg, seed).unwrap_or_else(|e| RunRecord {
        config_hash: config_hash(cfg),
        eval_task: cfg.eval_task_id.clone(),
        ft_task: cfg.ft_task_id.clone(),
        strategy: cfg.strategy,
        seed,
        scores: BTreeMap::new(),
        schedule_fingerprint: None,
        checkpoint_path: None,
        error: Some(e.to_string()),
    })
}

/// Runs every cell of the matrix. Record order follows config order with
/// seeds nested inside, regardless of which cell finishes first.
pub fn run_matrix(matrix: &MatrixConfig) -> Result<MatrixOutcome, HarnessError> {
    matrix.validate()?;
    let cells: Vec<(&ExperimentConfig, u64)> = matrix
        .runs
        .iter()
        .flat_map(|cfg| cfg.seeds.iter().map(move |&s| (cfg, s)))
        .collect();
    let records: Vec<RunRecord> = cells
        .par_iter()
        .map(|(cfg, seed)| run_cell(cfg, *seed))
        .collect();
    let table = EvalTable::from_records(&records);
    Ok(MatrixOutcome { records, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::table::{report, ReportFormat};
    use crate::model::OptimConfig;
    use crate::task::synth::{make_synthetic_pair, SynthPairConfig};
    use crate::metrics::MetricKind;
    use crate::task::{write_corpus, write_task_spec, ClassDef, Example};
    use std::path::{Path, PathBuf};

    fn pair_dir() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let pair = make_synthetic_pair(&SynthPairConfig {
            train_per_class: 6,
            validation_per_class: 2,
            eval_per_class: 3,
            ..SynthPairConfig::default()
        })
        .unwrap();
        pair.a.write_to(dir.path()).unwrap();
        pair.b.write_to(dir.path()).unwrap();
        let path = dir.path().to_path_buf();
        (dir, path)
    }

    fn oracle_cfg(data_dir: &Path, eval_task: &str, seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            data_dir: data_dir.to_path_buf(),
            eval_task_id: eval_task.into(),
            backend: BackendKind::Oracle,
            shots: vec![0, 2],
            seeds,
            ..ExperimentConfig::default()
        }
    }

    fn toy_cfg(data_dir: &Path, strategy: FtStrategy) -> ExperimentConfig {
        ExperimentConfig {
            data_dir: data_dir.to_path_buf(),
            eval_task_id: "task_b".into(),
            ft_task_id: (strategy != FtStrategy::None).then(|| "task_a".to_string()),
            strategy,
            shots: vec![0, 1],
            seeds: vec![0],
            optim: OptimConfig {
                epochs: 2,
                warmup_steps: 5,
                ..OptimConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn every_config_seed_cell_runs_in_order() {
        let (_dir, data) = pair_dir();
        let matrix = MatrixConfig {
            runs: vec![
                oracle_cfg(&data, "task_a", vec![0, 1]),
                oracle_cfg(&data, "task_b", vec![0]),
            ],
        };
        let outcome = run_matrix(&matrix).unwrap();
        assert_eq!(outcome.records.len(), 3);
        assert_eq!(outcome.records[0].eval_task, "task_a");
        assert_eq!(outcome.records[0].seed, 0);
        assert_eq!(outcome.records[1].eval_task, "task_a");
        assert_eq!(outcome.records[1].seed, 1);
        assert_eq!(outcome.records[2].eval_task, "task_b");
        assert_eq!(outcome.table.rows.len(), 2);
        for record in &outcome.records {
            assert!(record.error.is_none());
            for (&shots, &score) in &record.scores {
                assert!(score == 1.0, "oracle should be perfect at {shots} shots");
            }
        }
    }

    #[test]
    fn cells_fail_independently() {
        let (_dir, data) = pair_dir();
        let matrix = MatrixConfig {
            runs: vec![
                oracle_cfg(&data, "task_a", vec![0]),
                oracle_cfg(&data, "task_zz", vec![0]),
            ],
        };
        let outcome = run_matrix(&matrix).unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert!(outcome.records[0].error.is_none());
        let failed = &outcome.records[1];
        assert!(failed.error.is_some());
        assert!(failed.scores.is_empty());
        let row = outcome
            .table
            .rows
            .iter()
            .find(|(k, _)| k.eval_task == "task_zz")
            .unwrap()
            .1;
        assert_eq!(row.errors.len(), 1);
    }

    #[test]
    fn finetune_runs_exactly_when_a_strategy_is_set() {
        let (_dir, data) = pair_dir();
        let matrix = MatrixConfig {
            runs: vec![
                toy_cfg(&data, FtStrategy::None),
                toy_cfg(&data, FtStrategy::RandomLabel),
            ],
        };
        let outcome = run_matrix(&matrix).unwrap();
        assert_eq!(outcome.records[0].error, None);
        assert_eq!(outcome.records[1].error, None);
        assert!(outcome.records[0].schedule_fingerprint.is_none());
        let fp = outcome.records[1].schedule_fingerprint.as_ref().unwrap();
        assert_eq!(fp.len(), 16);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (_dir, data) = pair_dir();
        let matrix = MatrixConfig {
            runs: vec![
                toy_cfg(&data, FtStrategy::RandomLabel),
                toy_cfg(&data, FtStrategy::Symbol),
            ],
        };
        let first = run_matrix(&matrix).unwrap();
        let second = run_matrix(&matrix).unwrap();
        let ser =
            |records: &[RunRecord]| serde_json::to_string(records).expect("records serialize");
        assert_eq!(ser(&first.records), ser(&second.records));
        assert_eq!(
            report(&first.table, ReportFormat::Csv),
            report(&second.table, ReportFormat::Csv)
        );
        assert_eq!(
            report(&first.table, ReportFormat::Markdown),
            report(&second.table, ReportFormat::Markdown)
        );
    }

    fn write_extra_task(
        data_dir: &Path,
        task_id: &str,
        n_classes: usize,
        multi_label: bool,
    ) {
        let label_space: Vec<ClassDef> = (0..n_classes)
            .map(|i| ClassDef {
                name: format!("c{i}"),
                definition: format!("class number {i}"),
            })
            .collect();
        let task = TaskSpec {
            task_id: task_id.into(),
            multi_label,
            metric: MetricKind::MacroF1,
            instruction: "Classify the input.".into(),
            guidelines: "Answer with class names.".into(),
            label_space,
        };
        write_task_spec(&data_dir.join(format!("{task_id}.task.json")), &task).unwrap();
        let corpus = Corpus {
            task_id: task_id.into(),
            split: Split::Train,
            examples: (0..n_classes)
                .map(|i| {
                    let label = format!("c{i}");
                    Example::new(
                        format!("x{i}"),
                        format!("token{i} token{i}"),
                        &[label.as_str()],
                    )
                })
                .collect(),
        };
        write_corpus(&data_dir.join(format!("{task_id}.train.jsonl")), &corpus).unwrap();
    }

    #[test]
    fn toy_backend_rejects_mismatched_task_shapes() {
        let (_dir, data) = pair_dir();
        write_extra_task(&data, "wide", 4, false);
        write_extra_task(&data, "multi", 3, true);

        let mut cfg = toy_cfg(&data, FtStrategy::Regular);
        cfg.ft_task_id = Some("wide".into());
        let err = build_backend(&cfg, 0).err().unwrap();
        assert!(err.to_string().contains("classes"), "{err}");

        cfg.ft_task_id = Some("multi".into());
        let err = build_backend(&cfg, 0).err().unwrap();
        assert!(err.to_string().contains("multi_label"), "{err}");
    }

    #[test]
    fn constant_backend_requires_an_answer() {
        let (_dir, data) = pair_dir();
        let mut cfg = oracle_cfg(&data, "task_a", vec![0]);
        cfg.backend = BackendKind::Constant;
        cfg.constant_answer = None;
        let err = build_backend(&cfg, 0).err().unwrap();
        assert!(err.to_string().contains("constant_answer"));
    }
}
