//! Command-line front end.
//!
//! Exit codes: 0 success; 1 failed self-check; 2 usage or config; 3 task
//! or data; 4 model, backend, or training; 5 run-log IO.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crosstune::harness::{
    build_finetune_plan, build_toy_backend, config_hash, load_experiment_config,
    load_matrix_config, load_runs, persist_runs, run_eval_sweep, run_matrix, schedule_fingerprint,
    toy_vocab, write_schedule, BackendKind, ExperimentConfig, FtStrategy, HarnessError, RunRecord,
    ToyBackend,
};
use crosstune::harness::{load_split, load_task, report, EvalTable, ReportFormat};
use crosstune::model::checkpoint::{load_checkpoint, save_checkpoint};
use crosstune::model::train::write_loss_trace;
use crosstune::task::synth::{make_synthetic_pair, SynthPairConfig};
use crosstune::task::{load_corpus, load_task_spec, write_corpus, write_task_spec, Split, TaskError};

#[derive(Parser)]
#[command(
    name = "crosstune",
    version,
    about = "Fine-tuning strategies and few-shot evaluation for prompted classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a task spec and corpus file, then copy them into the data layout.
    Ingest {
        /// Task spec JSON.
        #[arg(long)]
        task: PathBuf,
        /// Corpus JSONL for one split.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Fine-tune the toy backend per a config; write checkpoint, loss trace,
    /// and mapping schedule.
    Train {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory for checkpoint.bin, trace.csv, schedule.jsonl.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over the config's shot counts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Append a run record here.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Run every config x seed cell and print the median table.
    Matrix {
        /// Matrix config JSON: {"runs": [...]} or a single experiment object.
        #[arg(long)]
        config: PathBuf,
        /// Append all run records here.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
    /// Rebuild the median table from a run log.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
    /// Generate the synthetic matched/mismatched task pair.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        train_per_class: usize,
        #[arg(long, default_value_t = 6)]
        validation_per_class: usize,
        #[arg(long, default_value_t = 12)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 16)]
        vocab_size: usize,
    },
    /// Run gradient, metric, schedule, and oracle self-tests.
    Check {
        /// Seeds for the finite-difference gradient sweep.
        #[arg(long, default_value_t = 20)]
        gradient_seeds: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Failure {
        let code = match &e {
            HarnessError::Config(_) => 2,
            HarnessError::Task(_)
            | HarnessError::Mapping(_)
            | HarnessError::Retrieval(_)
            | HarnessError::Prompt(_)
            | HarnessError::Metrics(_) => 3,
            HarnessError::Model(_) | HarnessError::Backend(_) | HarnessError::Invariant(_) => 4,
            HarnessError::RunLog { .. } => 5,
        };
        fail(code, e.to_string())
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Failure {
        fail(3, e.to_string())
    }
}

impl From<crosstune::model::ModelError> for Failure {
    fn from(e: crosstune::model::ModelError) -> Failure {
        fail(4, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Ingest {
            task,
            corpus,
            split,
            data_dir,
        } => ingest(&task, &corpus, split.into(), &data_dir),
        Command::Train { config, seed, out } => train(&config, seed, &out),
        Command::Sweep {
            config,
            checkpoint,
            runs,
        } => sweep(&config, &checkpoint, runs.as_deref()),
        Command::Matrix {
            config,
            runs,
            format,
        } => matrix(&config, runs.as_deref(), format.into()),
        Command::Report { runs, format } => rebuild_report(&runs, format.into()),
        Command::Synth {
            seed,
            classes,
            out,
            train_per_class,
            validation_per_class,
            eval_per_class,
            vocab_size,
        } => synth(
            SynthPairConfig {
                seed,
                n_classes: classes,
                train_per_class,
                validation_per_class,
                eval_per_class,
                vocab_size,
            },
            &out,
        ),
        Command::Check { gradient_seeds } => check(gradient_seeds),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| fail(5, format!("cannot create {}: {e}", dir.display())))
}

fn ingest(task_file: &Path, corpus_file: &Path, split: Split, data_dir: &Path) -> Result<ExitCode, Failure> {
    let task = load_task_spec(task_file)?;
    let corpus = load_corpus(corpus_file, &task, split)?;
    ensure_dir(data_dir)?;
    let task_dest = data_dir.join(format!("{}.task.json", task.task_id));
    let corpus_dest = data_dir.join(format!("{}.{}.jsonl", task.task_id, split));
    write_task_spec(&task_dest, &task)?;
    write_corpus(&corpus_dest, &corpus)?;
    println!(
        "ingested task {} ({} classes) -> {}",
        task.task_id,
        task.label_space.len(),
        task_dest.display()
    );
    println!(
        "ingested {} {} examples -> {}",
        corpus.examples.len(),
        split,
        corpus_dest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn loaded_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = load_experiment_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(config: &Path, seed: u64, out: &Path) -> Result<ExitCode, Failure> {
    let cfg = loaded_config(config)?;
    if cfg.backend != BackendKind::Toy {
        return Err(fail(2, "train requires the toy backend"));
    }
    if cfg.strategy == FtStrategy::None {
        return Err(fail(2, "train requires a fine-tuning strategy other than none"));
    }
    let ft_id = cfg
        .ft_task_id
        .clone()
        .ok_or_else(|| fail(2, "train requires ft_task_id"))?;

    let backend = build_toy_backend(&cfg, seed)?;
    let task = load_task(&cfg.data_dir, &ft_id)?;
    let train_split = load_split(&cfg.data_dir, &task, Split::Train)?;
    let plan = build_finetune_plan(&cfg, &task, &train_split, seed)?;
    let trained = backend.finetuned(&plan.stream, &plan.optim, seed)?;

    ensure_dir(out)?;
    let ckpt_path = out.join("checkpoint.bin");
    let trace_path = out.join("trace.csv");
    let schedule_path = out.join("schedule.jsonl");
    save_checkpoint(&ckpt_path, &trained.to_checkpoint(seed))?;
    write_loss_trace(&trace_path, trained.loss_trace())?;
    write_schedule(&schedule_path, &plan.schedule)?;

    let trace = trained.loss_trace();
    println!(
        "trained {} on {}: {} steps, loss {:.4} -> {:.4}",
        cfg.strategy.as_str(),
        ft_id,
        trace.len(),
        trace.first().map(|r| r.loss).unwrap_or(f64::NAN),
        trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
    );
    println!("schedule fingerprint {:016x}", schedule_fingerprint(&plan.schedule));
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", trace_path.display());
    println!("wrote {}", schedule_path.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(config: &Path, checkpoint: &Path, runs: Option<&Path>) -> Result<ExitCode, Failure> {
    let cfg = loaded_config(config)?;
    if cfg.backend != BackendKind::Toy {
        return Err(fail(2, "sweep loads checkpoints, which only the toy backend produces"));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let seed = ckpt.seed;
    let vocab = toy_vocab(&cfg)?;
    let multi_label = crosstune::harness::toy_multi_label(&cfg)?;
    let backend = ToyBackend::from_checkpoint(ckpt, vocab, multi_label, cfg.model.train_scope)?;

    let result = run_eval_sweep(&cfg, &backend)?;
    println!("eval {} ({})", result.eval_task_id, cfg.strategy.as_str());
    for shot in &result.scores {
        println!("  {} shots: {:.4}", shot.shots, shot.report.aggregate);
    }

    if let Some(runs_path) = runs {
        let record = RunRecord {
            config_hash: config_hash(&cfg),
            eval_task: cfg.eval_task_id.clone(),
            ft_task: cfg.ft_task_id.clone(),
            strategy: cfg.strategy,
            seed,
            scores: result
                .scores
                .iter()
                .map(|s| (s.shots, s.report.aggregate))
                .collect(),
            schedule_fingerprint: None,
            checkpoint_path: Some(checkpoint.display().to_string()),
            error: None,
        };
        persist_runs(runs_path, &[record])?;
        println!("appended run record to {}", runs_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn matrix(config: &Path, runs: Option<&Path>, format: ReportFormat) -> Result<ExitCode, Failure> {
    let mcfg = load_matrix_config(config)?;
    let outcome = run_matrix(&mcfg)?;

    let failed: Vec<&RunRecord> = outcome.records.iter().filter(|r| r.error.is_some()).collect();
    for record in &failed {
        eprintln!(
            "warning: cell ({}, seed {}) failed: {}",
            record.eval_task,
            record.seed,
            record.error.as_deref().unwrap_or("")
        );
    }
    if let Some(runs_path) = runs {
        persist_runs(runs_path, &outcome.records)?;
        eprintln!("appended {} run records to {}", outcome.records.len(), runs_path.display());
    }
    print!("{}", report(&outcome.table, format));

    if !failed.is_empty() && failed.len() == outcome.records.len() {
        return Err(fail(4, "every matrix cell failed"));
    }
    Ok(ExitCode::SUCCESS)
}

fn rebuild_report(runs: &Path, format: ReportFormat) -> Result<ExitCode, Failure> {
    let (records, skipped) = load_runs(runs)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unreadable records");
    }
    if records.is_empty() {
        return Err(fail(2, format!("{} holds no readable run records", runs.display())));
    }
    print!("{}", report(&EvalTable::from_records(&records), format));
    Ok(ExitCode::SUCCESS)
}

fn synth(cfg: SynthPairConfig, out: &Path) -> Result<ExitCode, Failure> {
    let pair = make_synthetic_pair(&cfg)?;
    ensure_dir(out)?;
    let mut written = pair.a.write_to(out)?;
    written.extend(pair.b.write_to(out)?);
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!(
        "task_a and task_b share {} classes over a {}-word vocabulary; definitions are rotated between them",
        cfg.n_classes, cfg.vocab_size
    );
    Ok(ExitCode::SUCCESS)
}

fn check(gradient_seeds: u64) -> Result<ExitCode, Failure> {
    let mut failed = 0;
    for (name, outcome) in crosstune::selfcheck::run_all(gradient_seeds) {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(explanation) => {
                failed += 1;
                println!("FAIL {name}: {explanation}");
            }
        }
    }
    if failed > 0 {
        return Err(fail(1, format!("{failed} self-check(s) failed")));
    }
    Ok(ExitCode::SUCCESS)
}
