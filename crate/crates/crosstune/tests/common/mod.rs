//! Helpers shared across the integration suites.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crosstune::harness::{ExperimentConfig, FtStrategy, MatrixConfig, RunRecord};
use crosstune::labelmap::{enumerate_permutation_pool, identity_mapping, symbol_mapping, DEFAULT_SYMBOLS};
use crosstune::metrics::{LabelSet, MetricKind};
use crosstune::prompt::{assemble, render, validate};
use crosstune::retrieval::Retriever;
use crosstune::task::synth::{make_synthetic_pair, SynthPairConfig};
use crosstune::task::{ClassDef, Corpus, Example, Split, TaskSpec};

pub fn median(xs: &mut Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn lset(labels: &[&str]) -> LabelSet {
    LabelSet::new(labels.iter().copied())
}

/// F1 scores recomputed the long way: one pass per (example, class) pair
/// into explicit counters, nothing shared with the library implementation.
pub mod brute {
    use super::LabelSet;

    struct Tally {
        tp: u64,
        fp: u64,
        fn_: u64,
    }

    fn tally(golds: &[LabelSet], preds: &[LabelSet], class: &str) -> Tally {
        let mut t = Tally { tp: 0, fp: 0, fn_: 0 };
        for i in 0..golds.len() {
            let in_gold = golds[i].contains(class);
            let in_pred = preds[i].contains(class);
            if in_gold && in_pred {
                t.tp += 1;
            }
            if !in_gold && in_pred {
                t.fp += 1;
            }
            if in_gold && !in_pred {
                t.fn_ += 1;
            }
        }
        t
    }

    fn f1(t: &Tally) -> f64 {
        let denom = 2 * t.tp + t.fp + t.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * t.tp as f64 / denom as f64
        }
    }

    pub fn macro_f1(classes: &[String], golds: &[LabelSet], preds: &[LabelSet]) -> f64 {
        let mut sum = 0.0;
        for class in classes {
            sum += f1(&tally(golds, preds, class));
        }
        sum / classes.len() as f64
    }

    pub fn micro_f1(classes: &[String], golds: &[LabelSet], preds: &[LabelSet]) -> f64 {
        let mut total = Tally { tp: 0, fp: 0, fn_: 0 };
        for class in classes {
            let t = tally(golds, preds, class);
            total.tp += t.tp;
            total.fp += t.fp;
            total.fn_ += t.fn_;
        }
        f1(&total)
    }
}

/// The task pair and schedule the directional experiments train on.
pub fn bundled_pair_config() -> SynthPairConfig {
    SynthPairConfig::default()
}

/// Writes the bundled pair into `dir` and returns the experiment template
/// the directional criteria share: d=32 model, lr 1e-3, warmup 40, 15
/// epochs.
pub fn write_bundled_pair(dir: &Path) -> ExperimentConfig {
    let pair = make_synthetic_pair(&bundled_pair_config()).unwrap();
    pair.a.write_to(dir).unwrap();
    pair.b.write_to(dir).unwrap();
    let mut cfg = ExperimentConfig {
        data_dir: dir.to_path_buf(),
        eval_task_id: "task_a".into(),
        ..ExperimentConfig::default()
    };
    cfg.optim.base_lr = 1e-3;
    cfg.optim.warmup_steps = 40;
    cfg.optim.epochs = 15;
    cfg
}

/// The four-run matrix behind the directional criteria: random-label and
/// regular fine-tuning on task a scored on the definition-rotated task b,
/// plus regular fine-tuning and the untrained model scored on task a itself.
pub fn directional_matrix(dir: &Path, seeds: &[u64]) -> MatrixConfig {
    let template = write_bundled_pair(dir);
    let mk = |eval: &str, ft: Option<&str>, strategy: FtStrategy| {
        let mut c = template.clone();
        c.eval_task_id = eval.into();
        c.ft_task_id = ft.map(String::from);
        c.strategy = strategy;
        c.seeds = seeds.to_vec();
        c
    };
    MatrixConfig {
        runs: vec![
            mk("task_b", Some("task_a"), FtStrategy::RandomLabel),
            mk("task_b", Some("task_a"), FtStrategy::Regular),
            mk("task_a", Some("task_a"), FtStrategy::Regular),
            mk("task_a", None, FtStrategy::None),
        ],
    }
}

/// Per-shot medians over seeds for one (eval task, strategy) condition.
pub fn shot_medians(
    records: &[RunRecord],
    eval: &str,
    strategy: FtStrategy,
) -> Result<Vec<f64>, String> {
    let mut per_shot: Vec<Vec<f64>> = vec![Vec::new(); 6];
    for r in records.iter().filter(|r| r.eval_task == eval && r.strategy == strategy) {
        if let Some(e) = &r.error {
            return Err(format!("seed {} failed: {e}", r.seed));
        }
        for (&shot, &score) in &r.scores {
            per_shot[shot].push(score);
        }
    }
    per_shot
        .iter_mut()
        .enumerate()
        .map(|(shot, v)| {
            if v.is_empty() {
                Err(format!("no scores at {shot} shots for {eval}/{strategy:?}"))
            } else {
                Ok(median(v))
            }
        })
        .collect()
}

/// Fixed call-routing task used by the golden prompt files.
pub fn routing_task() -> TaskSpec {
    let class = |name: &str, definition: &str| ClassDef {
        name: name.into(),
        definition: definition.into(),
    };
    TaskSpec {
        task_id: "support_calls".into(),
        multi_label: false,
        metric: MetricKind::MacroF1,
        instruction: "You are a call triage assistant. Route the transcribed call to the right queue."
            .into(),
        guidelines: "Answer with category names only, separated by commas.".into(),
        label_space: vec![
            class("billing", "the caller asks about charges, refunds, or an invoice"),
            class("outage", "the caller reports that the service is down or degraded"),
            class("upgrade", "the caller wants a better plan or newer hardware"),
        ],
    }
}

pub fn routing_corpus() -> Corpus {
    let items: &[(&str, &str, &str)] = &[
        ("call_01", "my last invoice doubled and nobody can explain the charges", "billing"),
        ("call_02", "requesting a refund for the duplicate payment on tuesday", "billing"),
        ("call_03", "internet has been down on our whole street since midnight", "outage"),
        ("call_04", "the line keeps dropping every few minutes and pages load degraded", "outage"),
        ("call_05", "i want the faster plan you advertised with the new router", "upgrade"),
        ("call_06", "can i trade my old handset for newer hardware this month", "upgrade"),
    ];
    Corpus {
        task_id: "support_calls".into(),
        split: Split::Train,
        examples: items
            .iter()
            .map(|&(id, text, label)| Example::new(id, text, &[label]))
            .collect(),
    }
}

pub fn routing_query() -> Example {
    Example::new(
        "call_q",
        "hello i was billed twice this cycle and want those charges reversed",
        &["billing"],
    )
}

/// Renders every golden prompt case as (file name, text). Each case also
/// re-passes structural validation here, so a broken fixture fails loudly
/// instead of producing a bad golden file.
pub fn golden_cases() -> Vec<(&'static str, String)> {
    let task = routing_task();
    let corpus = routing_corpus();
    let query = routing_query();
    let retriever = Retriever::from_corpora(&[&corpus]).unwrap();

    let identity = identity_mapping(&task);
    let symbols = symbol_mapping(&task, &DEFAULT_SYMBOLS).unwrap();
    let pool = enumerate_permutation_pool(&task, false).unwrap();
    // Definitions rotated one step: billing shows the outage definition.
    let rotated = pool
        .mappings
        .iter()
        .find(|m| m.permutation() == [1, 2, 0])
        .unwrap();

    let mut cases = Vec::new();
    let mut push = |name: &'static str, mapping, k: usize, include_target: bool| {
        let demos = retriever.retrieve(&query, k, &BTreeSet::new(), mapping).unwrap();
        let bundle = assemble(&task, mapping, &demos, &query, include_target).unwrap();
        validate(&bundle).unwrap();
        cases.push((name, render(&bundle)));
    };
    push("eval_0shot.txt", &identity, 0, false);
    push("eval_2shot.txt", &identity, 2, false);
    push("train_2shot_target.txt", &identity, 2, true);
    push("symbol_2shot_target.txt", &symbols, 2, true);
    push("rotated_2shot_target.txt", rotated, 2, true);
    cases
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}
