//! Synthetic definition-dependent tasks for desk-scale experiments.
//!
//! Each class is tied to a small disjoint set of trigger words; the class
//! definition names those words and every example's text contains exactly the
//! trigger words of its gold class plus filler words. Labels are therefore
//! recoverable *only* through the in-context class definitions (plus the
//! text), never from any prior meaning of the class names, which is what a
//! study of definition-following fine-tuning needs from its data.
//!
//! [`make_synthetic_pair`] additionally derives a second task over the same
//! vocabulary whose name -> definition association is rotated, so a model
//! fine-tuned on task A can be evaluated on an unseen, deliberately
//! conflicting task B.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_corpus, write_task_spec, ClassDef, Corpus, Example, Split, TaskError, TaskSpec};
use crate::labelmap::DEFAULT_SYMBOLS;
use crate::metrics::MetricKind;
use crate::prompt::{tokenize_words, TEMPLATE_WORDS};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TRIGGERS_PER_CLASS: usize = 2;
const CLASS_LETTERS: &[u8] = b"abcdefghijklmnopqr";

const INSTRUCTION: &str =
    "You are a message routing assistant. Assign the message below to the single best category.";
const GUIDELINES: &str = "Respond with exactly one category name and nothing else.";

/// Fixed wording shared by every synthetic class definition; everything in a
/// definition that is not scaffold is a trigger word.
const DEFINITION_SCAFFOLD: &[&str] = &[
    "applies", "when", "the", "message", "mentions", "cue", "words", "and",
];

fn definition_text(triggers: &[String]) -> String {
    format!(
        "applies when the message mentions the cue words {} and {}",
        triggers[0], triggers[1]
    )
}

/// Extracts the trigger words of a synthetic class definition by stripping
/// the scaffold wording.
pub fn definition_triggers(definition: &str) -> Vec<String> {
    tokenize_words(definition)
        .into_iter()
        .filter(|t| !DEFINITION_SCAFFOLD.contains(&t.as_str()))
        .collect()
}

/// Rule-based decoder: the unique class whose definition's trigger words all
/// appear in `text`, or `None` if no class (or more than one) matches. Reads
/// nothing but the current definitions and the text, so it certifies that a
/// synthetic task is solvable purely from definitions.
pub fn decode_by_definitions(task: &TaskSpec, text: &str) -> Option<String> {
    let tokens: BTreeSet<String> = tokenize_words(text).into_iter().collect();
    let mut hit = None;
    for class in &task.label_space {
        let triggers = definition_triggers(&class.definition);
        if !triggers.is_empty() && triggers.iter().all(|t| tokens.contains(t)) {
            if hit.is_some() {
                return None;
            }
            hit = Some(class.name.clone());
        }
    }
    hit
}

/// Words that may appear in rendered prompts for reasons other than an
/// example's content; the synthetic vocabulary must avoid them so trigger
/// and filler words never collide with scaffolding.
fn stop_words() -> BTreeSet<String> {
    let mut stop: BTreeSet<String> = DEFINITION_SCAFFOLD.iter().map(|s| s.to_string()).collect();
    stop.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
    stop.extend(DEFAULT_SYMBOLS.iter().map(|s| s.to_string()));
    stop.extend(tokenize_words(INSTRUCTION));
    stop.extend(tokenize_words(GUIDELINES));
    stop
}

/// Deterministic pseudo-word grid: consonant-vowel-consonant-vowel.
fn word_grid() -> Vec<String> {
    let stop = stop_words();
    let mut words = Vec::new();
    for &c1 in CONSONANTS {
        for &v1 in VOWELS {
            for &c2 in CONSONANTS {
                for &v2 in VOWELS {
                    let w = String::from_utf8(vec![c1, v1, c2, v2]).unwrap();
                    if !stop.contains(&w) {
                        words.push(w);
                    }
                }
            }
        }
    }
    words
}

struct TaskRecipe {
    task_id: String,
    names: Vec<String>,
    /// `assignment[i]` = index of the trigger set carried by class `i`.
    assignment: Vec<usize>,
}

struct SynthWorld {
    trigger_sets: Vec<Vec<String>>,
    fillers: Vec<String>,
}

fn build_world(rng: &mut ChaCha8Rng, n_classes: usize, vocab_size: usize) -> SynthWorld {
    let mut grid = word_grid();
    grid.shuffle(rng);
    grid.truncate(vocab_size);
    let trigger_sets: Vec<Vec<String>> = (0..n_classes)
        .map(|i| grid[i * TRIGGERS_PER_CLASS..(i + 1) * TRIGGERS_PER_CLASS].to_vec())
        .collect();
    let fillers = grid[n_classes * TRIGGERS_PER_CLASS..].to_vec();
    SynthWorld {
        trigger_sets,
        fillers,
    }
}

fn build_task(recipe: &TaskRecipe, world: &SynthWorld) -> TaskSpec {
    let label_space = recipe
        .names
        .iter()
        .zip(&recipe.assignment)
        .map(|(name, &set)| ClassDef {
            name: name.clone(),
            definition: definition_text(&world.trigger_sets[set]),
        })
        .collect();
    TaskSpec {
        task_id: recipe.task_id.clone(),
        multi_label: false,
        metric: MetricKind::MacroF1,
        instruction: INSTRUCTION.to_string(),
        guidelines: GUIDELINES.to_string(),
        label_space,
    }
}

fn gen_corpus(
    recipe: &TaskRecipe,
    world: &SynthWorld,
    split: Split,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Corpus {
    let n = recipe.names.len();
    let mut examples = Vec::with_capacity(n * per_class);
    for idx in 0..n * per_class {
        let class = idx % n;
        let triggers = &world.trigger_sets[recipe.assignment[class]];
        let n_fillers = rng.random_range(3..=5);
        let filler_idx = rand::seq::index::sample(rng, world.fillers.len(), n_fillers);
        let mut tokens: Vec<&str> = triggers.iter().map(String::as_str).collect();
        tokens.extend(filler_idx.iter().map(|i| world.fillers[i].as_str()));
        tokens.shuffle(rng);
        examples.push(Example::new(
            format!("{}_{}_{:04}", recipe.task_id, split, idx),
            tokens.join(" "),
            &[recipe.names[class].as_str()],
        ));
    }
    Corpus {
        task_id: recipe.task_id.clone(),
        split,
        examples,
    }
}

fn check_params(n_classes: usize, examples_per_class: usize, vocab_size: usize) -> Result<(), TaskError> {
    if n_classes < 2 {
        return Err(TaskError::Synth(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if n_classes > CLASS_LETTERS.len() {
        return Err(TaskError::Synth(format!(
            "at most {} classes supported, got {n_classes}",
            CLASS_LETTERS.len()
        )));
    }
    if examples_per_class < 1 {
        return Err(TaskError::Synth("examples_per_class must be >= 1".into()));
    }
    if vocab_size < n_classes * 4 {
        return Err(TaskError::Synth(format!(
            "vocab_size must be at least 4 * n_classes = {}, got {vocab_size}",
            n_classes * 4
        )));
    }
    Ok(())
}

fn class_names(n_classes: usize) -> Vec<String> {
    CLASS_LETTERS[..n_classes]
        .iter()
        .map(|&c| format!("label_{}", c as char))
        .collect()
}

/// Generates one definition-dependent task with a train and an eval corpus
/// (eval holds half as many examples per class, at least one). Deterministic
/// under `seed`.
pub fn make_synthetic_task(
    seed: u64,
    n_classes: usize,
    examples_per_class: usize,
    vocab_size: usize,
) -> Result<(TaskSpec, Corpus, Corpus), TaskError> {
    check_params(n_classes, examples_per_class, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(&mut rng, n_classes, vocab_size);
    let recipe = TaskRecipe {
        task_id: "synth".to_string(),
        names: class_names(n_classes),
        assignment: (0..n_classes).collect(),
    };
    let task = build_task(&recipe, &world);
    let train = gen_corpus(&recipe, &world, Split::Train, examples_per_class, &mut rng);
    let eval = gen_corpus(
        &recipe,
        &world,
        Split::Eval,
        examples_per_class.div_ceil(2).max(1),
        &mut rng,
    );
    Ok((task, train, eval))
}

/// Parameters for [`make_synthetic_pair`].
#[derive(Debug, Clone, Copy)]
pub struct SynthPairConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub eval_per_class: usize,
    pub vocab_size: usize,
}

impl Default for SynthPairConfig {
    fn default() -> Self {
        SynthPairConfig {
            seed: 7,
            n_classes: 3,
            train_per_class: 24,
            validation_per_class: 6,
            eval_per_class: 12,
            // Small filler pool keeps filler words common across the corpus,
            // so nearest neighbors match on trigger words rather than on
            // rare-filler collisions.
            vocab_size: 16,
        }
    }
}

/// One task's spec plus its three splits.
#[derive(Debug, Clone)]
pub struct TaskFiles {
    pub task: TaskSpec,
    pub train: Corpus,
    pub validation: Corpus,
    pub eval: Corpus,
}

/// A matched/mismatched experiment pair over a shared vocabulary.
///
/// Task `a` assigns trigger sets to classes in order; task `b` keeps the same
/// class names and definitions but rotates the association by one, so every
/// class's definition differs between the tasks while the token world stays
/// identical. Examples in `b` are labeled by `b`'s definitions.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub a: TaskFiles,
    pub b: TaskFiles,
}

pub fn make_synthetic_pair(cfg: &SynthPairConfig) -> Result<SyntheticPair, TaskError> {
    check_params(cfg.n_classes, cfg.train_per_class, cfg.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(&mut rng, cfg.n_classes, cfg.vocab_size);
    let names = class_names(cfg.n_classes);
    let recipe_a = TaskRecipe {
        task_id: "task_a".to_string(),
        names: names.clone(),
        assignment: (0..cfg.n_classes).collect(),
    };
    let recipe_b = TaskRecipe {
        task_id: "task_b".to_string(),
        names,
        assignment: (0..cfg.n_classes).map(|i| (i + 1) % cfg.n_classes).collect(),
    };
    let build_files = |recipe: &TaskRecipe, rng: &mut ChaCha8Rng| TaskFiles {
        task: build_task(recipe, &world),
        train: gen_corpus(recipe, &world, Split::Train, cfg.train_per_class, rng),
        validation: gen_corpus(recipe, &world, Split::Validation, cfg.validation_per_class, rng),
        eval: gen_corpus(recipe, &world, Split::Eval, cfg.eval_per_class, rng),
    };
    let a = build_files(&recipe_a, &mut rng);
    let b = build_files(&recipe_b, &mut rng);
    Ok(SyntheticPair { a, b })
}

impl TaskFiles {
    /// Writes `<task_id>.task.json` plus one JSONL file per split into `dir`,
    /// the layout the experiment harness resolves task ids against.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, TaskError> {
        let id = &self.task.task_id;
        let spec_path = dir.join(format!("{id}.task.json"));
        write_task_spec(&spec_path, &self.task)?;
        let mut written = vec![spec_path];
        for corpus in [&self.train, &self.validation, &self.eval] {
            let path = dir.join(format!("{id}.{}.jsonl", corpus.split));
            write_corpus(&path, corpus)?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = make_synthetic_task(7, 3, 40, 64).unwrap();
        let b = make_synthetic_task(7, 3, 40, 64).unwrap();
        let ser = |t: &(TaskSpec, Corpus, Corpus)| {
            let mut buf = serde_json::to_vec(&t.0).unwrap();
            for ex in t.1.examples.iter().chain(&t.2.examples) {
                buf.extend(serde_json::to_vec(ex).unwrap());
            }
            buf
        };
        assert_eq!(ser(&a), ser(&b));

        let c = make_synthetic_task(8, 3, 40, 64).unwrap();
        assert_ne!(ser(&a), ser(&c));
    }

    #[test]
    fn train_corpus_balanced() {
        let (task, train, _) = make_synthetic_task(7, 3, 40, 64).unwrap();
        assert_eq!(train.len(), 3 * 40);
        for class in task.class_names() {
            let count = train
                .examples
                .iter()
                .filter(|e| e.labels.contains(class))
                .count();
            assert_eq!(count, 40, "class {class} not balanced");
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(make_synthetic_task(7, 1, 10, 64).is_err());
        assert!(make_synthetic_task(7, 3, 10, 11).is_err());
        assert!(make_synthetic_task(7, 3, 0, 64).is_err());
    }

    #[test]
    fn decoder_recovers_gold_everywhere() {
        let (task, train, eval) = make_synthetic_task(3, 4, 25, 32).unwrap();
        for ex in train.examples.iter().chain(&eval.examples) {
            let gold = ex.labels.iter().next().unwrap();
            assert_eq!(decode_by_definitions(&task, &ex.text).as_ref(), Some(gold));
        }
    }

    #[test]
    fn generated_corpora_validate() {
        let (task, train, eval) = make_synthetic_task(11, 3, 10, 64).unwrap();
        task.validate().unwrap();
        for ex in train.examples.iter().chain(&eval.examples) {
            task.validate_example(ex).unwrap();
        }
    }

    #[test]
    fn pair_rotates_definitions_and_relabels() {
        let pair = make_synthetic_pair(&SynthPairConfig::default()).unwrap();
        let a = &pair.a.task;
        let b = &pair.b.task;
        assert_eq!(
            a.class_names().collect::<Vec<_>>(),
            b.class_names().collect::<Vec<_>>()
        );
        // Same multiset of definitions, different association for every class.
        fn defs(t: &TaskSpec) -> Vec<&str> {
            let mut d: Vec<&str> = t.label_space.iter().map(|c| c.definition.as_str()).collect();
            d.sort();
            d
        }
        assert_eq!(defs(a), defs(b));
        for (ca, cb) in a.label_space.iter().zip(&b.label_space) {
            assert_ne!(ca.definition, cb.definition, "class {} unchanged", ca.name);
        }
        // B's corpora are labeled by B's definitions.
        for ex in pair.b.train.examples.iter().chain(&pair.b.eval.examples) {
            let gold = ex.labels.iter().next().unwrap();
            assert_eq!(decode_by_definitions(b, &ex.text).as_ref(), Some(gold));
        }
    }

    #[test]
    fn trigger_extraction_matches_construction() {
        let (task, _, _) = make_synthetic_task(5, 3, 5, 64).unwrap();
        let mut all: BTreeSet<String> = BTreeSet::new();
        for class in &task.label_space {
            let triggers = definition_triggers(&class.definition);
            assert_eq!(triggers.len(), TRIGGERS_PER_CLASS);
            for t in triggers {
                assert!(all.insert(t), "trigger sets must be disjoint");
            }
        }
    }
}
