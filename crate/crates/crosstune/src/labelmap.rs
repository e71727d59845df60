//! Fine-tuning strategies as transformations of the class-name -> definition
//! mapping.
//!
//! A [`LabelMapping`] pins, for one training example (demonstrations and
//! query alike), which definition every displayed class name carries:
//!
//! - regular: names and definitions as declared by the task
//! - symbol: names replaced by semantically empty symbols, definitions kept
//! - random label: definitions permuted over the fixed names, drawn per
//!   mini-batch from a precomputed [`MappingPool`]
//!
//! `gold_name` records which original class a displayed entry's definition
//! belongs to, so [`remap_label`] can answer "which name must the model emit
//! for this gold label under the current definitions".

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Fnv64;
use crate::task::TaskSpec;

/// Name substitutes for symbol fine-tuning; 18 entries, enough for every
/// bundled task.
pub const DEFAULT_SYMBOLS: [&str; 18] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    "lambda", "mu", "nu", "xi", "omicron", "pi", "rho", "sigma",
];

/// Exhaustive pool enumeration is guarded at 6 classes (6! = 720); larger
/// label spaces must use [`sample_permutation_pool`].
pub const MAX_ENUMERABLE_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Regular,
    Symbol,
    RandomLabel,
}

/// One row of a mapping: the name shown in prompts, the definition it carries
/// right now, and the original class that definition belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub display_name: String,
    pub definition: String,
    pub gold_name: String,
}

/// A bijection between displayed class names and definition texts, in
/// label-space order. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMapping {
    pub task_id: String,
    pub entries: Vec<MappingEntry>,
    pub strategy: Strategy,
    /// Index within the pool this mapping was built into, if any.
    pub pool_index: Option<usize>,
    perm: Vec<usize>,
}

/// Identity of a mapping, carried by demonstrations and prompt bundles so a
/// prompt can never silently mix labels remapped under different mappings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRef {
    pub task_id: String,
    pub fingerprint: u64,
}

/// A fixed set of pairwise-distinct permutation mappings to draw from during
/// random-label fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingPool {
    pub task_id: String,
    pub mappings: Vec<LabelMapping>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("need at least {needed} symbols for task {task_id:?}, got {got}")]
    TooFewSymbols {
        task_id: String,
        needed: usize,
        got: usize,
    },
    #[error("symbol {symbol:?} collides with a class name of task {task_id:?}")]
    SymbolCollision { task_id: String, symbol: String },
    #[error("duplicate symbol {symbol:?}")]
    DuplicateSymbol { symbol: String },
    #[error(
        "task {task_id:?} has {n} classes; exhaustive enumeration is capped at {cap}, \
         use sample_permutation_pool"
    )]
    LabelSpaceTooLarge {
        task_id: String,
        n: usize,
        cap: usize,
    },
    #[error("pool_size {requested} unsatisfiable: only {available} distinct permutations")]
    PoolUnsatisfiable { requested: u128, available: u128 },
    #[error("pool_size must be at least 1")]
    EmptyPoolRequested,
    #[error("cannot draw from an empty pool")]
    EmptyPool,
    #[error("label {label:?} is not a class of task {task_id:?}")]
    UnknownLabel { label: String, task_id: String },
    #[error("pool file {path}: {message}")]
    PoolFile { path: String, message: String },
    #[error("pool permutation {perm:?} is invalid for task {task_id:?}")]
    BadPermutation { perm: Vec<usize>, task_id: String },
}

impl LabelMapping {
    fn from_perm(
        task: &TaskSpec,
        perm: Vec<usize>,
        strategy: Strategy,
        pool_index: Option<usize>,
    ) -> Self {
        let entries = perm
            .iter()
            .enumerate()
            .map(|(i, &src)| MappingEntry {
                display_name: task.label_space[i].name.clone(),
                definition: task.label_space[src].definition.clone(),
                gold_name: task.label_space[src].name.clone(),
            })
            .collect();
        LabelMapping {
            task_id: task.task_id.clone(),
            entries,
            strategy,
            pool_index,
            perm,
        }
    }

    /// `permutation()[i]` is the label-space index whose definition (and gold
    /// identity) entry `i` carries. Identity for regular and symbol mappings.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn n_classes(&self) -> usize {
        self.entries.len()
    }

    /// Display names in label-space order.
    pub fn display_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.display_name.as_str())
    }

    /// The displayed name whose entry carries `gold_label`'s definition,
    /// i.e. the name the model must emit for that gold label under the
    /// current definitions.
    pub fn remap_label(&self, gold_label: &str) -> Result<&str, MappingError> {
        self.entries
            .iter()
            .find(|e| e.gold_name == gold_label)
            .map(|e| e.display_name.as_str())
            .ok_or_else(|| MappingError::UnknownLabel {
                label: gold_label.to_string(),
                task_id: self.task_id.clone(),
            })
    }

    /// Inverse of [`Self::remap_label`]: the gold class whose definition sits
    /// behind a displayed name. `None` for unrecognized names.
    pub fn gold_for_display(&self, display_name: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.display_name == display_name)
            .map(|e| e.gold_name.as_str())
    }

    /// Index of the entry carrying `gold_label`'s definition. Classifier
    /// output slots are bound to entry indices, so this is the supervision
    /// slot for an example gold-labeled `gold_label`.
    pub fn slot_of_gold(&self, gold_label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.gold_name == gold_label)
    }

    /// Supervision slots for a gold label set, ascending.
    pub fn slots_for(
        &self,
        gold_labels: &std::collections::BTreeSet<String>,
    ) -> Result<Vec<usize>, MappingError> {
        let mut slots: Vec<usize> = gold_labels
            .iter()
            .map(|g| {
                self.slot_of_gold(g).ok_or_else(|| MappingError::UnknownLabel {
                    label: g.clone(),
                    task_id: self.task_id.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        slots.sort_unstable();
        Ok(slots)
    }

    /// Stable identity used to detect mixed-mapping prompts.
    pub fn reference(&self) -> MappingRef {
        let mut h = Fnv64::new();
        h.update_str(&self.task_id);
        h.update_str(match self.strategy {
            Strategy::Regular => "regular",
            Strategy::Symbol => "symbol",
            Strategy::RandomLabel => "random_label",
        });
        for e in &self.entries {
            h.update_str(&e.display_name);
            h.update_str(&e.definition);
            h.update_str(&e.gold_name);
        }
        MappingRef {
            task_id: self.task_id.clone(),
            fingerprint: h.finish(),
        }
    }

    /// Checks the bijection invariants against the owning task.
    pub fn validate(&self, task: &TaskSpec) -> Result<(), MappingError> {
        let n = task.n_classes();
        let ok = self.entries.len() == n
            && self.perm.len() == n
            && {
                let mut seen = vec![false; n];
                self.perm.iter().all(|&p| {
                    p < n && !std::mem::replace(&mut seen[p], true)
                })
            }
            && self
                .entries
                .iter()
                .map(|e| e.display_name.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .len()
                == n
            && self
                .entries
                .iter()
                .map(|e| e.gold_name.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                == task.class_names().collect();
        if ok {
            Ok(())
        } else {
            Err(MappingError::BadPermutation {
                perm: self.perm.clone(),
                task_id: self.task_id.clone(),
            })
        }
    }
}

/// Regular fine-tuning: every class keeps its own name and definition.
pub fn identity_mapping(task: &TaskSpec) -> LabelMapping {
    LabelMapping::from_perm(task, (0..task.n_classes()).collect(), Strategy::Regular, None)
}

/// Symbol fine-tuning: the i-th class is displayed as `symbols[i]`;
/// definitions and gold identities are untouched.
pub fn symbol_mapping(task: &TaskSpec, symbols: &[&str]) -> Result<LabelMapping, MappingError> {
    let n = task.n_classes();
    if symbols.len() < n {
        return Err(MappingError::TooFewSymbols {
            task_id: task.task_id.clone(),
            needed: n,
            got: symbols.len(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for &s in &symbols[..n] {
        if !seen.insert(s) {
            return Err(MappingError::DuplicateSymbol {
                symbol: s.to_string(),
            });
        }
        if task.has_class(s) {
            return Err(MappingError::SymbolCollision {
                task_id: task.task_id.clone(),
                symbol: s.to_string(),
            });
        }
    }
    let mut mapping = identity_mapping(task);
    mapping.strategy = Strategy::Symbol;
    for (entry, &symbol) in mapping.entries.iter_mut().zip(symbols) {
        entry.display_name = symbol.to_string();
    }
    Ok(mapping)
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

fn identity_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// All permutations of `0..n` in lexicographic order.
fn all_perms(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(factorial(n) as usize);
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(n, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    rec(n, &mut current, &mut used, &mut out);
    out
}

fn pool_from_perms(task: &TaskSpec, perms: Vec<Vec<usize>>, seed: u64) -> MappingPool {
    let mappings = perms
        .into_iter()
        .enumerate()
        .map(|(i, p)| LabelMapping::from_perm(task, p, Strategy::RandomLabel, Some(i)))
        .collect();
    MappingPool {
        task_id: task.task_id.clone(),
        mappings,
        seed,
    }
}

/// Every permutation of the definitions over the fixed display/gold names,
/// in lexicographic order. Guarded at [`MAX_ENUMERABLE_CLASSES`].
pub fn enumerate_permutation_pool(
    task: &TaskSpec,
    include_identity: bool,
) -> Result<MappingPool, MappingError> {
    let n = task.n_classes();
    if n > MAX_ENUMERABLE_CLASSES {
        return Err(MappingError::LabelSpaceTooLarge {
            task_id: task.task_id.clone(),
            n,
            cap: MAX_ENUMERABLE_CLASSES,
        });
    }
    let identity = identity_perm(n);
    let perms = all_perms(n)
        .into_iter()
        .filter(|p| include_identity || *p != identity)
        .collect();
    Ok(pool_from_perms(task, perms, 0))
}

/// Draws `pool_size` pairwise-distinct permutations by seeded rejection
/// sampling of Fisher-Yates shuffles. With `include_identity = false` the
/// identity permutation is never admitted.
pub fn sample_permutation_pool(
    task: &TaskSpec,
    pool_size: usize,
    seed: u64,
    include_identity: bool,
) -> Result<MappingPool, MappingError> {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;

    if pool_size == 0 {
        return Err(MappingError::EmptyPoolRequested);
    }
    let n = task.n_classes();
    let available = factorial(n) - if include_identity { 0 } else { 1 };
    if pool_size as u128 > available {
        return Err(MappingError::PoolUnsatisfiable {
            requested: pool_size as u128,
            available,
        });
    }
    let identity = identity_perm(n);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(pool_size);
    while perms.len() < pool_size {
        let mut p = identity_perm(n);
        p.shuffle(&mut rng);
        if !include_identity && p == identity {
            continue;
        }
        if perms.contains(&p) {
            continue;
        }
        perms.push(p);
    }
    Ok(pool_from_perms(task, perms, seed))
}

/// Uniformly selects one mapping of the pool, advancing the caller's
/// generator. The returned mapping governs both the demonstrations and the
/// query of the example it is drawn for.
pub fn draw_for_batch<'p, R: Rng>(
    pool: &'p MappingPool,
    rng: &mut R,
) -> Result<&'p LabelMapping, MappingError> {
    if pool.mappings.is_empty() {
        return Err(MappingError::EmptyPool);
    }
    let idx = rng.random_range(0..pool.mappings.len());
    Ok(&pool.mappings[idx])
}

/// On-disk form of a pool: just the permutation schedule, enough to audit or
/// reconstruct a run's exact mapping sequence against the task spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub task_id: String,
    pub seed: u64,
    pub permutations: Vec<Vec<usize>>,
}

impl MappingPool {
    pub fn to_record(&self) -> PoolRecord {
        PoolRecord {
            task_id: self.task_id.clone(),
            seed: self.seed,
            permutations: self.mappings.iter().map(|m| m.perm.clone()).collect(),
        }
    }

    /// Rebuilds a pool from its serialized permutation schedule.
    pub fn from_record(record: &PoolRecord, task: &TaskSpec) -> Result<Self, MappingError> {
        let n = task.n_classes();
        let mut mappings = Vec::with_capacity(record.permutations.len());
        for (i, perm) in record.permutations.iter().enumerate() {
            let mut seen = vec![false; n];
            let valid = perm.len() == n
                && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(MappingError::BadPermutation {
                    perm: perm.clone(),
                    task_id: task.task_id.clone(),
                });
            }
            mappings.push(LabelMapping::from_perm(
                task,
                perm.clone(),
                Strategy::RandomLabel,
                Some(i),
            ));
        }
        Ok(MappingPool {
            task_id: record.task_id.clone(),
            mappings,
            seed: record.seed,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MappingError> {
        let json = serde_json::to_string_pretty(&self.to_record()).expect("pool serializes");
        std::fs::write(path, json + "\n").map_err(|e| MappingError::PoolFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read_json(path: &Path, task: &TaskSpec) -> Result<Self, MappingError> {
        let raw = std::fs::read_to_string(path).map_err(|e| MappingError::PoolFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let record: PoolRecord =
            serde_json::from_str(&raw).map_err(|e| MappingError::PoolFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Self::from_record(&record, task)
    }
}
