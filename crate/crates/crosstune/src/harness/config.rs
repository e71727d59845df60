//! Run configuration. One JSON document describes either a single
//! experiment (fine-tune task, eval task, strategy, seeds) or a matrix of
//! them; every field has a default so minimal configs stay minimal.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::hash::fnv64;
use crate::model::{AdapterTarget, OptimConfig, TrainScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtStrategy {
    /// No fine-tuning; the untrained backend is evaluated as-is.
    None,
    /// Original class names and definitions.
    Regular,
    /// Class names replaced by meaning-free symbols, definitions kept.
    Symbol,
    /// Name-to-definition association redrawn per training example.
    RandomLabel,
}

impl FtStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FtStrategy::None => "none",
            FtStrategy::Regular => "regular",
            FtStrategy::Symbol => "symbol",
            FtStrategy::RandomLabel => "random_label",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Oracle,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub target: AdapterTarget,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            target: AdapterTarget::Query,
            rank: 8,
            alpha: 32.0,
            dropout_p: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub train_scope: TrainScope,
    pub adapters: Vec<AdapterSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            train_scope: TrainScope::Full,
            adapters: vec![
                AdapterSpec { target: AdapterTarget::Query, ..AdapterSpec::default() },
                AdapterSpec { target: AdapterTarget::Value, ..AdapterSpec::default() },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    /// Fine-tuning task; required exactly when `strategy` is not `none`.
    pub ft_task_id: Option<String>,
    pub eval_task_id: String,
    pub strategy: FtStrategy,
    /// Random-label pool size; `null` enumerates every permutation
    /// (small label spaces only).
    pub pool_size: Option<usize>,
    pub include_identity: bool,
    /// Demonstration counts to sweep at evaluation, each in 0..=5.
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub backend: BackendKind,
    /// Answer text for the constant backend.
    pub constant_answer: Option<String>,
    pub model: ModelConfig,
    /// `total_steps` is rewritten to span the actual training stream; the
    /// other fields apply as given.
    pub optim: OptimConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            ft_task_id: None,
            eval_task_id: String::new(),
            strategy: FtStrategy::None,
            pool_size: None,
            include_identity: true,
            shots: (0..=5).collect(),
            seeds: vec![0],
            backend: BackendKind::Toy,
            constant_answer: None,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.eval_task_id.is_empty() {
            return bad("eval_task_id is required".into());
        }
        match (self.strategy, &self.ft_task_id) {
            (FtStrategy::None, Some(id)) => {
                return bad(format!("ft_task_id {id:?} given but strategy is none"));
            }
            (FtStrategy::None, None) => {}
            (_, None) => {
                return bad(format!(
                    "strategy {} needs an ft_task_id",
                    self.strategy.as_str()
                ));
            }
            (_, Some(_)) => {}
        }
        if self.pool_size.is_some() && self.strategy != FtStrategy::RandomLabel {
            return bad("pool_size only applies to the random_label strategy".into());
        }
        if self.shots.is_empty() {
            return bad("shots must list at least one demonstration count".into());
        }
        if self.shots.iter().any(|&k| k > 5) {
            return bad(format!("shots {:?} exceed the 0..=5 range", self.shots));
        }
        if self.shots.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("shots {:?} must be strictly increasing", self.shots));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return bad(format!("seeds {:?} contain duplicates", self.seeds));
            }
        }
        if self.backend == BackendKind::Constant && self.constant_answer.is_none() {
            return bad("constant backend needs constant_answer".into());
        }
        if self.backend != BackendKind::Toy && self.strategy != FtStrategy::None {
            return bad("only the toy backend can fine-tune".into());
        }
        if self.model.d < 2 {
            return bad(format!("model.d {} too small", self.model.d));
        }
        self.optim.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub runs: Vec<ExperimentConfig>,
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs.is_empty() {
            return Err(HarnessError::Config("matrix has no runs".into()));
        }
        for (i, run) in self.runs.iter().enumerate() {
            run.validate()
                .map_err(|e| HarnessError::Config(format!("runs[{i}]: {e}")))?;
        }
        Ok(())
    }
}

fn read_config_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("read {}: {e}", path.display())))
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = read_config_file(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("parse {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts either a matrix document (`{"runs": [...]}`) or a single
/// experiment document, which becomes a one-run matrix.
pub fn load_matrix_config(path: &Path) -> Result<MatrixConfig, HarnessError> {
    let text = read_config_file(path)?;
    let parsed: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("parse {}: {e}", path.display())))?;
    let cfg = if parsed.get("runs").is_some() {
        serde_json::from_value::<MatrixConfig>(parsed)
    } else {
        serde_json::from_value::<ExperimentConfig>(parsed).map(|run| MatrixConfig { runs: vec![run] })
    }
    .map_err(|e| HarnessError::Config(format!("parse {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Content hash of one experiment's configuration, stamped into run
/// records so a log line is traceable to the exact settings that made it.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:016x}", fnv64(json.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> ExperimentConfig {
        ExperimentConfig {
            eval_task_id: "task_a".into(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_validate_once_eval_task_is_set() {
        assert!(ExperimentConfig::default().validate().is_err());
        assert!(toy_cfg().validate().is_ok());
    }

    #[test]
    fn strategy_and_ft_task_must_agree() {
        let mut cfg = toy_cfg();
        cfg.strategy = FtStrategy::Regular;
        assert!(cfg.validate().is_err());
        cfg.ft_task_id = Some("task_a".into());
        assert!(cfg.validate().is_ok());
        cfg.strategy = FtStrategy::None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shot_and_seed_lists_are_checked() {
        let mut cfg = toy_cfg();
        cfg.shots = vec![];
        assert!(cfg.validate().is_err());
        cfg.shots = vec![0, 6];
        assert!(cfg.validate().is_err());
        cfg.shots = vec![2, 1];
        assert!(cfg.validate().is_err());
        cfg.shots = vec![0, 1, 5];
        assert!(cfg.validate().is_ok());
        cfg.seeds = vec![3, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pool_size_is_random_label_only() {
        let mut cfg = toy_cfg();
        cfg.pool_size = Some(10);
        assert!(cfg.validate().is_err());
        cfg.strategy = FtStrategy::RandomLabel;
        cfg.ft_task_id = Some("task_a".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn constant_backend_needs_an_answer() {
        let mut cfg = toy_cfg();
        cfg.backend = BackendKind::Constant;
        assert!(cfg.validate().is_err());
        cfg.constant_answer = Some("neutral".into());
        assert!(cfg.validate().is_ok());
        cfg.strategy = FtStrategy::Regular;
        cfg.ft_task_id = Some("task_a".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn minimal_json_round_trips_with_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"eval_task_id": "task_b"}"#).unwrap();
        assert_eq!(cfg.shots, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.strategy, FtStrategy::None);
        assert!(cfg.include_identity);

        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn strategy_serde_names() {
        for (s, name) in [
            (FtStrategy::None, "\"none\""),
            (FtStrategy::Regular, "\"regular\""),
            (FtStrategy::Symbol, "\"symbol\""),
            (FtStrategy::RandomLabel, "\"random_label\""),
        ] {
            assert_eq!(serde_json::to_string(&s).unwrap(), name);
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = toy_cfg();
        let mut b = toy_cfg();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seeds = vec![1];
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn matrix_file_accepts_single_run_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");

        fs::write(&path, r#"{"eval_task_id": "task_a"}"#).unwrap();
        let m = load_matrix_config(&path).unwrap();
        assert_eq!(m.runs.len(), 1);

        fs::write(
            &path,
            r#"{"runs": [{"eval_task_id": "task_a"}, {"eval_task_id": "task_b"}]}"#,
        )
        .unwrap();
        let m = load_matrix_config(&path).unwrap();
        assert_eq!(m.runs.len(), 2);

        fs::write(&path, r#"{"runs": []}"#).unwrap();
        assert!(load_matrix_config(&path).is_err());
        fs::write(&path, "not json").unwrap();
        assert!(load_matrix_config(&path).is_err());
    }
}
