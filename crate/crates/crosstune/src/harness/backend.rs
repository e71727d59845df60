//! Text-in, text-out backends. The contract is deliberately narrow: a
//! backend sees only rendered prompts and label strings, never task
//! structs or mappings, so the toy model earns no information a real
//! speech LLM would not have.

use std::collections::BTreeMap;

use super::{subseed, HarnessError};
use crate::model::math::sigmoid;
use crate::model::{
    forward, init_model, train, Checkpoint, LoraAdapter, ModelParams, OptimConfig, TraceRow,
    TrainBatch, TrainScope,
};
use crate::prompt::{tokenize, Vocab, SPEECH_CLOSE, SPEECH_OPEN};
use crate::task::Corpus;

use super::config::ModelConfig;

/// One rendered fine-tuning example: the prompt up to and excluding the
/// answer, and the answer's display-label text.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    pub prompt: String,
    pub target: String,
}

/// A frozen backend answers prompts deterministically; fine-tuning
/// returns a new backend and leaves the original untouched.
pub trait ModelBackend: Send + Sync {
    fn can_finetune(&self) -> bool {
        false
    }

    fn generate(&self, prompt: &str) -> Result<String, HarnessError>;

    fn finetune(
        &self,
        _stream: &[FinetuneExample],
        _optim: &OptimConfig,
        _seed: u64,
    ) -> Result<Box<dyn ModelBackend>, HarnessError> {
        Err(HarnessError::Backend(
            "this backend cannot fine-tune".into(),
        ))
    }
}

/// Display names listed in the prompt's class-definitions segment, in
/// order. That order is the model's slot order: the head is bound to
/// definition positions, and the prompt is the only channel telling the
/// backend what each position currently means.
pub fn display_names_from_prompt(prompt: &str) -> Result<Vec<String>, HarnessError> {
    const HEADER: &str = "Class Definitions:\n";
    let start = prompt
        .find(HEADER)
        .ok_or_else(|| HarnessError::Backend("prompt has no class definitions segment".into()))?
        + HEADER.len();
    let body = &prompt[start..];
    let body = &body[..body.find("\n\n").unwrap_or(body.len())];
    let mut names = Vec::new();
    for line in body.lines() {
        let (name, _) = line.split_once(": ").ok_or_else(|| {
            HarnessError::Backend(format!("malformed class definition line {line:?}"))
        })?;
        names.push(name.trim().to_string());
    }
    if names.is_empty() {
        return Err(HarnessError::Backend(
            "class definitions segment is empty".into(),
        ));
    }
    Ok(names)
}

fn speech_span(prompt: &str) -> Result<&str, HarnessError> {
    let start = prompt
        .find(SPEECH_OPEN)
        .ok_or_else(|| HarnessError::Backend("prompt has no speech span".into()))?
        + SPEECH_OPEN.len();
    let end = prompt[start..]
        .find(SPEECH_CLOSE)
        .ok_or_else(|| HarnessError::Backend("speech span never closes".into()))?
        + start;
    Ok(&prompt[start..end])
}

fn decode_with_names(logits: &[f64], multi_label: bool, names: &[String]) -> String {
    if multi_label {
        let picked: Vec<&str> = logits
            .iter()
            .zip(names)
            .filter(|(&z, _)| sigmoid(z) > 0.5)
            .map(|(_, n)| n.as_str())
            .collect();
        picked.join(", ")
    } else {
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        names[best].clone()
    }
}

/// The trainable desk-scale model behind the backend interface. Holds its
/// own tokenizer; prompts from tasks outside the vocabulary degrade to
/// unknown tokens rather than failing.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    vocab: Vocab,
    params: ModelParams,
    adapters: Vec<LoraAdapter>,
    multi_label: bool,
    scope: TrainScope,
    loss_trace: Vec<TraceRow>,
}

impl ToyBackend {
    pub fn new(
        vocab: Vocab,
        multi_label: bool,
        model_cfg: &ModelConfig,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let params = init_model(
            model_cfg.d,
            vocab.len(),
            n_classes,
            subseed(seed, "model_init"),
        )?;
        let adapters = model_cfg
            .adapters
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                LoraAdapter::init(
                    spec.target,
                    spec.rank,
                    spec.alpha,
                    spec.dropout_p,
                    model_cfg.d,
                    subseed(seed, &format!("adapter_{i}")),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ToyBackend {
            vocab,
            params,
            adapters,
            multi_label,
            scope: model_cfg.train_scope,
            loss_trace: Vec::new(),
        })
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint,
        vocab: Vocab,
        multi_label: bool,
        scope: TrainScope,
    ) -> Result<Self, HarnessError> {
        if ckpt.vocab_hash != vocab.fingerprint() {
            return Err(HarnessError::Backend(format!(
                "checkpoint vocabulary hash {:016x} does not match the provided vocabulary ({:016x})",
                ckpt.vocab_hash,
                vocab.fingerprint()
            )));
        }
        Ok(ToyBackend {
            vocab,
            params: ckpt.params,
            adapters: ckpt.adapters,
            multi_label,
            scope,
            loss_trace: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adapters: self.adapters.clone(),
            vocab_hash: self.vocab.fingerprint(),
            seed,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Loss trace of the training run that produced this instance; empty
    /// for a fresh or checkpoint-loaded backend.
    pub fn loss_trace(&self) -> &[TraceRow] {
        &self.loss_trace
    }

    /// Concrete-typed fine-tuning, for callers that need the trace or a
    /// checkpoint afterwards.
    pub fn finetuned(
        &self,
        stream: &[FinetuneExample],
        optim: &OptimConfig,
        seed: u64,
    ) -> Result<ToyBackend, HarnessError> {
        let mut batches = Vec::with_capacity(stream.len());
        for example in stream {
            let names = display_names_from_prompt(&example.prompt)?;
            if names.len() != self.params.n_classes() {
                return Err(HarnessError::Backend(format!(
                    "prompt lists {} classes, model head has {}",
                    names.len(),
                    self.params.n_classes()
                )));
            }
            let mut target_slots = Vec::new();
            for label in example.target.split(", ").filter(|s| !s.is_empty()) {
                let slot = names.iter().position(|n| n == label).ok_or_else(|| {
                    HarnessError::Backend(format!(
                        "target label {label:?} is not in the prompt's class list"
                    ))
                })?;
                target_slots.push(slot);
            }
            target_slots.sort_unstable();
            batches.push(TrainBatch {
                tokens: tokenize(&example.prompt, &self.vocab),
                target_slots,
            });
        }
        let mut params = self.params.clone();
        let mut adapters = self.adapters.clone();
        let trace = train(
            &mut params,
            &mut adapters,
            &batches,
            self.multi_label,
            optim,
            self.scope,
            subseed(seed, "train"),
        )?;
        Ok(ToyBackend {
            vocab: self.vocab.clone(),
            params,
            adapters,
            multi_label: self.multi_label,
            scope: self.scope,
            loss_trace: trace,
        })
    }
}

impl ModelBackend for ToyBackend {
    fn can_finetune(&self) -> bool {
        true
    }

    fn generate(&self, prompt: &str) -> Result<String, HarnessError> {
        let names = display_names_from_prompt(prompt)?;
        if names.len() != self.params.n_classes() {
            return Err(HarnessError::Backend(format!(
                "prompt lists {} classes, model head has {}",
                names.len(),
                self.params.n_classes()
            )));
        }
        let tokens = tokenize(prompt, &self.vocab);
        let logits = forward(&self.params, &self.adapters, &tokens)?;
        Ok(decode_with_names(&logits, self.multi_label, &names))
    }

    fn finetune(
        &self,
        stream: &[FinetuneExample],
        optim: &OptimConfig,
        seed: u64,
    ) -> Result<Box<dyn ModelBackend>, HarnessError> {
        Ok(Box::new(self.finetuned(stream, optim, seed)?))
    }
}

/// Answers every query with its gold labels, looked up by transcript.
/// The ceiling any scoring pipeline should reach exactly.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    answers: BTreeMap<String, String>,
}

impl OracleBackend {
    pub fn from_corpora(corpora: &[&Corpus]) -> Self {
        let mut answers = BTreeMap::new();
        for corpus in corpora {
            for example in &corpus.examples {
                let joined = example
                    .labels
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ");
                answers.insert(example.text.clone(), joined);
            }
        }
        OracleBackend { answers }
    }
}

impl ModelBackend for OracleBackend {
    fn generate(&self, prompt: &str) -> Result<String, HarnessError> {
        let query = speech_span(prompt)?;
        Ok(self.answers.get(query).cloned().unwrap_or_default())
    }
}

/// Always answers the same string. A floor and a confusion-matrix probe.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    pub answer: String,
}

impl ModelBackend for ConstantBackend {
    fn generate(&self, _prompt: &str) -> Result<String, HarnessError> {
        Ok(self.answer.clone())
    }
}
