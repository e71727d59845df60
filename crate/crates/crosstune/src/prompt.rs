//! Prompt assembly and the toy backend's tokenizer.
//!
//! Every prompt is six segments: task instruction, class definitions,
//! general guidelines, zero to five demonstrations, the speech query, and
//! (during fine-tuning only) the supervision target. The segment markers and
//! separators below are this crate's convention, pinned by golden files; the
//! upstream recipe fixes only the skeleton.
//!
//! Rendered text is plain UTF-8. The query transcript is wrapped in
//! `<Speech>` and `</Speech>`; those two tags are the only markup and map to
//! reserved vocabulary ids when tokenized.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::labelmap::{LabelMapping, MappingRef};
use crate::retrieval::{display_labels_for, Demonstration};
use crate::task::{Example, TaskSpec};

pub const SPEECH_OPEN: &str = "<Speech>";
pub const SPEECH_CLOSE: &str = "</Speech>";

/// Words contributed by the segment markers themselves; part of every
/// rendered prompt regardless of task content.
pub const TEMPLATE_WORDS: [&str; 8] = [
    "task",
    "instruction",
    "class",
    "definitions",
    "general",
    "guidelines",
    "input",
    "labels",
];

pub const MAX_SHOTS: usize = 5;

/// Lowercased maximal runs of alphanumeric or underscore characters.
/// Everything else separates tokens.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Instruction,
    ClassDefinitions,
    Guidelines,
    Demonstration,
    SpeechQuery,
    Target,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SegmentKind::Instruction => "instruction",
            SegmentKind::ClassDefinitions => "class_definitions",
            SegmentKind::Guidelines => "guidelines",
            SegmentKind::Demonstration => "demonstration",
            SegmentKind::SpeechQuery => "speech_query",
            SegmentKind::Target => "target",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Final text except for the speech query, which is stored as the bare
    /// transcript and wrapped at render time.
    pub text: String,
}

/// An assembled prompt plus the metadata needed to audit it: which mapping
/// produced the label strings, how many shots, and the supervision target
/// (display-name space) when one is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub segments: Vec<Segment>,
    pub mapping_ref: MappingRef,
    pub shot_count: usize,
    pub target: Option<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("at most {MAX_SHOTS} demonstrations, got {got}")]
    TooManyDemos { got: usize },
    #[error("demonstration {index} ({example_id:?}) was packaged under a different mapping")]
    MappingMismatch { index: usize, example_id: String },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Mapping(#[from] crate::labelmap::MappingError),
    #[error("vocab needs at least one corpus or task view")]
    EmptyVocabInput,
    #[error("vocab file {path}: {message}")]
    VocabFile { path: String, message: String },
}

/// Builds the six-segment bundle for one query under one mapping.
///
/// Demonstrations must have been packaged under the same mapping; a
/// fingerprint mismatch is an error, not a silent mixed-label prompt.
/// `include_target` attaches the query's remapped labels as supervision
/// (fine-tuning); evaluation prompts leave it off.
pub fn assemble(
    task: &TaskSpec,
    mapping: &LabelMapping,
    demos: &[Demonstration],
    query: &Example,
    include_target: bool,
) -> Result<PromptBundle, PromptError> {
    if demos.len() > MAX_SHOTS {
        return Err(PromptError::TooManyDemos { got: demos.len() });
    }
    let mapping_ref = mapping.reference();
    for (index, demo) in demos.iter().enumerate() {
        if demo.mapping_ref != mapping_ref {
            return Err(PromptError::MappingMismatch {
                index,
                example_id: demo.example_id.clone(),
            });
        }
    }

    let mut segments = Vec::with_capacity(4 + demos.len() + usize::from(include_target));
    segments.push(Segment {
        kind: SegmentKind::Instruction,
        text: format!("Task Instruction: {}", task.instruction),
    });
    let defs: Vec<String> = mapping
        .entries
        .iter()
        .map(|e| format!("{}: {}", e.display_name, e.definition))
        .collect();
    segments.push(Segment {
        kind: SegmentKind::ClassDefinitions,
        text: format!("Class Definitions:\n{}", defs.join("\n")),
    });
    segments.push(Segment {
        kind: SegmentKind::Guidelines,
        text: format!("General Guidelines: {}", task.guidelines),
    });
    for demo in demos {
        segments.push(Segment {
            kind: SegmentKind::Demonstration,
            text: format!(
                "Input: {}\nLabels: {}",
                demo.text,
                demo.display_labels.join(", ")
            ),
        });
    }
    segments.push(Segment {
        kind: SegmentKind::SpeechQuery,
        text: query.text.clone(),
    });

    let target = if include_target {
        let labels = display_labels_for(mapping, query)?;
        segments.push(Segment {
            kind: SegmentKind::Target,
            text: format!("Labels: {}", labels.join(", ")),
        });
        Some(labels)
    } else {
        None
    };

    let bundle = PromptBundle {
        segments,
        mapping_ref,
        shot_count: demos.len(),
        target,
    };
    validate(&bundle)?;
    Ok(bundle)
}

/// Checks the segment-order invariant and that exactly one speech span will
/// appear in the render.
pub fn validate(bundle: &PromptBundle) -> Result<(), PromptError> {
    let bad = |msg: String| Err(PromptError::InvalidBundle(msg));
    if bundle.shot_count > MAX_SHOTS {
        return bad(format!("shot_count {} exceeds {MAX_SHOTS}", bundle.shot_count));
    }
    let mut expected: Vec<SegmentKind> = vec![
        SegmentKind::Instruction,
        SegmentKind::ClassDefinitions,
        SegmentKind::Guidelines,
    ];
    expected.extend(std::iter::repeat(SegmentKind::Demonstration).take(bundle.shot_count));
    expected.push(SegmentKind::SpeechQuery);
    if bundle.target.is_some() {
        expected.push(SegmentKind::Target);
    }
    let got: Vec<SegmentKind> = bundle.segments.iter().map(|s| s.kind).collect();
    if got != expected {
        return bad(format!(
            "segment order [{}], expected [{}]",
            got.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "),
            expected.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "),
        ));
    }
    for segment in &bundle.segments {
        if segment.text.contains(SPEECH_OPEN) || segment.text.contains(SPEECH_CLOSE) {
            return bad(format!("{} segment contains a reserved speech tag", segment.kind));
        }
    }
    if let (Some(target), Some(last)) = (&bundle.target, bundle.segments.last()) {
        if last.text != format!("Labels: {}", target.join(", ")) {
            return bad("target segment text disagrees with the target labels".into());
        }
    }
    Ok(())
}

/// Canonical text: segments joined by blank lines, the speech query wrapped
/// in its tags. Byte-deterministic in the bundle.
pub fn render(bundle: &PromptBundle) -> String {
    let parts: Vec<String> = bundle
        .segments
        .iter()
        .map(|s| match s.kind {
            SegmentKind::SpeechQuery => format!("{SPEECH_OPEN}{}{SPEECH_CLOSE}", s.text),
            _ => s.text.clone(),
        })
        .collect();
    parts.join("\n\n")
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SPEECH_OPEN_ID: u32 = 2;
pub const SPEECH_CLOSE_ID: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", SPEECH_OPEN, SPEECH_CLOSE];

/// Token table for the toy backend. Ids 0..3 are reserved (pad, unk, speech
/// open/close); word tokens start at 4, ordered by descending frequency in
/// the fitting material, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Stable content fingerprint, stored in checkpoints so a model is never
    /// silently revived against a different token table.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::hash::Fnv64::new();
        for token in &self.id_to_token {
            h.update_str(token);
        }
        h.finish()
    }

    fn from_words(words: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }
}

/// Builds the vocabulary over everything the toy backend can see: example
/// texts from `corpora`, and for each task view the instruction, guidelines,
/// display names, definitions, and the segment-marker words.
pub fn build_vocab(
    corpora: &[&crate::task::Corpus],
    task_views: &[(&TaskSpec, &LabelMapping)],
) -> Result<Vocab, PromptError> {
    if corpora.is_empty() && task_views.is_empty() {
        return Err(PromptError::EmptyVocabInput);
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut bump = |text: &str| {
        for token in tokenize_words(text) {
            *freq.entry(token).or_insert(0) += 1;
        }
    };
    for corpus in corpora {
        for example in &corpus.examples {
            bump(&example.text);
        }
    }
    for (task, mapping) in task_views {
        bump(&task.instruction);
        bump(&task.guidelines);
        for entry in &mapping.entries {
            bump(&entry.display_name);
            bump(&entry.definition);
        }
        for word in TEMPLATE_WORDS {
            bump(word);
        }
    }
    let mut words: Vec<(String, u64)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_words(words.into_iter().map(|(w, _)| w).collect()))
}

/// Tokenizes rendered prompt text. The speech tags map to their reserved
/// ids; all other text is word-tokenized, with out-of-vocabulary words
/// mapping to [`UNK_ID`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let open = rest.find(SPEECH_OPEN);
        let close = rest.find(SPEECH_CLOSE);
        let (at, len, id) = match (open, close) {
            (Some(o), Some(c)) if c < o => (c, SPEECH_CLOSE.len(), SPEECH_CLOSE_ID),
            (Some(o), _) => (o, SPEECH_OPEN.len(), SPEECH_OPEN_ID),
            (None, Some(c)) => (c, SPEECH_CLOSE.len(), SPEECH_CLOSE_ID),
            (None, None) => break,
        };
        for token in tokenize_words(&rest[..at]) {
            ids.push(vocab.id(&token).unwrap_or(UNK_ID));
        }
        ids.push(id);
        rest = &rest[at + len..];
    }
    for token in tokenize_words(rest) {
        ids.push(vocab.id(&token).unwrap_or(UNK_ID));
    }
    ids
}

/// Inverse of [`tokenize`] up to case and whitespace: tokens joined by
/// single spaces, reserved ids rendered as their markers.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK_ID as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two-column text format: token, one tab, id; one row per token in id
/// order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<(), PromptError> {
    let err = |message: String| PromptError::VocabFile {
        path: path.display().to_string(),
        message,
    };
    let mut out = String::new();
    for (id, token) in vocab.id_to_token.iter().enumerate() {
        out.push_str(token);
        out.push('\t');
        out.push_str(&id.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| err(e.to_string()))
}

pub fn read_vocab(path: &Path) -> Result<Vocab, PromptError> {
    let err = |message: String| PromptError::VocabFile {
        path: path.display().to_string(),
        message,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut id_to_token = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let (token, id) = line
            .split_once('\t')
            .ok_or_else(|| err(format!("line {}: expected token<TAB>id", lineno + 1)))?;
        let id: usize = id
            .parse()
            .map_err(|e| err(format!("line {}: bad id: {e}", lineno + 1)))?;
        if id != lineno {
            return Err(err(format!("line {}: id {id} out of order", lineno + 1)));
        }
        id_to_token.push(token.to_string());
    }
    if id_to_token.len() < RESERVED.len()
        || RESERVED.iter().zip(&id_to_token).any(|(r, t)| r != t)
    {
        return Err(err("reserved rows 0..3 missing or altered".into()));
    }
    let token_to_id: BTreeMap<String, u32> = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    if token_to_id.len() != id_to_token.len() {
        return Err(err("duplicate token".into()));
    }
    Ok(Vocab {
        token_to_id,
        id_to_token,
    })
}
