//! The four-step sentiment chain.
//!
//! Step `t` is formed by appending the `t`-th template fragment to step `t-1`
//! after that step's mask has been resolved, so each step contains exactly one
//! mask and every filled step is a prefix of its successor:
//!
//! ```text
//! T1 = x + " My first feeling is [MASK]."
//! T2 = T1[mask := w1] + " Based on the first step, my second feeling is [MASK]."
//! T3 = T2[mask := w2] + " Based on the second step, my third feeling is [MASK]."
//! T4 = T3[mask := w3] + " My final feeling is [MASK]."
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{LabelError, LabelSchema};

pub const CHAIN_LEN: usize = 4;

/// Fragments appended at each step, with `[MASK]` as the placeholder.
pub const DEFAULT_TEMPLATES: [&str; CHAIN_LEN] = [
    "My first feeling is [MASK].",
    "Based on the first step, my second feeling is [MASK].",
    "Based on the second step, my third feeling is [MASK].",
    "My final feeling is [MASK].",
];

const PLACEHOLDER: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("input text already contains the mask token `{0}`")]
    MaskInInput(String),
    #[error("gold fill policy requires a gold label")]
    MissingGold,
    #[error("mask already filled with `{0}`")]
    AlreadyFilled(String),
    #[error("fill word is empty or contains the mask token")]
    BadFillWord,
    #[error("step {0} has an unfilled mask; fill it before extending the chain")]
    UnfilledMask(usize),
    #[error("chain is incomplete: {0} of 4 steps built")]
    Incomplete(usize),
    #[error("hierarchy target mode requires a schema hierarchy")]
    MissingHierarchy,
    #[error("template {index}: {message}")]
    BadTemplate { index: usize, message: String },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillPolicy {
    /// Teacher forcing: earlier masks take the gold target word.
    #[default]
    Gold,
    /// Earlier masks take the model's greedy prediction for that step.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Every step targets the gold label.
    #[default]
    Literal,
    /// Steps target basic, secondary, tertiary emotion, then the label.
    Hierarchy,
}

/// The four appended fragments, each holding one `[MASK]` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    fragments: Vec<String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self { fragments: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect() }
    }
}

impl Templates {
    pub fn new(fragments: Vec<String>) -> Result<Self> {
        if fragments.len() != CHAIN_LEN {
            return Err(PromptError::BadTemplate {
                index: fragments.len(),
                message: format!("expected {CHAIN_LEN} templates, found {}", fragments.len()),
            });
        }
        for (index, f) in fragments.iter().enumerate() {
            let count = f.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(PromptError::BadTemplate {
                    index,
                    message: format!("expected exactly one {PLACEHOLDER}, found {count}"),
                });
            }
            if f.trim() != f || f.is_empty() {
                return Err(PromptError::BadTemplate { index, message: "leading or trailing whitespace".into() });
            }
        }
        Ok(Self { fragments })
    }

    /// Reads four non-empty lines, one template per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io { path: path.to_owned(), source })?;
        let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_owned()).collect();
        Self::new(lines)
    }

    pub fn fragment(&self, step: usize) -> &str {
        &self.fragments[step]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub text: String,
    /// Character (not byte) index of the mask token in `text`.
    pub mask_char_offset: usize,
    pub target_label: String,
    pub fill_word: Option<String>,
    mask_token: String,
}

impl ChainStep {
    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    pub fn mask_byte_offset(&self) -> usize {
        self.text.char_indices().nth(self.mask_char_offset).map_or(self.text.len(), |(b, _)| b)
    }

    pub fn is_filled(&self) -> bool {
        self.fill_word.is_some()
    }

    /// Text with the mask replaced by the recorded fill word, if any.
    pub fn filled_text(&self) -> Option<String> {
        self.fill_word.as_ref().map(|w| splice(&self.text, self.mask_byte_offset(), self.mask_token.len(), w))
    }
}

fn splice(text: &str, at: usize, len: usize, word: &str) -> String {
    let mut out = String::with_capacity(text.len() + word.len());
    out.push_str(&text[..at]);
    out.push_str(word);
    out.push_str(&text[at + len..]);
    out
}

/// Replaces the mask of `step` with `word` and records the fill.
pub fn fill_mask(step: &mut ChainStep, word: &str) -> Result<String> {
    if let Some(w) = &step.fill_word {
        return Err(PromptError::AlreadyFilled(w.clone()));
    }
    if word.trim().is_empty() || word.contains(step.mask_token.as_str()) {
        return Err(PromptError::BadFillWord);
    }
    let at = step.mask_byte_offset();
    debug_assert!(step.text[at..].starts_with(step.mask_token.as_str()));
    step.fill_word = Some(word.to_owned());
    Ok(splice(&step.text, at, step.mask_token.len(), word))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChain {
    pub source_text: String,
    pub steps: Vec<ChainStep>,
}

impl PromptChain {
    pub fn texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

/// A target class for one chain step: its name and the word that stands for it
/// at the mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepClass {
    pub name: String,
    pub word: String,
}

/// Target vocabularies for the four steps.
///
/// In literal mode every step predicts over the schema labels (verbalizer
/// words). In hierarchy mode steps 1–3 predict over the distinct basic,
/// secondary and tertiary names (in order of first appearance, the name itself
/// serving as the word) and step 4 over the labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepVocabularies {
    mode: TargetMode,
    steps: Vec<Vec<StepClass>>,
}

impl StepVocabularies {
    pub fn new(schema: &LabelSchema, mode: TargetMode) -> Result<Self> {
        let labels: Vec<StepClass> = (0..schema.len())
            .map(|i| StepClass { name: schema.label(i).to_owned(), word: schema.verbalizer_word(i).to_owned() })
            .collect();
        let steps = match mode {
            TargetMode::Literal => vec![labels; CHAIN_LEN],
            TargetMode::Hierarchy => {
                let h = schema.hierarchy().ok_or(PromptError::MissingHierarchy)?;
                let level = |pick: fn(&crate::labels::EmotionPath) -> &str| {
                    let mut out: Vec<StepClass> = Vec::new();
                    for p in h {
                        let name = pick(p);
                        if !out.iter().any(|c| c.name == name) {
                            out.push(StepClass { name: name.to_owned(), word: name.to_owned() });
                        }
                    }
                    out
                };
                vec![level(|p| &p.basic), level(|p| &p.secondary), level(|p| &p.tertiary), labels]
            }
        };
        Ok(Self { mode, steps })
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn step(&self, t: usize) -> &[StepClass] {
        &self.steps[t]
    }

    pub fn index_of(&self, t: usize, name: &str) -> Option<usize> {
        self.steps[t].iter().position(|c| c.name == name)
    }

    /// Every word any step can predict.
    pub fn all_words(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().flatten().map(|c| c.word.as_str())
    }
}

/// Per-step target names for gold label `y`.
pub fn step_targets(y: &str, schema: &LabelSchema, mode: TargetMode) -> Result<[String; CHAIN_LEN]> {
    let idx = schema.index_of(y)?;
    match mode {
        TargetMode::Literal => Ok(std::array::from_fn(|_| y.to_owned())),
        TargetMode::Hierarchy => {
            let p = schema.path_of(idx).ok_or(PromptError::MissingHierarchy)?;
            Ok([p.basic.clone(), p.secondary.clone(), p.tertiary.clone(), y.to_owned()])
        }
    }
}

/// Builds a chain one step at a time; used directly for greedy decoding.
#[derive(Debug, Clone)]
pub struct ChainBuilder<'t> {
    templates: &'t Templates,
    mask_token: String,
    source: String,
    targets: [String; CHAIN_LEN],
    steps: Vec<ChainStep>,
}

impl<'t> ChainBuilder<'t> {
    /// Starts a chain over `x`; step 1 is formed immediately.
    pub fn new(x: &str, mask_token: &str, templates: &'t Templates, targets: [String; CHAIN_LEN]) -> Result<Self> {
        let source = x.trim_end();
        if source.trim().is_empty() {
            return Err(PromptError::EmptyInput);
        }
        if source.contains(mask_token) {
            return Err(PromptError::MaskInInput(mask_token.to_owned()));
        }
        let mut b = Self {
            templates,
            mask_token: mask_token.to_owned(),
            source: source.to_owned(),
            targets,
            steps: Vec::with_capacity(CHAIN_LEN),
        };
        b.push_step(b.source.clone());
        Ok(b)
    }

    fn push_step(&mut self, prefix: String) {
        let t = self.steps.len();
        let fragment = self.templates.fragment(t).replacen(PLACEHOLDER, &self.mask_token, 1);
        let text = format!("{prefix} {fragment}");
        let byte = prefix.len() + 1 + fragment.find(self.mask_token.as_str()).expect("validated template");
        let mask_char_offset = text[..byte].chars().count();
        self.steps.push(ChainStep {
            text,
            mask_char_offset,
            target_label: self.targets[t].clone(),
            fill_word: None,
            mask_token: self.mask_token.clone(),
        });
    }

    /// Zero-based index of the newest step.
    pub fn current_index(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn current(&self) -> &ChainStep {
        self.steps.last().expect("builder always holds a step")
    }

    /// Fills the newest step's mask and, unless the chain is complete, forms
    /// the next step from the filled text.
    pub fn fill_current(&mut self, word: &str) -> Result<()> {
        let step = self.steps.last_mut().expect("builder always holds a step");
        let filled = fill_mask(step, word)?;
        if self.steps.len() < CHAIN_LEN {
            self.push_step(filled);
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == CHAIN_LEN
    }

    pub fn finish(self) -> Result<PromptChain> {
        if !self.is_complete() {
            return Err(PromptError::Incomplete(self.steps.len()));
        }
        Ok(PromptChain { source_text: self.source, steps: self.steps })
    }
}

/// Builds the full chain with teacher forcing: steps 1–3 are filled with the
/// gold target word of that step; step 4 keeps its mask.
///
/// Greedy (predicted) chains depend on a model and are built step by step
/// with [`ChainBuilder`]; see `evalviz::predict`.
pub fn build_chain(
    x: &str,
    schema: &LabelSchema,
    gold: Option<&str>,
    mode: TargetMode,
    templates: &Templates,
) -> Result<PromptChain> {
    if x.trim().is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let gold = gold.ok_or(PromptError::MissingGold)?;
    let vocab = StepVocabularies::new(schema, mode)?;
    let targets = step_targets(gold, schema, mode)?;
    let mut b = ChainBuilder::new(x, schema.mask_token(), templates, targets.clone())?;
    for (t, target) in targets.iter().enumerate().take(CHAIN_LEN - 1) {
        let idx = vocab.index_of(t, target).expect("targets come from the schema");
        b.fill_current(&vocab.step(t)[idx].word)?;
    }
    b.finish()
}
