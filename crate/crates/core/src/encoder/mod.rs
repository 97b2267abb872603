//! Masked-language-model encoders.
//!
//! Each chain step is encoded independently. The class distribution of a step
//! is the MLM head's softmax over the full token vocabulary at the mask
//! position, restricted to the step's target words and renormalised. The
//! sentence representation `h` is read from the `[CLS]` position of one step
//! (the last by default): either its first `|C|` components or a learned
//! `|C|`-dimensional projection, optionally L2-normalised.
//!
//! Two backends implement [`ChainEncoder`]: [`reference::ReferenceEncoder`], a
//! small trainable transformer, and [`adapter::AdapterEncoder`], which wraps
//! any external [`adapter::MaskedLmBackend`].

pub mod adapter;
pub mod reference;
pub mod tokenizer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::softmax_in_place;
use crate::matrix::Matrix;
use crate::prompt::{ChainBuilder, FillPolicy, PromptChain, PromptError, StepVocabularies, Templates, CHAIN_LEN};

pub use reference::ReferenceEncoder;
pub use tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("step {step}: sequence has {tokens} tokens, limit is {limit}")]
    SequenceTooLong { step: usize, tokens: usize, limit: usize },
    #[error("step {0}: no mask token after tokenization")]
    MaskNotFound(usize),
    #[error("step {step}: {count} mask tokens after tokenization")]
    MultipleMasks { step: usize, count: usize },
    #[error("verbalizer word `{word}` for `{label}` is not in the vocabulary")]
    UnknownVerbalizerToken { label: String, word: String },
    #[error("representation needs {needed} dimensions, hidden state has {available}")]
    DimensionTooSmall { needed: usize, available: usize },
    #[error("hidden state has dimension {got}, head expects {expected}")]
    HeadMismatch { expected: usize, got: usize },
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("parameter set does not match the model: {0}")]
    BadParams(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Reference,
    Adapter,
}

/// How `h` is read from the `[CLS]` hidden vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HMode {
    /// First `|C|` components.
    #[default]
    Slice,
    /// Learned `hidden_dim × |C|` map, identity-initialised.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub max_sequence_length: usize,
    /// Token list; filled from the training data when empty.
    pub vocabulary: Vec<String>,
    pub seed: u64,
    pub h_mode: HMode,
    /// 1-based chain step whose `[CLS]` output supplies `h`.
    pub cls_step: usize,
    pub normalize_h: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Reference,
            hidden_dim: 32,
            ff_dim: 64,
            layers: 2,
            max_sequence_length: 256,
            vocabulary: Vec::new(),
            seed: 0,
            h_mode: HMode::Slice,
            cls_step: CHAIN_LEN,
            normalize_h: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, n_labels: usize) -> Result<()> {
        let bad = |m: String| Err(EncoderError::BadConfig(m));
        if self.hidden_dim < n_labels {
            return bad(format!("hidden_dim {} < number of labels {n_labels}", self.hidden_dim));
        }
        if self.max_sequence_length == 0 || self.layers == 0 || self.ff_dim == 0 {
            return bad("max_sequence_length, layers and ff_dim must be positive".into());
        }
        if !(1..=CHAIN_LEN).contains(&self.cls_step) {
            return bad(format!("cls_step must be in 1..={CHAIN_LEN}, got {}", self.cls_step));
        }
        Ok(())
    }
}

/// Per-step distributions and the sentence representation of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    pub step_label_distributions: Vec<Vec<f64>>,
    /// The representation fed to the contrastive loss (normalised when configured).
    pub h: Vec<f64>,
    /// `[CLS]` hidden vector of the step selected by `cls_step`.
    pub cls_hidden: Vec<f64>,
}

/// Output of encoding a single chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEncoding {
    pub distribution: Vec<f64>,
    pub cls_hidden: Vec<f64>,
}

/// Trainable parameters as named dense tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    /// Zero tensors with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Flattened view of scalar `k` across all tensors.
    pub fn scalar(&self, mut k: usize) -> f64 {
        for t in &self.tensors {
            let n = t.as_slice().len();
            if k < n {
                return t.as_slice()[k];
            }
            k -= n;
        }
        panic!("scalar index out of range")
    }

    pub fn scalar_mut(&mut self, mut k: usize) -> &mut f64 {
        for t in &mut self.tensors {
            let n = t.as_slice().len();
            if k < n {
                return &mut t.as_mut_slice()[k];
            }
            k -= n;
        }
        panic!("scalar index out of range")
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.scale(c);
        }
    }
}

/// Linear MLM head over the full token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<'a> {
    /// `hidden_dim × vocab_size`
    pub weight: &'a Matrix,
    /// `1 × vocab_size`
    pub bias: &'a Matrix,
}

/// Class distribution over `target_tokens` from the hidden state at the mask.
///
/// Equivalent to a full-vocabulary softmax followed by restriction to the
/// target tokens and renormalisation; computed directly on the restricted
/// logits, which is the same quantity without the full-vocabulary sum.
pub fn mask_label_distribution(hidden_at_mask: &[f64], head: &MlmHead<'_>, target_tokens: &[usize]) -> Result<Vec<f64>> {
    if hidden_at_mask.len() != head.weight.rows() {
        return Err(EncoderError::HeadMismatch { expected: head.weight.rows(), got: hidden_at_mask.len() });
    }
    let mut logits: Vec<f64> = target_tokens
        .iter()
        .map(|&tok| {
            let mut z = head.bias.as_slice()[tok];
            for (d, &x) in hidden_at_mask.iter().enumerate() {
                z += x * head.weight[(d, tok)];
            }
            z
        })
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// `h` from a `[CLS]` hidden vector (before optional normalisation).
pub fn cls_representation(cls_hidden: &[f64], n_labels: usize, mode: HMode, projection: Option<&Matrix>) -> Result<Vec<f64>> {
    if cls_hidden.len() < n_labels {
        return Err(EncoderError::DimensionTooSmall { needed: n_labels, available: cls_hidden.len() });
    }
    match (mode, projection) {
        (HMode::Slice, _) => Ok(cls_hidden[..n_labels].to_vec()),
        (HMode::Projection, Some(p)) => {
            if p.rows() != cls_hidden.len() || p.cols() != n_labels {
                return Err(EncoderError::BadParams("projection shape".into()));
            }
            let row = Matrix::from_vec(1, cls_hidden.len(), cls_hidden.to_vec());
            Ok(row.matmul(p).into_vec())
        }
        (HMode::Projection, None) => Err(EncoderError::BadParams("projection mode without projection".into())),
    }
}

/// Identity-initialised projection `hidden_dim × n_labels`.
pub fn identity_projection(hidden_dim: usize, n_labels: usize) -> Matrix {
    let mut m = Matrix::zeros(hidden_dim, n_labels);
    for i in 0..n_labels.min(hidden_dim) {
        m[(i, i)] = 1.0;
    }
    m
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = crate::matrix::l2_norm(v).max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Resolves each step class to a single vocabulary token id.
///
/// A word that splits into several tokens uses its first token, with one
/// warning per class.
pub fn resolve_step_tokens(
    steps: &StepVocabularies,
    lookup: impl Fn(&str) -> Vec<Option<usize>>,
) -> Result<Vec<Vec<usize>>> {
    let mut warned = std::collections::HashSet::new();
    (0..CHAIN_LEN)
        .map(|t| {
            steps
                .step(t)
                .iter()
                .map(|c| {
                    let ids = lookup(&c.word);
                    if ids.len() > 1 && warned.insert(c.name.clone()) {
                        log::warn!("verbalizer `{}` for `{}` spans {} tokens; using the first", c.word, c.name, ids.len());
                    }
                    ids.first().copied().flatten().ok_or_else(|| EncoderError::UnknownVerbalizerToken {
                        label: c.name.clone(),
                        word: c.word.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Anything that can encode chain steps; implemented by both backends.
pub trait ChainEncoder: Sync {
    fn step_vocabularies(&self) -> &StepVocabularies;
    fn templates(&self) -> &Templates;
    fn mask_token(&self) -> &str;
    /// Encodes one step (`step` is 0-based).
    fn encode_step(&self, text: &str, step: usize) -> Result<StepEncoding>;
    /// Final `h` from the selected step's `[CLS]` vector.
    fn representation(&self, cls_hidden: &[f64]) -> Result<Vec<f64>>;
    /// 0-based step supplying `[CLS]`.
    fn cls_step_index(&self) -> usize;
}

/// Encodes an already-built chain.
pub fn encode_chain<E: ChainEncoder + ?Sized>(encoder: &E, chain: &PromptChain) -> Result<EncoderOutput> {
    let mut dists = Vec::with_capacity(CHAIN_LEN);
    let mut cls = Vec::new();
    for (t, step) in chain.steps.iter().enumerate() {
        let enc = encoder.encode_step(&step.text, t)?;
        dists.push(enc.distribution);
        if t == encoder.cls_step_index() {
            cls = enc.cls_hidden;
        }
    }
    let h = encoder.representation(&cls)?;
    Ok(EncoderOutput { step_label_distributions: dists, h, cls_hidden: cls })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Builds and encodes a chain step by step. Earlier masks are filled with the
/// gold word (`Gold`, requires `targets`) or the step's argmax word
/// (`Predicted`).
pub fn decode_chain<E: ChainEncoder + ?Sized>(
    encoder: &E,
    text: &str,
    policy: FillPolicy,
    targets: Option<&[usize; CHAIN_LEN]>,
) -> Result<(PromptChain, EncoderOutput)> {
    let steps = encoder.step_vocabularies();
    let names: [String; CHAIN_LEN] = std::array::from_fn(|t| match targets {
        Some(tg) => steps.step(t)[tg[t]].name.clone(),
        None => String::new(),
    });
    if policy == FillPolicy::Gold && targets.is_none() {
        return Err(PromptError::MissingGold.into());
    }
    let mut builder = ChainBuilder::new(text, encoder.mask_token(), encoder.templates(), names)?;
    let mut dists = Vec::with_capacity(CHAIN_LEN);
    let mut cls = Vec::new();
    for t in 0..CHAIN_LEN {
        let enc = encoder.encode_step(&builder.current().text, t)?;
        if t == encoder.cls_step_index() {
            cls = enc.cls_hidden;
        }
        if t + 1 < CHAIN_LEN {
            let pick = match (policy, targets) {
                (FillPolicy::Gold, Some(tg)) => tg[t],
                _ => argmax(&enc.distribution),
            };
            builder.fill_current(&steps.step(t)[pick].word)?;
        }
        dists.push(enc.distribution);
    }
    let h = encoder.representation(&cls)?;
    Ok((builder.finish()?, EncoderOutput { step_label_distributions: dists, h, cls_hidden: cls }))
}
