//! Inference, accuracy / macro-F1, and figure emission.

pub mod figures;
pub mod tsne;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Example;
use crate::encoder::{argmax, decode_chain, ChainEncoder, EncoderError};
use crate::labels::{LabelError, LabelSchema};
use crate::par::{self, Execution};
use crate::prompt::{FillPolicy, CHAIN_LEN};

pub use figures::{emit_heatmap, emit_scatter, Figure};
pub use tsne::{project_2d, TsneOptions};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("{n} points are too few to project (need at least {min})")]
    TooFewPoints { n: usize, min: usize },
    #[error("perplexity {perplexity} must be positive and below (n - 1) / 3 = {limit}")]
    BadPerplexity { perplexity: f64, limit: f64 },
    #[error("example `{id}`: {source}")]
    Encoder {
        id: String,
        #[source]
        source: EncoderError,
    },
    #[error("{0} labels for {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label index {0} out of range")]
    LabelOutOfRange(usize),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Accuracy, macro-F1 and the confusion matrix of one evaluation.
///
/// `per_class_f1` holds only classes that occur in the gold labels or the
/// predictions; `macro_f1` is their unweighted mean. A present class whose
/// precision and recall are both zero scores 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    /// `confusion[gold][predicted]`, schema order.
    pub confusion: Vec<Vec<u64>>,
    pub labels: Vec<String>,
    pub n: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| EvalError::Io { path: path.to_owned(), message: e.to_string() })
    }
}

/// Builds a report from gold and predicted label indices.
pub fn metrics_from_labels(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyInput("no examples to evaluate".into()));
    }
    let c = labels.len();
    let mut confusion = vec![vec![0u64; c]; c];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= c || p >= c {
            return Err(EvalError::LabelOutOfRange(g.max(p)));
        }
        confusion[g][p] += 1;
    }
    let n = gold.len();
    let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let mut per_class_f1 = BTreeMap::new();
    for i in 0..c {
        let tp = confusion[i][i];
        let gold_i: u64 = confusion[i].iter().sum();
        let pred_i: u64 = confusion.iter().map(|row| row[i]).sum();
        if gold_i == 0 && pred_i == 0 {
            continue;
        }
        // F1 = 2TP / (|gold| + |pred|); zero when TP is zero
        let f1 = 2.0 * tp as f64 / (gold_i + pred_i) as f64;
        per_class_f1.insert(labels[i].clone(), f1);
    }
    let macro_f1 = per_class_f1.values().sum::<f64>() / per_class_f1.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        macro_f1,
        per_class_f1,
        confusion,
        labels: labels.to_vec(),
        n,
    })
}

/// Greedy chain decoding; the label is the argmax of the final step.
pub fn predict<E: ChainEncoder + ?Sized>(encoder: &E, text: &str) -> Result<usize, EncoderError> {
    let (_, out) = decode_chain(encoder, text, FillPolicy::Predicted, None)?;
    Ok(argmax(&out.step_label_distributions[CHAIN_LEN - 1]))
}

pub fn evaluate<E: ChainEncoder + ?Sized>(
    examples: &[Example],
    encoder: &E,
    schema: &LabelSchema,
    exec: Execution,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(EvalError::EmptyInput("no examples to evaluate".into()));
    }
    let gold = examples.iter().map(|e| schema.index_of(&e.label)).collect::<Result<Vec<_>, _>>()?;
    let pred = par::try_map_indexed(exec, examples, |_, e| {
        predict(encoder, &e.text).map_err(|source| EvalError::Encoder { id: e.source_id.clone(), source })
    })?;
    metrics_from_labels(&gold, &pred, schema.labels())
}

/// Sentence representations `h` of greedy-decoded chains, in input order.
pub fn embed<E: ChainEncoder + ?Sized>(examples: &[Example], encoder: &E, exec: Execution) -> Result<Vec<Vec<f64>>> {
    par::try_map_indexed(exec, examples, |_, e| {
        decode_chain(encoder, &e.text, FillPolicy::Predicted, None)
            .map(|(_, out)| out.h)
            .map_err(|source| EvalError::Encoder { id: e.source_id.clone(), source })
    })
}
