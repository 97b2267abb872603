//! Plug-in boundary for pretrained masked language models.
//!
//! A backend only has to tokenize-and-encode text and look words up in its
//! vocabulary; the MLM head, class restriction and `h` extraction live here.
//! Adapter encoders are inference-only: the backbone is treated as frozen.

use super::{
    cls_representation, mask_label_distribution, normalize, resolve_step_tokens, ChainEncoder, EncoderError, HMode,
    MlmHead, Result, StepEncoding,
};
use crate::labels::LabelSchema;
use crate::matrix::Matrix;
use crate::prompt::{StepVocabularies, TargetMode, Templates, CHAIN_LEN};

/// Hidden states of one encoded text.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendEncoding {
    /// `tokens × hidden_dim`
    pub hidden: Matrix,
    pub mask_index: usize,
    pub cls_index: usize,
}

pub trait MaskedLmBackend: Sync {
    /// Tokenizes and encodes `text`, which contains exactly one mask token.
    fn encode(&self, text: &str) -> std::result::Result<BackendEncoding, String>;
    /// Sub-token ids of `word`; empty when it cannot be represented.
    fn lookup(&self, word: &str) -> Vec<usize>;
    fn vocab_size(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn mask_token(&self) -> &str;
}

/// MLM head parameters applied on top of a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterHead {
    /// `hidden_dim × vocab_size`
    pub weight: Matrix,
    /// `1 × vocab_size`
    pub bias: Matrix,
    pub projection: Option<Matrix>,
}

pub struct AdapterEncoder<B> {
    backend: B,
    head: AdapterHead,
    steps: StepVocabularies,
    step_ids: Vec<Vec<usize>>,
    templates: Templates,
    n_labels: usize,
    h_mode: HMode,
    cls_step: usize,
    normalize_h: bool,
    max_sequence_length: usize,
}

#[derive(Debug, Clone)]
pub struct AdapterOptions {
    pub target_mode: TargetMode,
    pub h_mode: HMode,
    pub cls_step: usize,
    pub normalize_h: bool,
    pub max_sequence_length: usize,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        Self {
            target_mode: TargetMode::Literal,
            h_mode: HMode::Slice,
            cls_step: CHAIN_LEN,
            normalize_h: true,
            max_sequence_length: 256,
        }
    }
}

impl<B: MaskedLmBackend> AdapterEncoder<B> {
    pub fn new(backend: B, head: AdapterHead, schema: &LabelSchema, templates: Templates, opts: AdapterOptions) -> Result<Self> {
        let (d, v) = (backend.hidden_dim(), backend.vocab_size());
        if head.weight.shape() != (d, v) || head.bias.shape() != (1, v) {
            return Err(EncoderError::BadParams(format!("head must be {d}x{v} with a 1x{v} bias")));
        }
        if d < schema.len() {
            return Err(EncoderError::DimensionTooSmall { needed: schema.len(), available: d });
        }
        if !(1..=CHAIN_LEN).contains(&opts.cls_step) {
            return Err(EncoderError::BadConfig(format!("cls_step must be in 1..={CHAIN_LEN}")));
        }
        let steps = StepVocabularies::new(schema, opts.target_mode)?;
        let step_ids = resolve_step_tokens(&steps, |w| {
            backend.lookup(w).into_iter().map(|id| (id < v).then_some(id)).collect()
        })?;
        Ok(Self {
            backend,
            head,
            steps,
            step_ids,
            templates,
            n_labels: schema.len(),
            h_mode: opts.h_mode,
            cls_step: opts.cls_step,
            normalize_h: opts.normalize_h,
            max_sequence_length: opts.max_sequence_length,
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

impl<B: MaskedLmBackend> ChainEncoder for AdapterEncoder<B> {
    fn step_vocabularies(&self) -> &StepVocabularies {
        &self.steps
    }

    fn templates(&self) -> &Templates {
        &self.templates
    }

    fn mask_token(&self) -> &str {
        self.backend.mask_token()
    }

    fn encode_step(&self, text: &str, step: usize) -> Result<StepEncoding> {
        let enc = self.backend.encode(text).map_err(EncoderError::Backend)?;
        let tokens = enc.hidden.rows();
        if tokens > self.max_sequence_length {
            return Err(EncoderError::SequenceTooLong { step, tokens, limit: self.max_sequence_length });
        }
        if enc.mask_index >= tokens || enc.cls_index >= tokens {
            return Err(EncoderError::MaskNotFound(step));
        }
        let head = MlmHead { weight: &self.head.weight, bias: &self.head.bias };
        let distribution = mask_label_distribution(enc.hidden.row(enc.mask_index), &head, &self.step_ids[step])?;
        Ok(StepEncoding { distribution, cls_hidden: enc.hidden.row(enc.cls_index).to_vec() })
    }

    fn representation(&self, cls_hidden: &[f64]) -> Result<Vec<f64>> {
        let mut h = cls_representation(cls_hidden, self.n_labels, self.h_mode, self.head.projection.as_ref())?;
        if self.normalize_h {
            normalize(&mut h);
        }
        Ok(h)
    }

    fn cls_step_index(&self) -> usize {
        self.cls_step - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{decode_chain, encode_chain};
    use crate::prompt::{build_chain, FillPolicy};

    /// Looks whitespace-separated words up in a tiny vocabulary; the hidden
    /// state of each token is one-hot at `id % 4`.
    struct Mock {
        words: Vec<&'static str>,
    }

    impl MaskedLmBackend for Mock {
        fn encode(&self, text: &str) -> std::result::Result<BackendEncoding, String> {
            let mut ids = vec![0];
            for w in text.split_whitespace() {
                let w = w.trim_end_matches(['.', '!']);
                ids.push(self.words.iter().position(|x| *x == w).unwrap_or(1));
            }
            let mask_index = ids.iter().position(|&i| i == 2).ok_or("no mask")?;
            let mut hidden = Matrix::zeros(ids.len(), self.hidden_dim());
            for (r, &id) in ids.iter().enumerate() {
                hidden[(r, id % self.hidden_dim())] = 1.0;
            }
            Ok(BackendEncoding { hidden, mask_index, cls_index: 0 })
        }

        fn lookup(&self, word: &str) -> Vec<usize> {
            word.split_whitespace().filter_map(|w| self.words.iter().position(|x| *x == w)).collect()
        }

        fn vocab_size(&self) -> usize {
            self.words.len()
        }

        fn hidden_dim(&self) -> usize {
            4
        }

        fn mask_token(&self) -> &str {
            "[MASK]"
        }
    }

    fn mock() -> Mock {
        Mock { words: vec!["[CLS]", "[UNK]", "[MASK]", "good", "bad", "very"] }
    }

    #[test]
    fn adapter_runs_a_chain() {
        let schema = LabelSchema::new(vec![("pos", "very good"), ("neg", "bad")], None).unwrap();
        let mut weight = Matrix::zeros(4, 6);
        // the mask row is one-hot at 2 % 4; push "bad"
        weight[(2, 4)] = 3.0;
        let head = AdapterHead { weight, bias: Matrix::zeros(1, 6), projection: None };
        let enc = AdapterEncoder::new(mock(), head, &schema, Templates::default(), AdapterOptions::default()).unwrap();
        // "very good" uses its first sub-token, "very"
        assert_eq!(enc.step_ids[0], vec![5, 4]);
        let (chain, out) = decode_chain(&enc, "good stuff", FillPolicy::Predicted, None).unwrap();
        assert_eq!(chain.steps[0].fill_word.as_deref(), Some("bad"));
        assert!(out.step_label_distributions[3][1] > 0.9);
        assert_eq!(out.h.len(), 2);

        let gold = build_chain("good stuff", &schema, Some("pos"), TargetMode::Literal, &Templates::default()).unwrap();
        let again = encode_chain(&enc, &gold).unwrap();
        assert_eq!(again.step_label_distributions.len(), 4);
    }

    #[test]
    fn adapter_rejects_unknown_words_and_bad_heads() {
        let schema = LabelSchema::new(vec![("pos", "great"), ("neg", "bad")], None).unwrap();
        let head = AdapterHead { weight: Matrix::zeros(4, 6), bias: Matrix::zeros(1, 6), projection: None };
        assert!(matches!(
            AdapterEncoder::new(mock(), head.clone(), &schema, Templates::default(), AdapterOptions::default()),
            Err(EncoderError::UnknownVerbalizerToken { .. })
        ));
        let bad = AdapterHead { weight: Matrix::zeros(3, 6), ..head };
        let schema = LabelSchema::new(vec![("pos", "good"), ("neg", "bad")], None).unwrap();
        assert!(AdapterEncoder::new(mock(), bad, &schema, Templates::default(), AdapterOptions::default()).is_err());
    }
}
