//! Small deterministic transformer encoder.
//!
//! Token + learned position embeddings, `layers` post-norm blocks of
//! single-head self-attention and a tanh feed-forward, and a linear MLM head
//! over the whole vocabulary. Sized to train on a laptop in seconds.

use rand::Rng as _;

use super::{
    cls_representation, identity_projection, normalize, resolve_step_tokens, ChainEncoder, EncoderConfig, EncoderError,
    HMode, ParamSet, Result, StepEncoding, Vocabulary,
};
use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::labels::LabelSchema;
use crate::matrix::Matrix;
use crate::prompt::{ChainBuilder, FillPolicy, PromptChain, StepVocabularies, TargetMode, Templates, CHAIN_LEN};
use crate::seeds;

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    steps: StepVocabularies,
    step_ids: Vec<Vec<usize>>,
    templates: Templates,
    n_labels: usize,
}

/// Recorded forward pass of one training sample.
#[derive(Debug)]
pub struct SampleForward {
    tape: Tape,
    params: Vec<Var>,
    logits: Vec<Var>,
    h_var: Var,
    pub distributions: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub cls_hidden: Vec<f64>,
    pub chain: PromptChain,
}

impl ReferenceEncoder {
    /// `config.vocabulary` must be populated (see [`ReferenceEncoder::build_vocabulary`]).
    pub fn new(config: EncoderConfig, schema: &LabelSchema, mode: TargetMode, templates: Templates) -> Result<Self> {
        config.validate(schema.len())?;
        if config.vocabulary.len() < 3 || config.vocabulary[1] != schema.mask_token() {
            return Err(EncoderError::BadConfig("vocabulary must start with [CLS], the mask token and [UNK]".into()));
        }
        let vocab = Vocabulary::from_tokens(config.vocabulary.clone());
        let steps = StepVocabularies::new(schema, mode)?;
        let step_ids = resolve_step_tokens(&steps, |w| vocab.word_ids(w))?;
        Ok(Self { config, vocab, steps, step_ids, templates, n_labels: schema.len() })
    }

    /// Vocabulary covering `texts`, the templates and every target word.
    pub fn build_vocabulary<'a>(
        schema: &LabelSchema,
        mode: TargetMode,
        templates: &Templates,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<String>> {
        let steps = StepVocabularies::new(schema, mode)?;
        let fragments: Vec<String> =
            (0..CHAIN_LEN).map(|t| templates.fragment(t).replace("[MASK]", schema.mask_token())).collect();
        let mut all: Vec<String> = texts.into_iter().map(str::to_owned).collect();
        all.extend(fragments);
        all.extend(steps.all_words().map(str::to_owned));
        Ok(Vocabulary::build(schema.mask_token(), all.iter().map(String::as_str)).tokens().to_vec())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn param_count(&self) -> usize {
        2 + PER_LAYER * self.config.layers + 2 + usize::from(self.config.h_mode == HMode::Projection)
    }

    fn head_index(&self) -> usize {
        2 + PER_LAYER * self.config.layers
    }

    /// Deterministic initialisation from `config.seed`. The MLM head starts at
    /// zero, so an untrained model predicts uniform step distributions.
    pub fn init_params(&self) -> ParamSet {
        let d = self.config.hidden_dim;
        let f = self.config.ff_dim;
        let v = self.vocab.len();
        let mut rng = seeds::named_rng(self.config.seed, "init");
        let mut uniform = |rows: usize, cols: usize, a: f64| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
        };
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut entries = vec![
            ("tok_emb".to_owned(), uniform(v, d, 0.02)),
            ("pos_emb".to_owned(), uniform(self.config.max_sequence_length, d, 0.1)),
        ];
        for l in 0..self.config.layers {
            let ones = Matrix::from_vec(1, d, vec![1.0; d]);
            entries.push((format!("l{l}.wq"), uniform(d, d, xavier(d, d))));
            entries.push((format!("l{l}.wk"), uniform(d, d, xavier(d, d))));
            entries.push((format!("l{l}.wv"), uniform(d, d, xavier(d, d))));
            entries.push((format!("l{l}.wo"), uniform(d, d, xavier(d, d))));
            entries.push((format!("l{l}.ln1.g"), ones.clone()));
            entries.push((format!("l{l}.ln1.b"), Matrix::zeros(1, d)));
            entries.push((format!("l{l}.w1"), uniform(d, f, xavier(d, f))));
            entries.push((format!("l{l}.c1"), Matrix::zeros(1, f)));
            entries.push((format!("l{l}.w2"), uniform(f, d, xavier(f, d))));
            entries.push((format!("l{l}.c2"), Matrix::zeros(1, d)));
            entries.push((format!("l{l}.ln2.g"), ones));
            entries.push((format!("l{l}.ln2.b"), Matrix::zeros(1, d)));
        }
        entries.push(("head.w".to_owned(), Matrix::zeros(d, v)));
        entries.push(("head.b".to_owned(), Matrix::zeros(1, v)));
        if self.config.h_mode == HMode::Projection {
            entries.push(("proj".to_owned(), identity_projection(d, self.n_labels)));
        }
        ParamSet::new(entries)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.init_params_shapes();
        if params.len() != expected.len() {
            return Err(EncoderError::BadParams(format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for ((name, t), (en, shape)) in params.names().iter().zip(params.tensors()).zip(&expected) {
            if name != en || t.shape() != *shape {
                return Err(EncoderError::BadParams(format!("tensor `{name}` {:?} != `{en}` {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn init_params_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, f, v) = (self.config.hidden_dim, self.config.ff_dim, self.vocab.len());
        let mut out = vec![
            ("tok_emb".to_owned(), (v, d)),
            ("pos_emb".to_owned(), (self.config.max_sequence_length, d)),
        ];
        for l in 0..self.config.layers {
            for (name, shape) in [
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("ln1.g", (1, d)),
                ("ln1.b", (1, d)),
                ("w1", (d, f)),
                ("c1", (1, f)),
                ("w2", (f, d)),
                ("c2", (1, d)),
                ("ln2.g", (1, d)),
                ("ln2.b", (1, d)),
            ] {
                out.push((format!("l{l}.{name}"), shape));
            }
        }
        out.push(("head.w".to_owned(), (d, v)));
        out.push(("head.b".to_owned(), (1, v)));
        if self.config.h_mode == HMode::Projection {
            out.push(("proj".to_owned(), (d, self.n_labels)));
        }
        out
    }

    pub fn bind<'a>(&'a self, params: &'a ParamSet) -> Result<BoundReference<'a>> {
        self.check_params(params)?;
        Ok(BoundReference { encoder: self, params })
    }

    fn leaves(&self, tape: &mut Tape, params: &ParamSet) -> Vec<Var> {
        debug_assert_eq!(params.len(), self.param_count());
        params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
    }

    fn token_ids(&self, text: &str, step: usize) -> Result<(Vec<usize>, usize)> {
        let ids = self.vocab.encode(text);
        if ids.len() > self.config.max_sequence_length {
            return Err(EncoderError::SequenceTooLong {
                step,
                tokens: ids.len(),
                limit: self.config.max_sequence_length,
            });
        }
        let masks: Vec<usize> =
            ids.iter().enumerate().filter(|(_, &id)| id == Vocabulary::MASK_ID).map(|(i, _)| i).collect();
        match masks.len() {
            0 => Err(EncoderError::MaskNotFound(step)),
            1 => Ok((ids, masks[0])),
            count => Err(EncoderError::MultipleMasks { step, count }),
        }
    }

    /// Records one step on `tape`; returns the restricted logits (`1 × k`) and
    /// the `[CLS]` hidden row (`1 × d`).
    fn encode_on_tape(&self, tape: &mut Tape, p: &[Var], text: &str, step: usize) -> Result<(Var, Var)> {
        let (ids, mask_pos) = self.token_ids(text, step)?;
        let len = ids.len();
        let d = self.config.hidden_dim;
        let tok = tape.gather_rows(p[TOK_EMB], ids);
        let pos = tape.gather_rows(p[POS_EMB], (0..len).collect());
        let mut x = tape.add(tok, pos);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for l in 0..self.config.layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let q = tape.matmul(x, w[0]);
            let k = tape.matmul(x, w[1]);
            let v = tape.matmul(x, w[2]);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, inv_sqrt_d);
            let attn = tape.softmax_rows(scores);
            let ctx = tape.matmul(attn, v);
            let out = tape.matmul(ctx, w[3]);
            let r = tape.add(x, out);
            let n = tape.layer_norm(r);
            let n = tape.mul_row(n, w[4]);
            x = tape.add_row(n, w[5]);
            let f = tape.matmul(x, w[6]);
            let f = tape.add_row(f, w[7]);
            let f = tape.tanh(f);
            let f = tape.matmul(f, w[8]);
            let f = tape.add_row(f, w[9]);
            let r = tape.add(x, f);
            let n = tape.layer_norm(r);
            let n = tape.mul_row(n, w[10]);
            x = tape.add_row(n, w[11]);
        }
        let head = self.head_index();
        let at_mask = tape.gather_rows(x, vec![mask_pos]);
        let logits = tape.matmul(at_mask, p[head]);
        let logits = tape.add_row(logits, p[head + 1]);
        let logits = tape.gather_cols(logits, self.step_ids[step].clone());
        let cls = tape.gather_rows(x, vec![0]);
        Ok((logits, cls))
    }

    fn h_on_tape(&self, tape: &mut Tape, p: &[Var], cls: Var) -> Var {
        let h = match self.config.h_mode {
            HMode::Slice => tape.slice_cols(cls, self.n_labels),
            HMode::Projection => tape.matmul(cls, p[self.head_index() + 2]),
        };
        if self.config.normalize_h {
            tape.l2_normalize_rows(h)
        } else {
            h
        }
    }

    /// Forward pass over a whole chain, recording everything needed for
    /// [`ReferenceEncoder::backward_sample`]. `targets` index each step's
    /// target vocabulary; with `FillPolicy::Predicted` earlier masks take the
    /// step's argmax word instead of the target word.
    pub fn forward_sample(
        &self,
        params: &ParamSet,
        text: &str,
        targets: &[usize; CHAIN_LEN],
        policy: FillPolicy,
    ) -> Result<SampleForward> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape, params);
        let names: [String; CHAIN_LEN] = std::array::from_fn(|t| self.steps.step(t)[targets[t]].name.clone());
        let mut builder = ChainBuilder::new(text, self.vocab.mask_token(), &self.templates, names)?;
        let mut logits = Vec::with_capacity(CHAIN_LEN);
        let mut distributions = Vec::with_capacity(CHAIN_LEN);
        let mut cls_var = None;
        for t in 0..CHAIN_LEN {
            let (lg, cls) = self.encode_on_tape(&mut tape, &pv, &builder.current().text, t)?;
            let mut dist = tape.value(lg).as_slice().to_vec();
            softmax_in_place(&mut dist);
            if t + 1 == self.config.cls_step {
                cls_var = Some(cls);
            }
            if t + 1 < CHAIN_LEN {
                let pick = match policy {
                    FillPolicy::Gold => targets[t],
                    FillPolicy::Predicted => super::argmax(&dist),
                };
                builder.fill_current(&self.steps.step(t)[pick].word)?;
            }
            logits.push(lg);
            distributions.push(dist);
        }
        let cls_var = cls_var.expect("cls_step validated");
        let h_var = self.h_on_tape(&mut tape, &pv, cls_var);
        let h = tape.value(h_var).as_slice().to_vec();
        let cls_hidden = tape.value(cls_var).as_slice().to_vec();
        Ok(SampleForward { tape, params: pv, logits, h_var, distributions, h, cls_hidden, chain: builder.finish()? })
    }

    /// Parameter gradient given adjoints of each step's restricted logits and of `h`.
    pub fn backward_sample(&self, fwd: &SampleForward, d_logits: &[Vec<f64>], d_h: &[f64], like: &ParamSet) -> ParamSet {
        let mut seeds = Vec::with_capacity(CHAIN_LEN + 1);
        for (&lg, g) in fwd.logits.iter().zip(d_logits) {
            seeds.push((lg, Matrix::from_vec(1, g.len(), g.clone())));
        }
        seeds.push((fwd.h_var, Matrix::from_vec(1, d_h.len(), d_h.to_vec())));
        let grads = fwd.tape.backward(&seeds);
        let mut out = like.zeros_like();
        for (slot, v) in out.tensors_mut().iter_mut().zip(&fwd.params) {
            if let Some(g) = &grads[v.index()] {
                *slot = g.clone();
            }
        }
        out
    }

    /// Step target vocabularies this model predicts over.
    pub fn steps(&self) -> &StepVocabularies {
        &self.steps
    }
}

/// A reference encoder paired with a parameter set; implements [`ChainEncoder`].
#[derive(Debug, Clone, Copy)]
pub struct BoundReference<'a> {
    encoder: &'a ReferenceEncoder,
    params: &'a ParamSet,
}

impl ChainEncoder for BoundReference<'_> {
    fn step_vocabularies(&self) -> &StepVocabularies {
        &self.encoder.steps
    }

    fn templates(&self) -> &Templates {
        &self.encoder.templates
    }

    fn mask_token(&self) -> &str {
        self.encoder.vocab.mask_token()
    }

    fn encode_step(&self, text: &str, step: usize) -> Result<StepEncoding> {
        let mut tape = Tape::new();
        let pv = self.encoder.leaves(&mut tape, self.params);
        let (lg, cls) = self.encoder.encode_on_tape(&mut tape, &pv, text, step)?;
        let mut distribution = tape.value(lg).as_slice().to_vec();
        softmax_in_place(&mut distribution);
        Ok(StepEncoding { distribution, cls_hidden: tape.value(cls).as_slice().to_vec() })
    }

    fn representation(&self, cls_hidden: &[f64]) -> Result<Vec<f64>> {
        let e = self.encoder;
        let proj = (e.config.h_mode == HMode::Projection).then(|| &self.params.tensors()[e.head_index() + 2]);
        let mut h = cls_representation(cls_hidden, e.n_labels, e.config.h_mode, proj)?;
        if e.config.normalize_h {
            normalize(&mut h);
        }
        Ok(h)
    }

    fn cls_step_index(&self) -> usize {
        self.encoder.config.cls_step - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{decode_chain, encode_chain};
    use crate::prompt::build_chain;

    fn schema() -> LabelSchema {
        LabelSchema::new(vec![("joy", "joy"), ("anger", "anger"), ("sadness", "sadness")], None).unwrap()
    }

    fn encoder(h_mode: HMode) -> ReferenceEncoder {
        let s = schema();
        let t = Templates::default();
        let vocabulary = ReferenceEncoder::build_vocabulary(&s, TargetMode::Literal, &t, ["The food is so delicious!"]).unwrap();
        let config = EncoderConfig { hidden_dim: 8, ff_dim: 12, vocabulary, seed: 3, h_mode, ..Default::default() };
        ReferenceEncoder::new(config, &s, TargetMode::Literal, t).unwrap()
    }

    #[test]
    fn untrained_head_gives_uniform_steps() {
        let e = encoder(HMode::Slice);
        let p = e.init_params();
        let chain = build_chain("The food is so delicious!", &schema(), Some("joy"), TargetMode::Literal, &Templates::default()).unwrap();
        let out = encode_chain(&e.bind(&p).unwrap(), &chain).unwrap();
        for d in &out.step_label_distributions {
            assert_eq!(d.len(), 3);
            for v in d {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(out.h.len(), 3);
        assert!((crate::matrix::l2_norm(&out.h) - 1.0).abs() < 1e-12);
        let ce = crate::losses::prompt_ce(&out.step_label_distributions, &[0; 4]).unwrap();
        assert!((ce.value - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let e = encoder(HMode::Slice);
        let p = e.init_params();
        assert_eq!(p, e.init_params());
        let a = decode_chain(&e.bind(&p).unwrap(), "The food is so delicious!", FillPolicy::Predicted, None).unwrap();
        let b = decode_chain(&e.bind(&p).unwrap(), "The food is so delicious!", FillPolicy::Predicted, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_forward_matches_inference() {
        let e = encoder(HMode::Projection);
        let mut p = e.init_params();
        // give the head something to say
        for (k, v) in p.tensors_mut()[e.head_index()].as_mut_slice().iter_mut().enumerate() {
            *v = ((k * 13 % 7) as f64 - 3.0) * 0.1;
        }
        let f = e.forward_sample(&p, "The food is so delicious!", &[0, 1, 2, 0], FillPolicy::Gold).unwrap();
        let out = encode_chain(&e.bind(&p).unwrap(), &f.chain).unwrap();
        assert_eq!(out.step_label_distributions, f.distributions);
        assert_eq!(out.h, f.h);
        assert_eq!(f.chain.steps[1].text, "The food is so delicious! My first feeling is joy. Based on the first step, my second feeling is [MASK].");

        // the mask-position distribution equals the head applied to that hidden row
        let bound = e.bind(&p).unwrap();
        let enc = bound.encode_step(&f.chain.steps[0].text, 0).unwrap();
        assert_eq!(enc.distribution, f.distributions[0]);
    }

    #[test]
    fn sequence_limits() {
        let s = schema();
        let t = Templates::default();
        let vocabulary = ReferenceEncoder::build_vocabulary(&s, TargetMode::Literal, &t, ["word"]).unwrap();
        let config = EncoderConfig { hidden_dim: 4, ff_dim: 4, vocabulary, max_sequence_length: 256, ..Default::default() };
        let e = ReferenceEncoder::new(config, &s, TargetMode::Literal, t).unwrap();
        let p = e.init_params();
        let long = vec!["word"; 300].join(" ");
        let err = decode_chain(&e.bind(&p).unwrap(), &long, FillPolicy::Predicted, None).unwrap_err();
        assert!(matches!(err, EncoderError::SequenceTooLong { step: 0, limit: 256, .. }), "{err:?}");
        let b = e.bind(&p).unwrap();
        assert!(matches!(b.encode_step("no mask here", 0), Err(EncoderError::MaskNotFound(0))));
        assert!(matches!(b.encode_step("[MASK] and [MASK]", 0), Err(EncoderError::MultipleMasks { count: 2, .. })));
    }

    #[test]
    fn config_checks() {
        let s = schema();
        let config = EncoderConfig { hidden_dim: 2, vocabulary: vec!["[CLS]".into(), "[MASK]".into(), "[UNK]".into()], ..Default::default() };
        assert!(matches!(ReferenceEncoder::new(config, &s, TargetMode::Literal, Templates::default()), Err(EncoderError::BadConfig(_))));
        let config = EncoderConfig { hidden_dim: 8, vocabulary: vec!["[CLS]".into(), "[MASK]".into(), "[UNK]".into()], ..Default::default() };
        assert!(matches!(
            ReferenceEncoder::new(config, &s, TargetMode::Literal, Templates::default()),
            Err(EncoderError::UnknownVerbalizerToken { .. })
        ));
    }
}
