//! Joint training of prompt cross-entropy and the weighted contrastive loss
//! on the reference encoder.
//!
//! Each step encodes a batch of teacher-forced (or greedily filled) chains,
//! scores the contrastive term of every batch sample against its
//! predecessors, and descends on `(1/n) Σ (ce_i + softcl_i)`. With the
//! default epoch-memory scope the predecessors include every sample consumed
//! earlier in the epoch; those stored vectors are constants for the gradient.

pub mod checkpoint;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Example, FewShotSplit};
use crate::encoder::{EncoderConfig, EncoderError, HMode, ParamSet, ReferenceEncoder};
use crate::evalviz::{self, EvalError, EvalReport};
use crate::labels::{LabelError, LabelSchema, WeightMatrix};
use crate::losses::{self, supcon, AnchorContext, LossBreakdown, LossError};
use crate::par::{self, Execution};
use crate::prompt::{step_targets, FillPolicy, PromptError, StepVocabularies, TargetMode, Templates, CHAIN_LEN};
use crate::seeds;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointConfig};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("step {step}, example `{id}`: {source}")]
    Encoder {
        step: usize,
        id: String,
        #[source]
        source: EncoderError,
    },
    #[error("step {step}: {source}")]
    Loss {
        step: usize,
        #[source]
        source: LossError,
    },
    #[error("example `{id}`: {source}")]
    Prompt {
        id: String,
        #[source]
        source: PromptError,
    },
    #[error("validation after epoch {epoch}: {source}")]
    Eval {
        epoch: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Setup(#[from] EncoderError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Which predecessors an anchor is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftclScope {
    /// In-batch predecessors only.
    Batch,
    /// Everything consumed earlier in the epoch, then in-batch predecessors.
    #[default]
    EpochMemory,
}

/// Contrastive term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Correlation-weighted loss using the supplied weight matrix.
    #[default]
    Soft,
    /// Plain causal supervised contrastive loss (weights ignored).
    CausalSupcon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_sequence_length: usize,
    pub tau: f64,
    pub epochs: usize,
    pub seed: u64,
    pub softcl_scope: SoftclScope,
    pub fill_policy: FillPolicy,
    pub target_mode: TargetMode,
    pub h_mode: HMode,
    pub normalize_h: bool,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    /// Oldest entries are dropped beyond this many; `None` is unlimited.
    pub memory_capacity: Option<usize>,
    /// Epochs without a validation macro-F1 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Hard cap on optimisation steps in one call.
    pub max_steps: Option<usize>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 4,
            max_sequence_length: 256,
            tau: 2.0,
            epochs: 20,
            seed: 0,
            softcl_scope: SoftclScope::EpochMemory,
            fill_policy: FillPolicy::Gold,
            target_mode: TargetMode::Literal,
            h_mode: HMode::Slice,
            normalize_h: true,
            optimizer: OptimizerKind::adam(),
            objective: Objective::Soft,
            memory_capacity: None,
            patience: 5,
            max_steps: None,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.memory_capacity == Some(0) {
            return bad("memory_capacity must be positive when set");
        }
        Ok(())
    }

    /// `base` with the fields this config owns (sequence limit, `h`
    /// extraction, seed) overridden.
    pub fn encoder_config(&self, base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            max_sequence_length: self.max_sequence_length,
            h_mode: self.h_mode,
            normalize_h: self.normalize_h,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub h: Vec<f64>,
    pub label: usize,
}

/// Representations seen earlier in the epoch, in consumption order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorMemory {
    entries: Vec<MemoryEntry>,
    capacity: Option<usize>,
}

impl AnchorMemory {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { entries: Vec::new(), capacity }
    }

    pub fn push(&mut self, h: Vec<f64>, label: usize) {
        self.entries.push(MemoryEntry { h, label });
        if let Some(cap) = self.capacity {
            if self.entries.len() > cap {
                let excess = self.entries.len() - cap;
                self.entries.drain(..excess);
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-step target indices for an example's gold label.
pub fn sample_targets(
    label: &str,
    schema: &LabelSchema,
    steps: &StepVocabularies,
    mode: TargetMode,
) -> std::result::Result<[usize; CHAIN_LEN], PromptError> {
    let names = step_targets(label, schema, mode)?;
    let mut out = [0; CHAIN_LEN];
    for (t, name) in names.iter().enumerate() {
        out[t] = steps.index_of(t, name).ok_or(PromptError::MissingHierarchy)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` with respect to the parameters.
    pub grad: ParamSet,
    /// Input memory with this batch's representations appended.
    pub memory: AnchorMemory,
    /// Target probabilities clamped inside the prompt cross-entropy.
    pub clamped: usize,
}

/// Loss and gradient of one batch. `step` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    encoder: &ReferenceEncoder,
    params: &ParamSet,
    batch: &[Example],
    memory: &AnchorMemory,
    config: &TrainConfig,
    weights: &WeightMatrix,
    schema: &LabelSchema,
    step: usize,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty batch".into()));
    }
    let exec = config.execution;
    let labels: Vec<usize> = batch.iter().map(|e| schema.index_of(&e.label)).collect::<Result<_, _>>()?;
    let targets: Vec<[usize; CHAIN_LEN]> = batch
        .iter()
        .map(|e| {
            sample_targets(&e.label, schema, encoder.steps(), config.target_mode)
                .map_err(|source| TrainError::Prompt { id: e.source_id.clone(), source })
        })
        .collect::<Result<_>>()?;
    let fwds = par::try_map_indexed(exec, batch, |b, e| {
        encoder
            .forward_sample(params, &e.text, &targets[b], config.fill_policy)
            .map_err(|source| TrainError::Encoder { step, id: e.source_id.clone(), source })
    })?;

    let loss_err = |source| TrainError::Loss { step, source };
    let mut ce = Vec::with_capacity(batch.len());
    let mut clamped = 0;
    for (f, t) in fwds.iter().zip(&targets) {
        let pc = losses::prompt_ce(&f.distributions, t).map_err(loss_err)?;
        clamped += pc.clamped;
        ce.push(pc.value);
    }

    let prefix: &[MemoryEntry] = match config.softcl_scope {
        SoftclScope::EpochMemory => memory.entries(),
        SoftclScope::Batch => &[],
    };
    let first = prefix.len();
    let mut h_all: Vec<Vec<f64>> = prefix.iter().map(|m| m.h.clone()).collect();
    let mut y_all: Vec<usize> = prefix.iter().map(|m| m.label).collect();
    h_all.extend(fwds.iter().map(|f| f.h.clone()));
    y_all.extend(&labels);
    let ctx = AnchorContext::new(h_all, y_all).map_err(loss_err)?;
    let contributing = (first..ctx.len()).filter(|&i| ctx.positives(i) > 0).count();
    let (per_anchor, grad_h) = match config.objective {
        Objective::Soft => {
            let g = losses::softcl_grad(&ctx, weights, config.tau, first, exec).map_err(loss_err)?;
            (g.output.per_anchor, g.grad)
        }
        Objective::CausalSupcon => {
            supcon::loss_and_grad(ctx.representations(), ctx.labels(), config.tau, first).map_err(loss_err)?
        }
    };
    let breakdown = losses::joint_loss(&ce, &per_anchor, contributing).map_err(loss_err)?;

    let inv_n = 1.0 / batch.len() as f64;
    let grads = par::map_indexed(exec, &fwds, |b, f| {
        let d_logits: Vec<Vec<f64>> = (0..CHAIN_LEN)
            .map(|t| losses::ce_logit_grad(&f.distributions[t], targets[b][t]).into_iter().map(|g| g * inv_n).collect())
            .collect();
        let d_h: Vec<f64> = grad_h[first + b].iter().map(|g| g * inv_n).collect();
        encoder.backward_sample(f, &d_logits, &d_h, params)
    });
    let mut grad = params.zeros_like();
    for g in &grads {
        grad.add_assign(g);
    }

    let mut memory = memory.clone();
    for (f, &y) in fwds.iter().zip(&labels) {
        memory.push(f.h.clone(), y);
    }
    Ok(StepOutput { breakdown, grad, memory, clamped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Seed of this epoch's shuffle.
    pub shuffle_seed: u64,
    pub seconds: f64,
    pub validation: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean step total over one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let totals: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.loss.total).collect();
        (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64)
    }

    /// `step,epoch,prompt_ce,softcl,total,n_contributing_anchors,clamped`
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,prompt_ce,softcl,total,n_contributing_anchors,clamped\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{},{}\n",
                s.step, s.epoch, s.loss.prompt_ce, s.loss.softcl, s.loss.total, s.loss.n_contributing_anchors, s.clamped
            ));
        }
        out
    }

    /// `epoch,shuffle_seed,seconds,val_accuracy,val_macro_f1`
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,shuffle_seed,seconds,val_accuracy,val_macro_f1\n");
        for e in &self.epochs {
            let (acc, f1) = e.validation.as_ref().map_or((String::new(), String::new()), |r| {
                (format!("{:?}", r.accuracy), format!("{:?}", r.macro_f1))
            });
            out.push_str(&format!("{},{},{:.3},{acc},{f1}\n", e.epoch, e.shuffle_seed, e.seconds));
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("history serializes");
        fs::write(path, text + "\n").map_err(|source| TrainError::Io { path: path.to_owned(), source })
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
        serde_json::from_str(&text).map_err(|e| TrainError::CorruptFile(format!("{}: {e}", path.display())))
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: ReferenceEncoder,
    pub params: ParamSet,
    pub history: RunHistory,
}

impl TrainOutcome {
    pub fn checkpoint_config(&self, schema: &LabelSchema, config: &TrainConfig) -> CheckpointConfig {
        CheckpointConfig {
            encoder: self.encoder.config().clone(),
            labels: schema.labels().to_vec(),
            target_mode: config.target_mode,
            train: config.clone(),
        }
    }
}

/// Continues from earlier parameters and history.
#[derive(Debug, Clone)]
pub struct Resume {
    pub params: ParamSet,
    pub history: RunHistory,
}

/// Builds the reference encoder for a run. An empty vocabulary in
/// `encoder_config` is filled from the training texts.
pub fn build_encoder(
    config: &TrainConfig,
    split: &FewShotSplit,
    schema: &LabelSchema,
    encoder_config: &EncoderConfig,
    templates: &Templates,
) -> Result<ReferenceEncoder> {
    let mut enc = config.encoder_config(encoder_config);
    if enc.vocabulary.is_empty() {
        enc.vocabulary = ReferenceEncoder::build_vocabulary(
            schema,
            config.target_mode,
            templates,
            split.train.iter().map(|e| e.text.as_str()),
        )?;
    }
    Ok(ReferenceEncoder::new(enc, schema, config.target_mode, templates.clone())?)
}

pub fn train(
    config: &TrainConfig,
    split: &FewShotSplit,
    schema: &LabelSchema,
    weights: &WeightMatrix,
    encoder_config: &EncoderConfig,
) -> Result<TrainOutcome> {
    let encoder = build_encoder(config, split, schema, encoder_config, &Templates::default())?;
    train_with(config, split, schema, weights, encoder, None)
}

/// Runs `config.epochs` epochs (fewer with early stopping or `max_steps`).
/// With a non-empty validation set the returned parameters are those of the
/// best validation macro-F1 epoch.
pub fn train_with(
    config: &TrainConfig,
    split: &FewShotSplit,
    schema: &LabelSchema,
    weights: &WeightMatrix,
    encoder: ReferenceEncoder,
    resume: Option<Resume>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if weights.labels() != schema.labels() {
        return Err(TrainError::BadConfig("weight matrix labels differ from the schema".into()));
    }
    if split.train.is_empty() && config.epochs > 0 {
        return Err(TrainError::BadConfig("training split is empty".into()));
    }
    let (mut params, mut history) = match resume {
        Some(r) => (r.params, r.history),
        None => (encoder.init_params(), RunHistory::default()),
    };
    encoder.check_params(&params)?;

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let first_epoch = history.epochs.len();
    let mut step = history.steps.len();
    let mut steps_run = 0;
    let mut best: Option<(f64, ParamSet)> = None;
    let mut since_best = 0;
    for epoch in first_epoch..first_epoch + config.epochs {
        if config.max_steps.is_some_and(|m| steps_run >= m) {
            break;
        }
        let started = Instant::now();
        let shuffle_seed = seeds::derive(seeds::derive(config.seed, "shuffle"), &format!("epoch-{epoch}"));
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut seeds::rng(shuffle_seed));
        let mut memory = AnchorMemory::new(config.memory_capacity);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps_run >= m) {
                break;
            }
            let batch: Vec<Example> = chunk.iter().map(|&i| split.train[i].clone()).collect();
            let out = training_step(&encoder, &params, &batch, &memory, config, weights, schema, step)?;
            optimizer.step(&mut params, &out.grad);
            memory = out.memory;
            history.steps.push(StepRecord { step, epoch, loss: out.breakdown, clamped: out.clamped });
            step += 1;
            steps_run += 1;
        }
        let validation = if split.validation.is_empty() {
            None
        } else {
            let bound = encoder.bind(&params)?;
            Some(
                evalviz::evaluate(&split.validation, &bound, schema, config.execution)
                    .map_err(|source| TrainError::Eval { epoch, source })?,
            )
        };
        let stop = match &validation {
            Some(report) => {
                if best.as_ref().is_none_or(|(f1, _)| report.macro_f1 > *f1) {
                    best = Some((report.macro_f1, params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                config.patience > 0 && since_best >= config.patience
            }
            None => false,
        };
        log::info!(
            "epoch {epoch}: mean loss {:.4}{}",
            history.epoch_mean_loss(epoch).unwrap_or(f64::NAN),
            validation.as_ref().map_or(String::new(), |r| format!(", validation macro-F1 {:.4}", r.macro_f1))
        );
        history.epochs.push(EpochRecord { epoch, shuffle_seed, seconds: started.elapsed().as_secs_f64(), validation });
        if stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    if let Some((_, best_params)) = best {
        params = best_params;
    }
    Ok(TrainOutcome { encoder, params, history })
}
