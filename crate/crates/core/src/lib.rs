//! Few-shot emotion classification with a four-step chain-of-thought prompt
//! and a label-correlation-weighted contrastive objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`labels`]: label schema, verbalizer, Pearson correlation between labels and
//!   their conversion to contrastive weights.
//! - [`prompt`]: the append-only four-step prompt chain and mask filling.
//! - [`losses`]: per-step prompt cross-entropy, the weighted contrastive loss,
//!   the joint objective and their analytic gradients.
//! - [`encoder`]: masked-language-model abstraction, a small reference
//!   transformer that trains in seconds, and an adapter boundary for external
//!   backbones.
//! - [`dataio`]: corpus loading and the K-shot split protocol.
//! - [`trainer`]: the joint optimisation loop, anchor memory and checkpoints.
//! - [`evalviz`]: prediction, accuracy / macro-F1, t-SNE and figure emission.
//!
//! Data-parallel loops (batch encoding, evaluation, per-anchor loss terms) go
//! through [`par`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iterators otherwise. Results are always returned in input
//! order, so both builds produce bit-identical numbers.

pub mod autodiff;
pub mod dataio;
pub mod encoder;
pub mod evalviz;
pub mod labels;
pub mod losses;
pub mod matrix;
pub mod par;
pub mod prompt;
pub mod seeds;
pub mod trainer;

pub use labels::{CorrelationMatrix, LabelSchema, WeightMatrix};
pub use matrix::Matrix;
pub use par::Execution;
