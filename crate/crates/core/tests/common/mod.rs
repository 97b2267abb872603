//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls into the loss or metric code under test; the oracles
//! are plain nested loops with a fixed summation order.

#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use scp_core::dataio::{self, Example, FewShotSplit, MultiLabelPolicy};
use scp_core::evalviz::{self, EvalReport};
use scp_core::labels::{self, LabelSchema, WeightMatrix};
use scp_core::matrix::Matrix;
use scp_core::seeds;
use scp_core::trainer::{self, TrainConfig, TrainOutcome};
use scp_core::{encoder::EncoderConfig, Execution};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// A random loss instance: representations, labels, weights and temperature.
#[derive(Debug, Clone)]
pub struct Instance {
    pub h: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
    pub tau: f64,
}

impl Instance {
    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn weights(&self) -> WeightMatrix {
        let c = self.classes();
        let flat = self.alpha.iter().flatten().copied().collect();
        WeightMatrix::from_matrix(class_names(c), Matrix::from_vec(c, c, flat), 0.05).unwrap()
    }
}

pub fn class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

/// n <= 8, dim <= 4, |C| <= 5, alpha in [0.05, 1], tau in {0.5, 1, 2}.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.gen_range(1..=8);
    let dim = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=5);
    let h = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let y = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mut alpha = vec![vec![1.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let v = rng.gen_range(0.05..=1.0);
            alpha[i][j] = v;
            alpha[j][i] = v;
        }
    }
    let tau = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
    Instance { h, y, alpha, tau }
}

pub fn instances(seed: u64, count: usize) -> Vec<Instance> {
    let mut rng = seeds::rng(seed);
    (0..count).map(|_| random_instance(&mut rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Weighted causal contrastive loss, scalar nested loops. Per anchor:
/// `-(1/|S|) ln( sum_{k in S} w_k e^{s_k} / sum_{j in A} w_j e^{s_j} )`
/// with `w = 1/alpha`.
pub fn softcl_oracle(inst: &Instance) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..inst.h.len() {
        let mut pos = 0usize;
        for j in 0..i {
            if inst.y[j] == inst.y[i] {
                pos += 1;
            }
        }
        if pos == 0 {
            out.push(0.0);
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..i {
            let term = (1.0 / inst.alpha[inst.y[i]][inst.y[j]]) * (dot(&inst.h[i], &inst.h[j]) / inst.tau).exp();
            den += term;
            if inst.y[j] == inst.y[i] {
                num += term;
            }
        }
        out.push(-(num / den).ln() / pos as f64);
    }
    out
}

/// Unweighted causal supervised contrastive loss written as a softmax over
/// predecessors followed by the positive probability mass.
pub fn causal_supcon_reference(h: &[Vec<f64>], y: &[usize], tau: f64) -> Vec<f64> {
    (0..h.len())
        .map(|i| {
            let logits: Vec<f64> = h[..i].iter().map(|hj| dot(&h[i], hj) / tau).collect();
            let n_pos = y[..i].iter().filter(|&&v| v == y[i]).count();
            if n_pos == 0 {
                return 0.0;
            }
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let mass: f64 = logits.iter().zip(&y[..i]).filter(|(_, &v)| v == y[i]).map(|(l, _)| (l - max).exp() / z).sum();
            -mass.ln() / n_pos as f64
        })
        .collect()
}

/// Accuracy, per-class F1 (present classes only, `None` otherwise) and
/// macro-F1 from an explicit confusion matrix.
pub struct MetricOracle {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub macro_f1: f64,
}

pub fn metric_oracle(gold: &[usize], pred: &[usize], c: usize) -> MetricOracle {
    let mut cm = vec![vec![0u64; c]; c];
    for (&g, &p) in gold.iter().zip(pred) {
        cm[g][p] += 1;
    }
    let correct: u64 = (0..c).map(|k| cm[k][k]).sum();
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    let mut present = 0;
    for k in 0..c {
        let tp = cm[k][k] as f64;
        let row: u64 = cm[k].iter().sum();
        let col: u64 = (0..c).map(|g| cm[g][k]).sum();
        if row + col == 0 {
            per_class.push(None);
            continue;
        }
        let precision = if col == 0 { 0.0 } else { tp / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp / row as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.push(Some(f1));
        sum += f1;
        present += 1;
    }
    MetricOracle { accuracy: correct as f64 / gold.len() as f64, per_class, macro_f1: sum / present as f64 }
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut plus = x.to_vec();
            plus[k] += step;
            let mut minus = x.to_vec();
            minus[k] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

pub struct Synthetic {
    pub schema: LabelSchema,
    pub split: FewShotSplit,
    pub weights: WeightMatrix,
}

/// The 4-class synthetic corpus: all train rows for training, all test rows
/// for testing, correlation weights at epsilon 0.05.
pub fn synthetic() -> Synthetic {
    let dir = data_dir().join("synthetic");
    let schema = labels::load_schema(dir.join("schema.csv")).unwrap();
    let train = dataio::load_corpus(dir.join("train.csv"), &schema, MultiLabelPolicy::SingleOnly).unwrap();
    let test = dataio::load_corpus(dir.join("test.csv"), &schema, MultiLabelPolicy::SingleOnly).unwrap();
    let judgments = dataio::load_rater_judgments(dir.join("judgments.csv"), &schema).unwrap();
    let rho = labels::estimate_correlation(&judgments, &schema).unwrap();
    let weights = labels::correlation_to_weights(&rho, 0.05).unwrap();
    let split = FewShotSplit { train, validation: Vec::<Example>::new(), test, k: 10, seed: 0 };
    Synthetic { schema, split, weights }
}

pub struct SmokeRun {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Smoke configuration: defaults with the learning rate scaled up 100x for
/// the tiny encoder. 40 examples at batch 4 for 20 epochs is 200 steps.
pub fn smoke_config(exec: Execution) -> TrainConfig {
    TrainConfig { learning_rate: 5e-3, execution: exec, ..TrainConfig::default() }
}

pub fn smoke_run(exec: Execution) -> SmokeRun {
    let data = synthetic();
    let config = smoke_config(exec);
    let started = Instant::now();
    let outcome = trainer::train(&config, &data.split, &data.schema, &data.weights, &EncoderConfig::default()).unwrap();
    let bound = outcome.encoder.bind(&outcome.params).unwrap();
    let report = evalviz::evaluate(&data.split.test, &bound, &data.schema, exec).unwrap();
    SmokeRun { outcome, report, seconds: started.elapsed().as_secs_f64() }
}
