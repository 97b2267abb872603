//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Tolerances are fixed below.

mod common;

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use scp_core::dataio::{self, MultiLabelPolicy, SplitProtocol};
use scp_core::encoder::{EncoderConfig, ParamSet};
use scp_core::evalviz::metrics_from_labels;
use scp_core::labels::{self, WeightMatrix};
use scp_core::losses::{self, AnchorContext};
use scp_core::prompt::{build_chain, Templates, TargetMode};
use scp_core::trainer::{self, AnchorMemory, TrainConfig};
use scp_core::{seeds, Execution};

use common::*;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_BUDGET_SECS: f64 = 5.0;
const REDUCTION_TOL: f64 = 1e-9;
const HAND_VALUE_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_H_TOL: f64 = 1e-4;
const FD_ENCODER_TOL: f64 = 1e-3;
const CE_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const SMOKE_LOSS_RATIO: f64 = 0.5;
const SMOKE_MIN_ACCURACY: f64 = 0.6;
const SMOKE_BUDGET_SECS: f64 = 120.0;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ctx(inst: &Instance) -> AnchorContext {
    AnchorContext::new(inst.h.clone(), inst.y.clone()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for (k, inst) in instances(101, 100).iter().enumerate() {
        let got = losses::softcl(&ctx(inst), &inst.weights(), inst.tau).map_err(|e| e.to_string())?;
        let want = softcl_oracle(inst);
        let d = max_abs_diff(&got.per_anchor, &want).max((got.total - want.iter().sum::<f64>()).abs());
        ensure(d <= ORACLE_TOL, format!("instance {k}: deviation {d:e}"))?;
        worst = worst.max(d);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < ORACLE_BUDGET_SECS, format!("took {secs:.2}s"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}, {secs:.3}s"))
}

fn c2_reduction() -> Outcome {
    let mut worst = 0.0_f64;
    for (k, inst) in instances(101, 100).iter().enumerate() {
        let uniform = WeightMatrix::uniform(class_names(inst.classes()));
        let got = losses::softcl(&ctx(inst), &uniform, inst.tau).map_err(|e| e.to_string())?;
        let want = causal_supcon_reference(&inst.h, &inst.y, inst.tau);
        let d = max_abs_diff(&got.per_anchor, &want);
        ensure(d <= REDUCTION_TOL, format!("instance {k}: deviation {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn c3_hand_value() -> Outcome {
    let inst = Instance {
        h: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        y: vec![0, 1, 0],
        alpha: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        tau: 1.0,
    };
    let got = losses::softcl(&ctx(&inst), &inst.weights(), 1.0).map_err(|e| e.to_string())?;
    let expected = [0.0, 0.0, (1.0 + 2.0 / std::f64::consts::E).ln()];
    let d = max_abs_diff(&got.per_anchor, &expected);
    ensure(got.per_anchor.len() == 3 && d <= HAND_VALUE_TOL, format!("got {:?}", got.per_anchor))?;
    let o = max_abs_diff(&softcl_oracle(&inst), &expected);
    ensure(o <= 1e-9, format!("oracle disagrees by {o:e}"))?;
    Ok(format!("per_anchor {:?}", got.per_anchor))
}

fn c4_gradients() -> Outcome {
    let mut worst_h = 0.0_f64;
    let mut rng = seeds::rng(404);
    for k in 0..40 {
        let inst = random_instance(&mut rng);
        let n = inst.h.len();
        let dim = inst.h[0].len();
        let w = inst.weights();
        let ce: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let joint = |flat: &[f64]| {
            let h: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
            let c = AnchorContext::new(h, inst.y.clone()).unwrap();
            let s = losses::softcl(&c, &w, inst.tau).unwrap();
            losses::joint_loss(&ce, &s.per_anchor, s.contributing).unwrap().total
        };
        let g = losses::softcl_grad(&ctx(&inst), &w, inst.tau, 0, Execution::Sequential).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.grad.iter().flatten().map(|v| v / n as f64).collect();
        let flat: Vec<f64> = inst.h.iter().flatten().copied().collect();
        let numeric = central_differences(&flat, FD_STEP, joint);
        let r = relative_error(&analytic, &numeric);
        ensure(r <= FD_H_TOL, format!("H instance {k}: relative error {r:e}"))?;
        worst_h = worst_h.max(r);
    }

    let data = synthetic();
    let config = TrainConfig::default();
    let base = EncoderConfig { hidden_dim: 8, ff_dim: 8, layers: 1, ..Default::default() };
    let encoder = trainer::build_encoder(&config, &data.split, &data.schema, &base, &Templates::default())
        .map_err(|e| e.to_string())?;
    let mut params = encoder.init_params();
    let mut prng = seeds::rng(7);
    for t in params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += prng.gen_range(-0.05..0.05);
        }
    }
    let train = &data.split.train;
    let first = trainer::training_step(
        &encoder,
        &params,
        &train[0..4],
        &AnchorMemory::default(),
        &config,
        &data.weights,
        &data.schema,
        0,
    )
    .map_err(|e| e.to_string())?;
    let memory = first.memory;
    let batch = &train[4..8];
    let loss = |p: &ParamSet| {
        trainer::training_step(&encoder, p, batch, &memory, &config, &data.weights, &data.schema, 1)
            .unwrap()
            .breakdown
            .total
    };
    let grad = trainer::training_step(&encoder, &params, batch, &memory, &config, &data.weights, &data.schema, 1)
        .map_err(|e| e.to_string())?
        .grad;
    let total = params.num_scalars();
    let picks: Vec<usize> = (0..60).map(|_| prng.gen_range(0..total)).collect();
    let analytic: Vec<f64> = picks.iter().map(|&k| grad.scalar(k)).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&k| {
            let mut plus = params.clone();
            *plus.scalar_mut(k) += FD_STEP;
            let mut minus = params.clone();
            *minus.scalar_mut(k) -= FD_STEP;
            (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
        })
        .collect();
    let r = relative_error(&analytic, &numeric);
    ensure(r <= FD_ENCODER_TOL, format!("encoder relative error {r:e}"))?;
    Ok(format!("H max relative error {worst_h:.1e}, encoder {r:.1e}"))
}

fn c5_templates() -> Outcome {
    let schema = labels::load_schema(data_dir().join("goemotions_schema.csv")).map_err(|e| e.to_string())?;
    let chain = build_chain("The food is so delicious!", &schema, Some("joy"), TargetMode::Literal, &Templates::default())
        .map_err(|e| e.to_string())?;
    let expected = [
        "The food is so delicious! My first feeling is [MASK].",
        "The food is so delicious! My first feeling is joy. Based on the first step, my second feeling is [MASK].",
        "The food is so delicious! My first feeling is joy. Based on the first step, my second feeling is joy. \
         Based on the second step, my third feeling is [MASK].",
        "The food is so delicious! My first feeling is joy. Based on the first step, my second feeling is joy. \
         Based on the second step, my third feeling is joy. My final feeling is [MASK].",
    ];
    let texts = chain.texts();
    for (t, want) in expected.iter().enumerate() {
        ensure(texts[t].as_bytes() == want.as_bytes(), format!("step {}: {:?}", t + 1, texts[t]))?;
    }
    Ok("4 steps byte-identical".into())
}

fn c6_prompt_ce() -> Outcome {
    let uniform = vec![vec![1.0 / 28.0; 28]; 4];
    let u = losses::prompt_ce(&uniform, &[0, 3, 17, 27]).map_err(|e| e.to_string())?.value;
    let want = 4.0 * 28f64.ln();
    ensure((u - want).abs() <= CE_TOL, format!("uniform gives {u}"))?;
    let targets = [2, 0, 27, 9];
    let one_hot: Vec<Vec<f64>> = targets.iter().map(|&t| (0..28).map(|j| if j == t { 1.0 } else { 0.0 }).collect()).collect();
    let z = losses::prompt_ce(&one_hot, &targets).map_err(|e| e.to_string())?.value;
    ensure(z.abs() <= CE_TOL, format!("one-hot gives {z}"))?;
    let half = vec![vec![0.5, 0.25, 0.25]; 4];
    let h = losses::prompt_ce(&half, &[0; 4]).map_err(|e| e.to_string())?.value;
    ensure((h - 4.0 * 2f64.ln()).abs() <= CE_TOL, format!("p=0.5 gives {h}"))?;
    Ok(format!("uniform {u:.12}, one-hot {z}"))
}

fn c7_split_protocol() -> Outcome {
    let root = data_dir();
    let schema = labels::load_schema(root.join("goemotions_schema.csv")).map_err(|e| e.to_string())?;
    let load = |f: &str| {
        dataio::load_corpus(root.join("goemotions_fixture").join(f), &schema, MultiLabelPolicy::SingleOnly)
            .map_err(|e| e.to_string())
    };
    let (train_pool, test_pool) = (load("train.tsv")?, load("test.tsv")?);
    let protocol = SplitProtocol::default();
    let want_test = (0.05 * test_pool.len() as f64).floor() as usize;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for k in [1, 5, 10, 15, 20] {
        let a = dataio::sample_few_shot(&train_pool, &test_pool, k, 13, &schema, &protocol).map_err(|e| e.to_string())?;
        ensure(a.train.len() == 28 * k, format!("k={k}: train {}", a.train.len()))?;
        ensure(a.train_counts(&schema).iter().all(|(_, c)| *c == k), format!("k={k}: uneven classes"))?;
        ensure(a.validation.len() == 500, format!("k={k}: validation {}", a.validation.len()))?;
        ensure(a.test.len() == want_test, format!("k={k}: test {}", a.test.len()))?;
        let mut seen = HashSet::new();
        for e in a.train.iter().chain(&a.validation).chain(&a.test) {
            ensure(seen.insert(e.source_id.clone()), format!("k={k}: {} appears twice", e.source_id))?;
        }
        let b = dataio::sample_few_shot(&train_pool, &test_pool, k, 13, &schema, &protocol).map_err(|e| e.to_string())?;
        let (pa, pb) = (dir.path().join(format!("a{k}.json")), dir.path().join(format!("b{k}.json")));
        a.save(&pa).map_err(|e| e.to_string())?;
        b.save(&pb).map_err(|e| e.to_string())?;
        let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        ensure(ba == bb, format!("k={k}: artifacts differ"))?;
    }
    Ok(format!("k in {{1,5,10,15,20}}, validation 500, test {want_test}"))
}

fn c8_metrics() -> Outcome {
    let mut rng = seeds::rng(808);
    for case in 0..50 {
        let n = rng.gen_range(1..=30);
        let c = rng.gen_range(1..=6);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let names = class_names(c);
        let r = metrics_from_labels(&gold, &pred, &names).map_err(|e| e.to_string())?;
        let o = metric_oracle(&gold, &pred, c);
        ensure((r.accuracy - o.accuracy).abs() <= METRIC_TOL, format!("case {case}: accuracy"))?;
        ensure((r.macro_f1 - o.macro_f1).abs() <= METRIC_TOL, format!("case {case}: macro-F1"))?;
        for (k, want) in o.per_class.iter().enumerate() {
            let got = r.per_class_f1.get(&names[k]);
            let same = match (got, want) {
                (Some(g), Some(w)) => (g - w).abs() <= METRIC_TOL,
                (None, None) => true,
                _ => false,
            };
            ensure(same, format!("case {case}: class {k} F1 {got:?} vs {want:?}"))?;
        }
        for g in 0..c {
            for p in 0..c {
                let count = gold.iter().zip(&pred).filter(|(&a, &b)| a == g && b == p).count() as u64;
                ensure(r.confusion[g][p] == count, format!("case {case}: confusion[{g}][{p}]"))?;
            }
        }
    }
    let r = metrics_from_labels(&[0, 1, 1], &[0, 0, 1], &class_names(2)).map_err(|e| e.to_string())?;
    ensure((r.accuracy - 2.0 / 3.0).abs() <= METRIC_TOL, format!("hand case accuracy {}", r.accuracy))?;
    ensure((r.macro_f1 - 2.0 / 3.0).abs() <= METRIC_TOL, format!("hand case macro-F1 {}", r.macro_f1))?;
    Ok("50 random cases and the 2/3 hand case".into())
}

fn loss_ratio(run: &SmokeRun) -> f64 {
    let h = &run.outcome.history;
    let last = h.epochs.len() - 1;
    h.epoch_mean_loss(last).unwrap() / h.epoch_mean_loss(0).unwrap()
}

fn c9_smoke(run: &SmokeRun) -> Outcome {
    let steps = run.outcome.history.steps.len();
    ensure(steps == 200, format!("{steps} steps"))?;
    let ratio = loss_ratio(run);
    ensure(ratio <= SMOKE_LOSS_RATIO, format!("final/initial loss {ratio:.3}"))?;
    let acc = run.report.accuracy;
    ensure(acc >= SMOKE_MIN_ACCURACY, format!("test accuracy {acc:.3}"))?;
    ensure(run.seconds < SMOKE_BUDGET_SECS, format!("{:.1}s", run.seconds))?;
    ensure(run.report.n == 40, format!("evaluated {} examples", run.report.n))?;
    Ok(format!("loss ratio {ratio:.3}, test accuracy {acc:.3}, macro-F1 {:.3}, {:.1}s", run.report.macro_f1, run.seconds))
}

fn c10_determinism(first: &SmokeRun) -> Outcome {
    let second = smoke_run(Execution::Parallel);
    let (a, b) = (&first.outcome.history, &second.outcome.history);
    ensure(a.steps == b.steps, "loss histories differ")?;
    let seeds_a: Vec<u64> = a.epochs.iter().map(|e| e.shuffle_seed).collect();
    let seeds_b: Vec<u64> = b.epochs.iter().map(|e| e.shuffle_seed).collect();
    ensure(seeds_a == seeds_b, "shuffle seeds differ")?;
    ensure(first.report == second.report, "evaluation reports differ")?;
    ensure(first.report.to_json() == second.report.to_json(), "report JSON differs")?;
    ensure(first.outcome.params == second.outcome.params, "parameters differ")?;
    Ok(format!("{} identical steps, identical report", a.steps.len()))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match result {
        Ok(detail) => {
            println!("criterion {id:>2} PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {id:>2} FAIL  {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= run(1, "softcl matches the scalar oracle", c1_oracle_equivalence);
    ok &= run(2, "unit weights reduce to causal SupCon", c2_reduction);
    ok &= run(3, "three-sample hand value", c3_hand_value);
    ok &= run(4, "gradients match finite differences", c4_gradients);
    ok &= run(5, "chain templates are byte-exact", c5_templates);
    ok &= run(6, "prompt cross-entropy closed forms", c6_prompt_ce);
    ok &= run(7, "few-shot split protocol", c7_split_protocol);
    ok &= run(8, "metrics match the confusion-matrix oracle", c8_metrics);
    let smoke = panic::catch_unwind(|| smoke_run(Execution::Parallel));
    match &smoke {
        Ok(s) => {
            ok &= run(9, "end-to-end smoke run", || c9_smoke(s));
            ok &= run(10, "identical runs are identical", || c10_determinism(s));
        }
        Err(_) => {
            ok &= run(9, "end-to-end smoke run", || Err("training failed".into()));
            ok &= run(10, "identical runs are identical", || Err("training failed".into()));
        }
    }
    println!("criterion 11 documented only: full-scale results need a pretrained backbone (see README)");
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
