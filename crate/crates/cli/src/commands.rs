use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use scp_core::dataio::{self, DataError, Example, FewShotSplit, SplitArtifact};
use scp_core::encoder::{ParamSet, ReferenceEncoder};
use scp_core::evalviz::{self, figures, tsne, EvalError};
use scp_core::labels::{self, CorrelationMatrix, LabelError, LabelSchema, WeightMatrix};
use scp_core::prompt::Templates;
use scp_core::trainer::{self, checkpoint, CheckpointConfig, Resume, RunHistory, TrainError};
use scp_core::{seeds, Execution};

use crate::config::{ExperimentConfig, Needs};

pub const INPUT: u8 = 2;
pub const RUNTIME: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Result<T = ()> = std::result::Result<T, Failure>;

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: INPUT, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: RUNTIME, error: error.into() }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Json { .. } => runtime(e),
            _ => input(e),
        }
    }
}

impl From<LabelError> for Failure {
    fn from(e: LabelError) -> Self {
        input(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) | TrainError::Label(_) | TrainError::Setup(_) => input(e),
            _ => runtime(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Encoder { .. } | EvalError::Io { .. } => runtime(e),
            _ => input(e),
        }
    }
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let out = cfg.out.clone();
        fs::create_dir_all(&out).map_err(|e| runtime(anyhow!("{}: {e}", out.display())))?;
        Ok(Self { out })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An output of an earlier command; exit 2 when missing.
    fn existing(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.file(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(input(anyhow!("{}: not found (run `scp {producer}` first)", p.display())))
        }
    }
}

fn validate(cfg: &ExperimentConfig, needs: &[Needs]) -> Result<Paths> {
    cfg.validate(needs).map_err(input)?;
    let paths = Paths::new(cfg)?;
    write_seeds(cfg, &paths)?;
    Ok(paths)
}

/// Records the top-level seed and every derived sub-seed.
fn write_seeds(cfg: &ExperimentConfig, paths: &Paths) -> Result {
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "seed": cfg.seed,
        "split": seeds::derive(cfg.seed, "split"),
        "init": seeds::derive(cfg.seed, "init"),
        "shuffle": seeds::derive(cfg.seed, "shuffle"),
        "tsne": seeds::derive(cfg.seed, "tsne"),
    }))
    .expect("seeds serialize");
    text.push('\n');
    write(&paths.file("seeds.json"), text)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result {
    fs::write(path, contents).map_err(|e| runtime(anyhow!("{}: {e}", path.display())))
}

fn schema(cfg: &ExperimentConfig) -> Result<LabelSchema> {
    let mut schema = labels::load_schema(cfg.data.schema.as_ref().expect("validated"))?;
    if let Some(h) = &cfg.data.hierarchy {
        schema = schema.attach_hierarchy(labels::load_hierarchy(h)?)?;
    }
    Ok(schema)
}

fn pools(cfg: &ExperimentConfig, schema: &LabelSchema) -> Result<(Vec<Example>, Vec<Example>)> {
    let load = |p: &Option<PathBuf>| dataio::load_corpus(p.as_ref().expect("validated"), schema, cfg.data.multi_label);
    Ok((load(&cfg.data.train)?, load(&cfg.data.test)?))
}

fn load_split(cfg: &ExperimentConfig, paths: &Paths, schema: &LabelSchema) -> Result<FewShotSplit> {
    let artifact = SplitArtifact::load(paths.existing("split.json", "prepare")?)?;
    let (train_pool, test_pool) = pools(cfg, schema)?;
    Ok(artifact.resolve(&train_pool, &test_pool)?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result {
    let paths = validate(cfg, &[Needs::Corpus])?;
    let schema = schema(cfg)?;
    let (train_pool, test_pool) = pools(cfg, &schema)?;
    let split = dataio::sample_few_shot(&train_pool, &test_pool, cfg.k, cfg.seed, &schema, &cfg.split)?;
    let path = paths.file("split.json");
    split.save(&path)?;
    for (label, n) in split.train_counts(&schema) {
        println!("{label}\t{n}");
    }
    println!(
        "train {} / validation {} / test {} -> {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        path.display()
    );
    Ok(())
}

pub fn correlation(cfg: &ExperimentConfig) -> Result {
    let paths = validate(cfg, &[Needs::Ratings])?;
    let schema = schema(cfg)?;
    let rho = match &cfg.data.correlation {
        Some(p) => CorrelationMatrix::load(p, &schema)?,
        None => {
            let judgments = dataio::load_rater_judgments(cfg.data.judgments.as_ref().expect("validated"), &schema)?;
            let rho = labels::estimate_correlation(&judgments, &schema)?;
            rho.save(paths.file("correlation.csv"))?;
            let fig = figures::emit_heatmap(&rho, paths.file("heatmap.png"))?;
            println!("heatmap -> {}", fig.image.display());
            rho
        }
    };
    let weights = labels::correlation_to_weights(&rho, cfg.epsilon)?;
    let path = paths.file("weights.csv");
    weights.save(&path)?;
    println!("weights (epsilon {}) -> {}", cfg.epsilon, path.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result {
    let paths = validate(cfg, &[Needs::Corpus])?;
    let schema = schema(cfg)?;
    let split = load_split(cfg, &paths, &schema)?;
    let weights = WeightMatrix::load(paths.existing("weights.csv", "correlation")?, &schema, cfg.epsilon)?;
    let train_config = cfg.train_config();
    let encoder = trainer::build_encoder(&train_config, &split, &schema, &cfg.encoder, &Templates::default())?;

    let resume = match resume {
        None => None,
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(input(anyhow!("{}: checkpoint not found", ckpt.display())));
            }
            let (params, stored) = checkpoint::load_checkpoint(ckpt)?;
            let configured = CheckpointConfig {
                encoder: encoder.config().clone(),
                labels: schema.labels().to_vec(),
                target_mode: train_config.target_mode,
                train: train_config.clone(),
            };
            stored.ensure_compatible(&configured)?;
            let history_path = ckpt.with_file_name("history.json");
            let history = if history_path.exists() { RunHistory::load_json(&history_path)? } else { RunHistory::default() };
            Some(Resume { params, history })
        }
    };

    let outcome = trainer::train_with(&train_config, &split, &schema, &weights, encoder, resume)?;
    let ckpt = paths.file("model.ckpt");
    checkpoint::save_checkpoint(&outcome.params, &outcome.checkpoint_config(&schema, &train_config), &ckpt)?;
    let history = &outcome.history;
    history.save_json(paths.file("history.json"))?;
    write(&paths.file("steps.csv"), history.steps_csv())?;
    write(&paths.file("epochs.csv"), history.epochs_csv())?;

    if let Some(last) = history.epochs.last() {
        let loss = history.epoch_mean_loss(last.epoch).unwrap_or(f64::NAN);
        println!("{} steps, {} epochs, final epoch mean loss {loss:.4}", history.steps.len(), history.epochs.len());
        if let Some(last) = history.epochs.iter().rev().find_map(|e| e.validation.as_ref()) {
            println!("validation accuracy {:.4} macro-F1 {:.4}", last.accuracy, last.macro_f1);
        }
    }
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn load_model(paths: &Paths, schema: &LabelSchema, ckpt: Option<&Path>) -> Result<(ReferenceEncoder, ParamSet)> {
    let ckpt = match ckpt {
        Some(p) if p.exists() => p.to_owned(),
        Some(p) => return Err(input(anyhow!("{}: checkpoint not found", p.display()))),
        None => paths.existing("model.ckpt", "train")?,
    };
    let (params, stored) = checkpoint::load_checkpoint(&ckpt)?;
    if stored.labels != schema.labels() {
        return Err(runtime(TrainError::VersionMismatch(format!("{}: checkpoint labels differ from the schema", ckpt.display()))));
    }
    let encoder = ReferenceEncoder::new(stored.encoder, schema, stored.target_mode, Templates::default())
        .map_err(|e| runtime(anyhow!("{}: {e}", ckpt.display())))?;
    encoder.check_params(&params).map_err(|e| runtime(anyhow!("{}: {e}", ckpt.display())))?;
    Ok((encoder, params))
}

fn examples(cfg: &ExperimentConfig, paths: &Paths, schema: &LabelSchema, file: Option<&Path>) -> Result<Vec<Example>> {
    match file {
        Some(p) if !p.exists() => Err(input(anyhow!("{}: input file not found", p.display()))),
        Some(p) => Ok(dataio::load_corpus(p, schema, cfg.data.multi_label)?),
        None => Ok(load_split(cfg, paths, schema)?.test),
    }
}

pub fn eval(cfg: &ExperimentConfig, file: Option<&Path>, ckpt: Option<&Path>) -> Result {
    let needs: &[Needs] = if file.is_some() { &[] } else { &[Needs::Corpus] };
    let paths = validate(cfg, needs)?;
    let schema = schema(cfg)?;
    let examples = examples(cfg, &paths, &schema, file)?;
    let (encoder, params) = load_model(&paths, &schema, ckpt)?;
    let bound = encoder.bind(&params).map_err(runtime)?;
    let report = evalviz::evaluate(&examples, &bound, &schema, Execution::Parallel)?;
    let path = paths.file("report.json");
    report.save(&path)?;
    println!("n {} accuracy {:.4} macro-F1 {:.4} -> {}", report.n, report.accuracy, report.macro_f1, path.display());
    Ok(())
}

pub fn visualize(cfg: &ExperimentConfig, file: Option<&Path>, ckpt: Option<&Path>) -> Result {
    let needs: &[Needs] = if file.is_some() { &[] } else { &[Needs::Corpus] };
    let paths = validate(cfg, needs)?;
    let schema = schema(cfg)?;
    let examples = examples(cfg, &paths, &schema, file)?;
    let (encoder, params) = load_model(&paths, &schema, ckpt)?;
    let bound = encoder.bind(&params).map_err(runtime)?;
    let h = evalviz::embed(&examples, &bound, Execution::Parallel)?;
    let opts = tsne::TsneOptions {
        perplexity: cfg.visualize.perplexity,
        iterations: cfg.visualize.iterations,
        ..Default::default()
    };
    let points = tsne::project_2d_with(&h, cfg.seed, &opts)?;
    let labels: Vec<usize> = examples.iter().map(|e| schema.index_of(&e.label)).collect::<std::result::Result<_, _>>()?;
    let fig = figures::emit_scatter(&points, &labels, schema.labels(), paths.file("tsne.png"))?;
    println!("t-SNE of {} sentences -> {} (data {})", points.len(), fig.image.display(), fig.sidecar.display());
    Ok(())
}
