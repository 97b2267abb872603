//! Experiment configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use scp_core::dataio::{MultiLabelPolicy, SplitProtocol};
use scp_core::encoder::{Backend, EncoderConfig};
use scp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_K: [usize; 5] = [1, 5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Top-level seed; every sub-seed is derived from it.
    pub seed: u64,
    pub k: usize,
    /// Permitted values of `k`.
    pub allowed_k: Vec<usize>,
    pub out: PathBuf,
    pub epsilon: f64,
    pub data: DataConfig,
    pub split: SplitProtocol,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub visualize: VisualizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 1,
            allowed_k: DEFAULT_K.to_vec(),
            out: PathBuf::from("out"),
            epsilon: 0.05,
            data: DataConfig::default(),
            split: SplitProtocol::default(),
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            visualize: VisualizeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub schema: Option<PathBuf>,
    /// Optional label -> basic/secondary/tertiary mapping.
    pub hierarchy: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub judgments: Option<PathBuf>,
    /// Precomputed correlation matrix; skips estimation when set.
    pub correlation: Option<PathBuf>,
    pub multi_label: MultiLabelPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self { perplexity: 5.0, iterations: 1000 }
    }
}

/// Which inputs a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Corpus,
    Ratings,
}

impl ExperimentConfig {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.out);
        let d = &mut cfg.data;
        for p in [&mut d.schema, &mut d.hierarchy, &mut d.train, &mut d.test, &mut d.judgments, &mut d.correlation]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    /// Checks values and that every input the command reads exists.
    pub fn validate(&self, needs: &[Needs]) -> anyhow::Result<()> {
        if !self.allowed_k.contains(&self.k) {
            bail!("k = {} is not one of {:?} (set allowed_k to permit it)", self.k, self.allowed_k);
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            bail!("epsilon must lie in (0, 1), got {}", self.epsilon);
        }
        if !(0.0..=1.0).contains(&self.split.test_fraction) {
            bail!("split.test_fraction must lie in [0, 1]");
        }
        if self.encoder.backend != Backend::Reference {
            bail!("only the reference encoder can be trained from the command line");
        }
        self.train.validate()?;
        let d = &self.data;
        let require = |p: &Option<PathBuf>, what: &str| -> anyhow::Result<()> {
            match p {
                None => bail!("data.{what} is not set"),
                Some(p) if !p.exists() => bail!("{}: {what} file not found", p.display()),
                Some(_) => Ok(()),
            }
        };
        require(&d.schema, "schema")?;
        if d.hierarchy.is_some() {
            require(&d.hierarchy, "hierarchy")?;
        }
        if needs.contains(&Needs::Corpus) {
            require(&d.train, "train")?;
            require(&d.test, "test")?;
        }
        if needs.contains(&Needs::Ratings) {
            if d.correlation.is_some() {
                require(&d.correlation, "correlation")?;
            } else {
                require(&d.judgments, "judgments")?;
            }
        }
        Ok(())
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}
