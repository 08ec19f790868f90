//! The run configuration file.
//!
//! A TOML document with one section per concern; every field has a default,
//! so an empty file (or no file) is a valid desk-scale run:
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//! registry = "data/registry.toml"   # optional, relative to this file
//!
//! [model]
//! d_model = 64
//!
//! [train]
//! steps = 2000
//! checkpoint_every = 500
//!
//! [mixture]
//! synthetic = 0.1
//!
//! [synthetic]
//! families = ["linear-trend", "sinusoid"]
//!
//! [[eval]]
//! dataset = "electricity"
//! history_len = 64
//! horizon = 16
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tsicf::contextgen::MixtureWeights;
use tsicf::eval::EvalTask;
use tsicf::model::ModelConfig;
use tsicf::synthetic::{Family, PoolConfig, SyntheticSpec, TaskParams};
use tsicf::train::TrainConfig;
use tsicf::Error;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset manifest of real series; resolved against the config's
    /// directory.
    pub registry: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mixture: MixtureWeights,
    pub synthetic: SyntheticConfig,
    pub eval: Vec<EvalTask>,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            registry: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mixture: MixtureWeights::default(),
            synthetic: SyntheticConfig::default(),
            eval: Vec::new(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Synthetic training pool and disambiguation suites.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub families: Vec<Family>,
    pub series_per_family: usize,
    pub series_len: usize,
    pub ranges: SyntheticSpec,
    pub tasks: TaskParams,
    pub tasks_per_kind: usize,
    /// In-context examples generated per task.
    pub task_examples: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let pool = PoolConfig::default();
        Self {
            families: pool.families,
            series_per_family: pool.series_per_family,
            series_len: pool.series_len,
            ranges: pool.ranges,
            tasks: TaskParams::default(),
            tasks_per_kind: 100,
            task_examples: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn pool(&self) -> PoolConfig {
        PoolConfig {
            families: self.families.clone(),
            series_per_family: self.series_per_family,
            series_len: self.series_len,
            ranges: self.ranges.clone(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ks: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            ks: vec![0, 1, 4, 8],
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file. Parse errors name the offending
    /// field path.
    pub fn load(path: &Path) -> tsicf::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(reg) = &cfg.registry {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.registry = Some(base.join(reg));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> tsicf::Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::Validation(format!("{origin}: {}", e.message())))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Validation(format!(
                "{origin}: field `{field}`: {}",
                e.into_inner().message()
            ))
        })
    }

    /// Checks every section; run before any heavy computation.
    pub fn validate(&self) -> tsicf::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mixture.validate()?;
        self.synthetic.ranges.validate()?;
        if self.synthetic.families.is_empty() {
            return Err(Error::Validation(
                "synthetic.families must not be empty".into(),
            ));
        }
        if self.synthetic.series_per_family == 0 || self.synthetic.series_len == 0 {
            return Err(Error::Validation(
                "synthetic.series_per_family and synthetic.series_len must be positive".into(),
            ));
        }
        self.synthetic.tasks.validate()?;
        for task in &self.eval {
            task.validate()?;
        }
        if let Some(reg) = &self.registry {
            if !reg.is_file() {
                return Err(Error::Validation(format!(
                    "registry manifest {} does not exist",
                    reg.display()
                )));
            }
        }
        Ok(())
    }
}
