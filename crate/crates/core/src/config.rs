//! Declarative experiment files (TOML, strict schema).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SyntheticSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, MaternFamily, Periodic, Structure};
use crate::likelihoods::Likelihood;
use crate::model::ModelSpec;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Dataset tag used in metrics and output paths.
    pub name: String,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: PriorConfig,
    pub methods: Vec<ModelSpec>,
    #[serde(default)]
    pub training: TrainConfig,
}

fn one() -> usize {
    1
}

/// Synthetic data carry their own test set (`n_test ≥ 1`); CSV data are
/// split per replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub target: String,
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl CsvSource {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            target: self.target.clone(),
            features: self.features.clone(),
            delimiter: self.delimiter,
        }
    }
}

fn default_delimiter() -> char {
    ','
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    #[default]
    Gaussian,
    Probit,
}

/// Prior kernel and likelihood with initial hyperparameters; the input
/// dimension comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub family: MaternFamily,
    #[serde(default = "default_structure")]
    pub structure: Structure,
    #[serde(default = "unit")]
    pub lengthscale: f64,
    #[serde(default = "unit")]
    pub variance: f64,
    #[serde(default)]
    pub likelihood: LikelihoodKind,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
    #[serde(default)]
    pub periodic: Option<Periodic>,
}

fn default_structure() -> Structure {
    Structure::Additive
}

fn unit() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

fn default_quadrature() -> usize {
    20
}

impl PriorConfig {
    pub fn kernel(&self, dim: usize) -> Result<KernelSpec> {
        let structure = match (self.structure, dim) {
            (Structure::Additive, 1) | (Structure::OneDim, _) => Structure::OneDim,
            (s, _) => s,
        };
        KernelSpec::new(vec![self.family; dim], vec![self.lengthscale; dim], self.variance, structure, self.periodic)
    }

    pub fn likelihood(&self) -> Result<Likelihood> {
        match self.likelihood {
            LikelihoodKind::Gaussian => Likelihood::gaussian(self.noise_variance),
            LikelihoodKind::Probit => {
                let lik = Likelihood::Probit {
                    quadrature: self.quadrature,
                };
                lik.validate()?;
                Ok(lik)
            }
        }
    }
}

/// Qualifies config errors with `prefix` and turns other errors into config
/// errors on `prefix`.
fn with_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{prefix}.{field}"), reason),
        other => Error::config(prefix, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_else(|| "<file>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }

    /// Input dimension when it is known without reading data.
    fn known_dim(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => Some(spec.kernel.dim()),
            DatasetConfig::Csv(src) => src.features.as_ref().map(Vec::len),
        }
    }

    fn known_train_size(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => Some(spec.n_train),
            DatasetConfig::Csv(_) => None,
        }
    }

    /// Schema and cross-field checks. Reads nothing from disk except to
    /// confirm that a CSV path exists.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unknown schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be non-empty and contain no path separators"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => {
                spec.validate().map_err(|e| with_field("dataset", e))?;
                if spec.n_test == 0 {
                    return Err(Error::config("dataset.n_test", "synthetic experiments need a test set"));
                }
            }
            DatasetConfig::Csv(src) => {
                check_fraction(src.test_fraction)?;
                if !src.delimiter.is_ascii() {
                    return Err(Error::config("dataset.delimiter", "must be a single ASCII character"));
                }
                if !src.path.exists() {
                    return Err(Error::Data(format!("{}: file not found", src.path.display())));
                }
            }
        }
        let lik = self.model.likelihood().map_err(|e| with_field("model.likelihood", e))?;
        if let Some(d) = self.known_dim() {
            self.model.kernel(d).map_err(|e| with_field("model", e))?;
        }
        let n_train = self.known_train_size();
        self.training.validate(None).map_err(|e| with_field("training", e))?;
        for (i, m) in self.methods.iter().enumerate() {
            let field = |f: &str| format!("methods[{i}].{f}");
            m.validate().map_err(|e| with_field(&format!("methods[{i}]"), e))?;
            if m.method.uses_features() && self.model.structure == Structure::Ard {
                return Err(Error::config(
                    field("method"),
                    format!("{} needs Fourier features, which the ard structure does not have", m.method.name()),
                ));
            }
            if m.method.is_analytic() && lik.noise_variance().is_none() {
                return Err(Error::config(field("method"), format!("{} requires a Gaussian likelihood", m.method.name())));
            }
            if m.method.uses_features() && self.model.structure == Structure::HybridAdditive {
                let budget = if m.method.has_mean_basis() { m.n_beta } else { m.n_beta + m.n_gamma };
                if budget % 2 == 1 {
                    return Err(Error::config(field("n_beta"), "hybrid feature budget must be even"));
                }
            }
            if let Some(n) = n_train {
                if !m.method.is_analytic() && self.training.batch_size > n {
                    return Err(Error::config(
                        "training.batch_size",
                        format!("batch size {} exceeds training size {n}", self.training.batch_size),
                    ));
                }
                if m.n_beta + m.n_gamma > n {
                    return Err(Error::config(field("n_gamma"), format!("more basis locations than the {n} training points")));
                }
            }
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::config("dataset.test_fraction", format!("must lie in (0, 1), got {f}")))
    }
}
