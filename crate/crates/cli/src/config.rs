//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use bayesfair::attack::AttackConfig;
use bayesfair::audit::{fingerprint_value, AuditConfig, ChernoffParams, SamplingSource, SweepConfig};
use bayesfair::nn::{Activation, NetworkArchitecture};
use bayesfair::posterior::InferenceSpec;
use bayesfair::rng::derive_seed;
use bayesfair::similarity::{MetricFile, MetricFitConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic {
        n: usize,
        n_continuous: usize,
        bias_strength: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub train_fraction: f64,
    /// Cache preprocessed CSV datasets under `<output_dir>/cache`.
    pub cache: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                n: 2000,
                n_continuous: 4,
                bias_strength: 5.0,
            },
            train_fraction: 0.8,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    /// Explicit hidden widths; overrides `depth` and `width`.
    pub hidden_layers: Option<Vec<usize>>,
    pub inference: InferenceSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 16,
            activation: Activation::Relu,
            hidden_layers: None,
            inference: InferenceSpec::default(),
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, input_dim: usize) -> NetworkArchitecture {
        match &self.hidden_layers {
            Some(h) => NetworkArchitecture::new(input_dim, h.clone(), self.activation),
            None => NetworkArchitecture::uniform(input_dim, self.depth, self.width, self.activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub fit: MetricFitConfig,
    /// Use this metric instead of fitting one.
    pub literal: Option<MetricFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Test split, with replacement.
    #[default]
    Dataset,
    /// Uniform over `[0,1]^n`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub chernoff: ChernoffParams,
    pub source: SourceKind,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub points: usize,
    pub grid: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { points: 20, grid: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream is derived from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub metric: MetricSection,
    pub attack: AttackConfig,
    pub audit: AuditSection,
    pub sweep: SweepConfig,
    pub oracle: OracleSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            metric: MetricSection::default(),
            attack: AttackConfig::default(),
            audit: AuditSection::default(),
            sweep: SweepConfig::default(),
            oracle: OracleSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Seed-derivation paths, one per consumer.
pub mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const AUDIT: u64 = 4;
    pub const ANALYSIS: u64 = 5;
    pub const ORACLE: u64 = 6;
}

impl RunConfig {
    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Csv { path, schema } = &mut cfg.dataset.source {
            resolve(path);
            resolve(schema);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: bayesfair::Error| CliError::config(e.to_string());
        match &self.dataset.source {
            DataSource::Csv { path, schema } => {
                for p in [path, schema] {
                    if !p.is_file() {
                        return Err(CliError::config(format!("file not found: {}", p.display())));
                    }
                }
            }
            DataSource::Synthetic { n, n_continuous, bias_strength } => {
                if *n < 10 || *n_continuous == 0 || !bias_strength.is_finite() {
                    return Err(CliError::config(
                        "synthetic data needs n >= 10, n_continuous >= 1 and a finite bias",
                    ));
                }
            }
        }
        let f = self.dataset.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::config(format!("train_fraction {f} must lie in (0, 1)")));
        }
        let m = &self.model;
        if m.hidden_layers.is_none() && m.depth > 0 && m.width == 0 {
            return Err(CliError::config("model width must be positive"));
        }
        if let Some(h) = &m.hidden_layers {
            if h.contains(&0) {
                return Err(CliError::config("hidden layer widths must be positive"));
            }
        }
        m.inference.validate().map_err(cfg_err)?;
        self.attack.validate().map_err(cfg_err)?;
        self.audit_config().validate().map_err(cfg_err)?;
        if !(self.metric.fit.epsilon_floor > 0.0 && self.metric.fit.epsilon_floor <= 1.0) {
            return Err(CliError::config("metric epsilon_floor must lie in (0, 1]"));
        }
        if let Some(lit) = &self.metric.literal {
            lit.clone().into_metric().map_err(cfg_err)?;
        }
        self.sweep.validate().map_err(cfg_err)?;
        if self.oracle.points == 0 || self.oracle.grid < 2 {
            return Err(CliError::config("oracle needs points >= 1 and grid >= 2"));
        }
        Ok(())
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, &[stream])
    }

    pub fn audit_config(&self) -> AuditConfig {
        let seed = self.derived_seed(streams::AUDIT);
        AuditConfig {
            attack: self.attack.clone(),
            chernoff: self.audit.chernoff,
            source: match self.audit.source {
                SourceKind::Dataset => SamplingSource::DatasetEmpirical { seed },
                SourceKind::Uniform => SamplingSource::UniformBox { seed },
            },
            delta: self.audit.delta,
        }
    }

    /// Hash of the effective configuration with the output directory removed.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        fingerprint_value(&v)
    }
}
