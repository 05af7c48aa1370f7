//! Posterior representations and the posterior predictive.
//!
//! Every training regime ends in a [`PosteriorEnsemble`]: a finite set of
//! weight vectors standing in for `p(w | D)`. A deterministic network is
//! the one-sample case. The predictive `π(x)` and the expected input
//! gradient are plain averages over the samples, summed in sorted order so
//! they are exactly invariant under any reordering of the samples.

mod hmc;
mod model;
mod optim;
mod sgd;
mod vi;

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, backprop_raw, forward_raw, sigmoid, NetworkArchitecture, WeightVector};
use crate::rng;

pub use hmc::{hamiltonian, leapfrog, run_hmc, run_hmc_from, sample_hmc, HmcConfig, HmcRun};
pub use model::{GaussianMean, LogLikelihood, NetworkLikelihood, PriorOnly};
pub use optim::Optimizer;
pub use sgd::{accuracy, train_deep_ensemble, train_sgd, TrainConfig};
pub use vi::{fit_mean_field, sample_vi, train_vi, MeanField, VIPosterior, ViSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceKind {
    Deterministic,
    Vi,
    Hmc,
    DeepEnsemble,
}

impl InferenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceKind::Deterministic => "deterministic",
            InferenceKind::Vi => "vi",
            InferenceKind::Hmc => "hmc",
            InferenceKind::DeepEnsemble => "deep_ensemble",
        }
    }
}

impl std::fmt::Display for InferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How an ensemble was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// One seed per sample (member seeds, or the chain/sampling seed repeated).
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub kind: InferenceKind,
    pub arch: NetworkArchitecture,
    pub samples: Vec<WeightVector>,
    pub provenance: Provenance,
}

impl PosteriorEnsemble {
    pub fn new(
        kind: InferenceKind,
        arch: NetworkArchitecture,
        samples: Vec<WeightVector>,
        provenance: Provenance,
    ) -> Result<Self> {
        arch.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("an ensemble needs at least one sample".into()));
        }
        if kind == InferenceKind::Deterministic && samples.len() != 1 {
            return Err(Error::Config(format!(
                "deterministic ensemble must hold one sample, got {}",
                samples.len()
            )));
        }
        for s in &samples {
            s.check(&arch)?;
        }
        Ok(Self {
            kind,
            arch,
            samples,
            provenance,
        })
    }

    /// Single-sample deterministic ensemble.
    pub fn point(arch: NetworkArchitecture, w: WeightVector) -> Result<Self> {
        Self::new(InferenceKind::Deterministic, arch, vec![w], Provenance::default())
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::dim("input vector", self.arch.input_dim, x.len()));
        }
        Ok(())
    }

    /// Posterior predictive `π(x)`: mean sigmoid output over the samples.
    pub fn predictive(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.predictive_unchecked(x))
    }

    pub(crate) fn predictive_unchecked(&self, x: &[f64]) -> f64 {
        let mut probs: Vec<f64> = self
            .samples
            .iter()
            .map(|w| sigmoid(forward_raw(&self.arch, &w.values, x)))
            .collect();
        sorted_mean(&mut probs)
    }

    /// Mean over samples of the loss gradient with respect to the input.
    pub fn expected_input_gradient(&self, x: &[f64], y: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(self.expected_input_gradient_unchecked(x, y))
    }

    pub(crate) fn expected_input_gradient_unchecked(&self, x: &[f64], y: f64) -> Vec<f64> {
        let n = self.arch.input_dim;
        let grads: Vec<Vec<f64>> = self
            .samples
            .iter()
            .map(|w| {
                let mut g = vec![0.0; n];
                backprop_raw(&self.arch, &w.values, x, y, 1.0, None, Some(&mut g));
                g
            })
            .collect();
        if grads.len() == 1 {
            return grads.into_iter().next().expect("one sample");
        }
        let mut column = Vec::with_capacity(grads.len());
        (0..n)
            .map(|i| {
                column.clear();
                column.extend(grads.iter().map(|g| g[i]));
                sorted_mean(&mut column)
            })
            .collect()
    }

    /// `k` samples drawn without replacement.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<PosteriorEnsemble> {
        if k == 0 || k > self.k() {
            return Err(Error::Config(format!(
                "cannot draw {k} samples from an ensemble of {}",
                self.k()
            )));
        }
        let mut rng = rng::rng_from_seed(seed);
        let picked = index::sample(&mut rng, self.k(), k);
        let samples = picked.iter().map(|i| self.samples[i].clone()).collect();
        let seeds = if self.provenance.seeds.len() == self.k() {
            picked.iter().map(|i| self.provenance.seeds[i]).collect()
        } else {
            self.provenance.seeds.clone()
        };
        Ok(PosteriorEnsemble {
            kind: self.kind,
            arch: self.arch.clone(),
            samples,
            provenance: Provenance {
                seeds,
                ..self.provenance.clone()
            },
        })
    }

    /// Fraction of rows whose thresholded predictive matches the label.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data
            .rows()
            .zip(&data.y)
            .filter(|(x, &y)| (self.predictive_unchecked(x) >= 0.5) == (y > 0.5))
            .count();
        hits as f64 / data.len().max(1) as f64
    }

    /// Writes `ensemble.json` plus one `member_NNN.wts.{json,bin}` pair per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut members = Vec::with_capacity(self.k());
        for (i, w) in self.samples.iter().enumerate() {
            let name = format!("member_{i:03}");
            let seed = self.provenance.seeds.get(i).copied();
            nn::save_weights(&dir.join(&name), &self.arch, w, seed)?;
            members.push(name);
        }
        let manifest = Manifest {
            kind: self.kind,
            k: self.k(),
            architecture: self.arch.clone(),
            members,
            provenance: self.provenance.clone(),
        };
        let path = dir.join("ensemble.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ensemble.json");
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if manifest.members.len() != manifest.k {
            return Err(Error::Data(format!(
                "manifest lists {} members but k = {}",
                manifest.members.len(),
                manifest.k
            )));
        }
        let mut samples = Vec::with_capacity(manifest.k);
        for m in &manifest.members {
            let (arch, w, _) = nn::load_weights(&dir.join(m))?;
            if arch != manifest.architecture {
                return Err(Error::Data(format!("member {m} has a different architecture")));
            }
            samples.push(w);
        }
        Self::new(manifest.kind, manifest.architecture, samples, manifest.provenance)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: InferenceKind,
    k: usize,
    architecture: NetworkArchitecture,
    members: Vec<String>,
    provenance: Provenance,
}

/// Mean of `values` summed in ascending order.
fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Everything needed to produce an ensemble of a given kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSpec {
    pub kind: InferenceKind,
    pub train: TrainConfig,
    pub vi: ViSettings,
    pub hmc: HmcConfig,
    pub ensemble_members: usize,
    /// Start the HMC chain from an SGD fit using `train` rather than from
    /// the random initialization.
    pub hmc_warm_start: bool,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self {
            kind: InferenceKind::Deterministic,
            train: TrainConfig::default(),
            vi: ViSettings::default(),
            hmc: HmcConfig::default(),
            ensemble_members: 5,
            hmc_warm_start: true,
        }
    }
}

impl InferenceSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.vi.validate()?;
        self.hmc.validate()?;
        if self.ensemble_members == 0 {
            return Err(Error::Config("ensemble_members must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of samples the resulting ensemble will hold.
    pub fn ensemble_size(&self) -> usize {
        match self.kind {
            InferenceKind::Deterministic => 1,
            InferenceKind::Vi => self.vi.n_samples,
            InferenceKind::Hmc => self.hmc.n_kept,
            InferenceKind::DeepEnsemble => self.ensemble_members,
        }
    }
}

/// Trains an ensemble of `spec.kind` with every seed replaced by `seed`.
pub fn fit_posterior(
    arch: &NetworkArchitecture,
    data: &Dataset,
    spec: &InferenceSpec,
    seed: u64,
) -> Result<PosteriorEnsemble> {
    spec.validate()?;
    let train = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let mut ens = match spec.kind {
        InferenceKind::Deterministic => train_sgd(arch, data, &train)?,
        InferenceKind::DeepEnsemble => {
            train_deep_ensemble(arch, data, &train, spec.ensemble_members, seed)?
        }
        InferenceKind::Vi => {
            let settings = ViSettings {
                train: TrainConfig {
                    seed,
                    ..spec.vi.train.clone()
                },
                ..spec.vi.clone()
            };
            let post = train_vi(arch, data, &settings)?;
            let mut e = sample_vi(&post, settings.n_samples, rng::derive_seed(seed, &[0x5A]))?;
            e.provenance.config = serde_json::to_value(&settings)?;
            e.provenance.notes.push(
                "mean-field Gaussian VI with reparameterization gradients and analytic KL".into(),
            );
            e
        }
        InferenceKind::Hmc => {
            let cfg = HmcConfig {
                seed,
                ..spec.hmc.clone()
            };
            if spec.hmc_warm_start {
                let start = train_sgd(arch, data, &train)?;
                let init = start.samples.into_iter().next().expect("one sample");
                run_hmc_from(arch, data, &cfg, init)?
            } else {
                run_hmc(arch, data, &cfg)?
            }
        }
    };
    ens.provenance.dataset_fingerprint = Some(data.fingerprint());
    Ok(ens)
}
