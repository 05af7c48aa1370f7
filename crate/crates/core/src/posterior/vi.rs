//! Mean-field Gaussian variational inference.
//!
//! `q(w) = N(mu, diag(softplus(rho)²))` is fitted by maximizing the ELBO
//! with reparameterization gradients for the expected log-likelihood and
//! the closed-form KL to the `N(0, prior_std²)` prior.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{LogLikelihood, NetworkLikelihood};
use super::optim::Stepper;
use super::{InferenceKind, PosteriorEnsemble, Provenance, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{init_weights, sigmoid, softplus, NetworkArchitecture, WeightVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViSettings {
    pub train: TrainConfig,
    pub prior_std: f64,
    /// Reparameterized draws averaged per gradient step.
    pub mc_samples: usize,
    /// Initial posterior standard deviation of every parameter.
    pub init_std: f64,
    /// Samples drawn from the fitted posterior to form the ensemble.
    pub n_samples: usize,
}

impl Default for ViSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            prior_std: 1.0,
            mc_samples: 1,
            init_std: 1e-2,
            n_samples: 50,
        }
    }
}

impl ViSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.prior_std > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("VI prior_std and init_std must be positive".into()));
        }
        if self.mc_samples == 0 || self.n_samples == 0 {
            return Err(Error::Config("VI mc_samples and n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Variational parameters of a mean-field Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    /// Per-epoch ELBO estimate (mean over minibatches).
    pub elbo_history: Vec<f64>,
}

impl MeanField {
    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VIPosterior {
    pub arch: NetworkArchitecture,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior_std: f64,
    pub elbo_history: Vec<f64>,
}

/// `softplus⁻¹(s) = log(e^s - 1)`.
fn inverse_softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

fn kl_to_prior(mu: &[f64], std: &[f64], prior_std: f64) -> f64 {
    let pv = prior_std * prior_std;
    mu.iter()
        .zip(std)
        .map(|(&m, &s)| (prior_std / s).ln() + (s * s + m * m) / (2.0 * pv) - 0.5)
        .sum()
}

/// Fits a mean-field Gaussian to `model` under a `N(0, prior_std²)` prior.
pub fn fit_mean_field<L: LogLikelihood>(
    model: &L,
    init_mu: Vec<f64>,
    cfg: &TrainConfig,
    prior_std: f64,
    mc_samples: usize,
    init_std: f64,
) -> Result<MeanField> {
    cfg.validate()?;
    let d = model.dim();
    if init_mu.len() != d {
        return Err(Error::dim("initial mean", d, init_mu.len()));
    }
    let n = model.n_data();
    let mut mu = init_mu;
    let mut rho = vec![inverse_softplus(init_std); d];
    let mut opt_mu = Stepper::new(cfg.optimizer, d);
    let mut opt_rho = Stepper::new(cfg.optimizer, d);
    let mut rng = rng::stream(cfg.seed, &[0x7F1]);
    let pv = prior_std * prior_std;

    let mut order: Vec<usize> = (0..n).collect();
    let batches = n.div_ceil(cfg.batch_size).max(1);
    let mut elbo_history = Vec::with_capacity(cfg.epochs);
    let mut zeta = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut g_w = vec![0.0; d];
    let mut g_mu = vec![0.0; d];
    let mut g_rho = vec![0.0; d];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        for b in 0..batches {
            let rows: Option<&[usize]> = if n == 0 {
                None
            } else {
                let lo = b * cfg.batch_size;
                Some(&order[lo..(lo + cfg.batch_size).min(n)])
            };
            let scale = match rows {
                Some(r) => n as f64 / r.len() as f64,
                None => 1.0,
            };
            let std: Vec<f64> = rho.iter().map(|&r| softplus(r)).collect();
            g_mu.iter_mut().for_each(|v| *v = 0.0);
            g_rho.iter_mut().for_each(|v| *v = 0.0);
            let mut ll_mean = 0.0;
            for _ in 0..mc_samples {
                for i in 0..d {
                    zeta[i] = StandardNormal.sample(&mut rng);
                    w[i] = mu[i] + std[i] * zeta[i];
                }
                g_w.iter_mut().for_each(|v| *v = 0.0);
                let ll = model.log_lik_grad(&w, rows, &mut g_w) * scale;
                ll_mean += ll / mc_samples as f64;
                // Negative ELBO gradient, likelihood part.
                for i in 0..d {
                    let g = -g_w[i] * scale / mc_samples as f64;
                    g_mu[i] += g;
                    g_rho[i] += g * zeta[i];
                }
            }
            let kl = kl_to_prior(&mu, &std, prior_std);
            let elbo = ll_mean - kl;
            if !elbo.is_finite() {
                return Err(Error::Training(format!(
                    "ELBO diverged at epoch {epoch}; lower the learning rate (currently {})",
                    cfg.learning_rate
                )));
            }
            elbo_sum += elbo;
            for i in 0..d {
                g_mu[i] += mu[i] / pv;
                let dstd = g_rho[i] - 1.0 / std[i] + std[i] / pv;
                g_rho[i] = dstd * sigmoid(rho[i]);
            }
            opt_mu.step(&mut mu, &g_mu, cfg.learning_rate);
            opt_rho.step(&mut rho, &g_rho, cfg.learning_rate);
        }
        elbo_history.push(elbo_sum / batches as f64);
    }
    Ok(MeanField {
        mu,
        rho,
        elbo_history,
    })
}

pub fn train_vi(
    arch: &NetworkArchitecture,
    data: &Dataset,
    settings: &ViSettings,
) -> Result<VIPosterior> {
    arch.validate()?;
    settings.validate()?;
    if data.n_features != arch.input_dim {
        return Err(Error::dim("dataset features", arch.input_dim, data.n_features));
    }
    let model = NetworkLikelihood::new(arch, data);
    let init = init_weights(arch, settings.train.seed).values;
    let fit = fit_mean_field(
        &model,
        init,
        &settings.train,
        settings.prior_std,
        settings.mc_samples,
        settings.init_std,
    )?;
    if let (Some(first), Some(last)) = (fit.elbo_history.first(), fit.elbo_history.last()) {
        log::info!("vi: ELBO {first:.3} -> {last:.3} over {} epochs", fit.elbo_history.len());
    }
    Ok(VIPosterior {
        arch: arch.clone(),
        mu: fit.mu,
        rho: fit.rho,
        prior_std: settings.prior_std,
        elbo_history: fit.elbo_history,
    })
}

/// `k` independent draws `mu + softplus(rho) ⊙ ζ`.
pub fn sample_vi(post: &VIPosterior, k: usize, seed: u64) -> Result<PosteriorEnsemble> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let std: Vec<f64> = post.rho.iter().map(|&r| softplus(r)).collect();
    let samples = (0..k as u64)
        .map(|j| {
            let mut rng = rng::stream(seed, &[j]);
            let values = post
                .mu
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                })
                .collect();
            WeightVector::from_values(&post.arch, values)
        })
        .collect::<Result<Vec<_>>>()?;
    PosteriorEnsemble::new(
        InferenceKind::Vi,
        post.arch.clone(),
        samples,
        Provenance {
            seeds: vec![seed; k],
            ..Default::default()
        },
    )
}
