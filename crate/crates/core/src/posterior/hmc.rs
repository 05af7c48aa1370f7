//! Hamiltonian Monte Carlo over network weights.
//!
//! Potential energy is the negative unnormalized log posterior
//! `-log p(D | w) + |w|² / (2 prior_std²)`, kinetic energy `|p|² / 2` with
//! an identity mass matrix. During burn-in the step size is tuned toward a
//! target acceptance probability by dual averaging, then frozen at the
//! averaged value.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{LogLikelihood, NetworkLikelihood};
use super::{InferenceKind, PosteriorEnsemble, Provenance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{init_weights, NetworkArchitecture, WeightVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    /// Initial step size; adapted during burn-in.
    pub step_size: f64,
    pub burn_in: usize,
    pub n_kept: usize,
    pub thinning: usize,
    pub prior_std: f64,
    pub seed: u64,
    pub target_accept: f64,
    /// Relative half-width of the uniform per-iteration step-size jitter.
    pub step_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            step_size: 0.01,
            burn_in: 500,
            n_kept: 50,
            thinning: 10,
            prior_std: 1.0,
            seed: 0,
            target_accept: 0.75,
            step_jitter: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 || self.n_kept == 0 || self.thinning == 0 {
            return Err(Error::Config(
                "HMC leapfrog_steps, n_kept and thinning must be positive".into(),
            ));
        }
        if !(self.step_size > 0.0) || !(self.prior_std > 0.0) {
            return Err(Error::Config("HMC step_size and prior_std must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("HMC target_accept must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Config("HMC step_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.n_kept * self.thinning
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcRun {
    pub samples: Vec<Vec<f64>>,
    /// Mean acceptance probability after burn-in.
    pub acceptance_rate: f64,
    /// Step size frozen at the end of burn-in.
    pub step_size: f64,
}

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

/// Potential energy and its gradient.
fn potential<L: LogLikelihood>(model: &L, w: &[f64], prior_std: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let ll = model.log_lik_grad(w, None, grad);
    let pv = prior_std * prior_std;
    let mut prior = 0.0;
    for (g, &x) in grad.iter_mut().zip(w) {
        *g = -*g + x / pv;
        prior += x * x;
    }
    -ll + 0.5 * prior / pv
}

/// Total energy `U(w) + |p|²/2`.
pub fn hamiltonian<L: LogLikelihood>(model: &L, w: &[f64], p: &[f64], prior_std: f64) -> f64 {
    let mut scratch = vec![0.0; w.len()];
    potential(model, w, prior_std, &mut scratch) + 0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// `steps` leapfrog steps of size `eps` from `(w, p)`.
pub fn leapfrog<L: LogLikelihood>(
    model: &L,
    w: &[f64],
    p: &[f64],
    eps: f64,
    steps: usize,
    prior_std: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let (w, p, _) = leapfrog_with(model, w.to_vec(), p.to_vec(), eps, steps, prior_std, &mut grad);
    (w, p)
}

/// Leapfrog using `grad` as scratch. Returns the end state and its potential.
fn leapfrog_with<L: LogLikelihood>(
    model: &L,
    mut w: Vec<f64>,
    mut p: Vec<f64>,
    eps: f64,
    steps: usize,
    prior_std: f64,
    grad: &mut [f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    potential(model, &w, prior_std, grad);
    let mut u = 0.0;
    for (pi, g) in p.iter_mut().zip(grad.iter()) {
        *pi -= 0.5 * eps * g;
    }
    for s in 0..steps {
        for (wi, pi) in w.iter_mut().zip(&p) {
            *wi += eps * pi;
        }
        u = potential(model, &w, prior_std, grad);
        let kick = if s + 1 == steps { 0.5 * eps } else { eps };
        for (pi, g) in p.iter_mut().zip(grad.iter()) {
            *pi -= kick * g;
        }
    }
    (w, p, u)
}

/// Runs a single chain on any log-likelihood with a Gaussian prior.
pub fn sample_hmc<L: LogLikelihood>(model: &L, init: Vec<f64>, cfg: &HmcConfig) -> Result<HmcRun> {
    cfg.validate()?;
    let d = model.dim();
    if init.len() != d {
        return Err(Error::dim("initial position", d, init.len()));
    }
    let mut rng = rng::stream(cfg.seed, &[0x4A3C]);
    let mut grad = vec![0.0; d];
    let mut w = init;
    let mut u = potential(model, &w, cfg.prior_std, &mut grad);
    if !u.is_finite() {
        return Err(Error::Training("initial HMC position has non-finite energy".into()));
    }
    let mut log_eps = cfg.step_size.ln();
    // Dual-averaging state (shrinkage point, running error, averaged iterate).
    let mu = (10.0 * cfg.step_size).ln();
    let mut h_bar = 0.0;
    let mut log_eps_bar = log_eps;
    let mut kept = Vec::with_capacity(cfg.n_kept);
    let mut accept_sum = 0.0;
    let mut accept_n = 0usize;

    for it in 0..cfg.total_iterations() {
        let p0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k0 = 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let jitter = 1.0 + cfg.step_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let eps = log_eps.exp() * jitter;
        let (w1, p1, u1) =
            leapfrog_with(model, w.clone(), p0, eps, cfg.leapfrog_steps, cfg.prior_std, &mut grad);
        let k1 = 0.5 * p1.iter().map(|v| v * v).sum::<f64>();
        let log_ratio = (u + k0) - (u1 + k1);
        let alpha = if log_ratio.is_finite() {
            log_ratio.min(0.0).exp()
        } else {
            0.0
        };
        if rng.random::<f64>() < alpha {
            w = w1;
            u = u1;
        }
        if it < cfg.burn_in {
            let m = (it + 1) as f64;
            let weight = 1.0 / (m + DA_T0);
            h_bar = (1.0 - weight) * h_bar + weight * (cfg.target_accept - alpha);
            log_eps = mu - m.sqrt() / DA_GAMMA * h_bar;
            let decay = m.powf(-DA_KAPPA);
            log_eps_bar = decay * log_eps + (1.0 - decay) * log_eps_bar;
            if it + 1 == cfg.burn_in {
                log_eps = log_eps_bar;
            }
        } else {
            accept_sum += alpha;
            accept_n += 1;
            if (it - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
                kept.push(w.clone());
            }
        }
    }
    let acceptance_rate = accept_sum / accept_n.max(1) as f64;
    let step_size = log_eps.exp();
    log::info!("hmc: acceptance {acceptance_rate:.3}, step size {step_size:.3e}");
    if !(0.2..=0.99).contains(&acceptance_rate) {
        return Err(Error::Training(format!(
            "HMC acceptance rate {acceptance_rate:.3} outside [0.2, 0.99] after adaptation \
             (step size {step_size:.3e}); adjust leapfrog_steps or burn_in"
        )));
    }
    if !(0.4..=0.95).contains(&acceptance_rate) {
        log::warn!("hmc: acceptance rate {acceptance_rate:.3} outside the [0.4, 0.95] band");
    }
    Ok(HmcRun {
        samples: kept,
        acceptance_rate,
        step_size,
    })
}

/// HMC chain started from `init_weights(arch, cfg.seed)`.
pub fn run_hmc(
    arch: &NetworkArchitecture,
    data: &Dataset,
    cfg: &HmcConfig,
) -> Result<PosteriorEnsemble> {
    run_hmc_from(arch, data, cfg, init_weights(arch, cfg.seed))
}

pub fn run_hmc_from(
    arch: &NetworkArchitecture,
    data: &Dataset,
    cfg: &HmcConfig,
    init: WeightVector,
) -> Result<PosteriorEnsemble> {
    arch.validate()?;
    init.check(arch)?;
    if data.n_features != arch.input_dim {
        return Err(Error::dim("dataset features", arch.input_dim, data.n_features));
    }
    let model = NetworkLikelihood::new(arch, data);
    let run = sample_hmc(&model, init.values, cfg)?;
    let samples = run
        .samples
        .into_iter()
        .map(|v| WeightVector::from_values(arch, v))
        .collect::<Result<Vec<_>>>()?;
    let k = samples.len();
    let mut ens = PosteriorEnsemble::new(
        InferenceKind::Hmc,
        arch.clone(),
        samples,
        Provenance {
            seeds: vec![cfg.seed; k],
            config: serde_json::to_value(cfg)?,
            acceptance_rate: Some(run.acceptance_rate),
            ..Default::default()
        },
    )?;
    ens.provenance.train_accuracy = Some(ens.accuracy(data));
    Ok(ens)
}
