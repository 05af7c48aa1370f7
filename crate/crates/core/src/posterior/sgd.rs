use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{LogLikelihood, NetworkLikelihood};
use super::optim::{Optimizer, Stepper};
use super::{InferenceKind, PosteriorEnsemble, Provenance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{init_weights, NetworkArchitecture, WeightVector};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 0.0,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fraction of rows a single weight vector classifies correctly.
pub fn accuracy(arch: &NetworkArchitecture, w: &WeightVector, data: &Dataset) -> f64 {
    let hits = data
        .rows()
        .zip(&data.y)
        .filter(|(x, &y)| (crate::nn::forward_raw(arch, &w.values, x) >= 0.0) == (y > 0.5))
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Minibatch maximum-likelihood training of one network.
pub fn train_sgd(
    arch: &NetworkArchitecture,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<PosteriorEnsemble> {
    arch.validate()?;
    cfg.validate()?;
    if data.n_features != arch.input_dim {
        return Err(Error::dim("dataset features", arch.input_dim, data.n_features));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut w = init_weights(arch, cfg.seed);
    let model = NetworkLikelihood::new(arch, data);
    let mut stepper = Stepper::new(cfg.optimizer, w.len());
    let mut rng = rng::stream(cfg.seed, &[0x56D]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; w.len()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let ll = model.log_lik_grad(&w.values, Some(batch), &mut grad);
            let scale = -1.0 / batch.len() as f64;
            for (g, p) in grad.iter_mut().zip(&w.values) {
                *g = *g * scale + cfg.weight_decay * p;
            }
            let loss = -ll / batch.len() as f64;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "loss diverged (value {loss}) at epoch {epoch}; lower the learning rate \
                     (currently {})",
                    cfg.learning_rate
                )));
            }
            epoch_loss += -ll;
            stepper.step(&mut w.values, &grad, cfg.learning_rate);
            if w.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "weights became non-finite at epoch {epoch}; lower the learning rate \
                     (currently {})",
                    cfg.learning_rate
                )));
            }
        }
        log::debug!("sgd epoch {epoch}: mean loss {:.5}", epoch_loss / data.len() as f64);
    }
    let acc = accuracy(arch, &w, data);
    PosteriorEnsemble::new(
        InferenceKind::Deterministic,
        arch.clone(),
        vec![w],
        Provenance {
            seeds: vec![cfg.seed],
            config: serde_json::to_value(cfg)?,
            train_accuracy: Some(acc),
            ..Default::default()
        },
    )
}

/// `n_members` independent SGD runs; member `i` uses seed `seed + i`.
pub fn train_deep_ensemble(
    arch: &NetworkArchitecture,
    data: &Dataset,
    cfg: &TrainConfig,
    n_members: usize,
    seed: u64,
) -> Result<PosteriorEnsemble> {
    if n_members == 0 {
        return Err(Error::Config("a deep ensemble needs at least one member".into()));
    }
    let seeds: Vec<u64> = (0..n_members as u64).map(|i| seed.wrapping_add(i)).collect();
    let members = par::map_slice(&seeds, |_, &s| {
        train_sgd(
            arch,
            data,
            &TrainConfig {
                seed: s,
                ..cfg.clone()
            },
        )
    });
    let mut samples = Vec::with_capacity(n_members);
    for m in members {
        samples.extend(m?.samples);
    }
    let mut ens = PosteriorEnsemble::new(
        InferenceKind::DeepEnsemble,
        arch.clone(),
        samples,
        Provenance {
            seeds,
            config: serde_json::to_value(cfg)?,
            ..Default::default()
        },
    )?;
    ens.provenance.train_accuracy = Some(ens.accuracy(data));
    Ok(ens)
}
