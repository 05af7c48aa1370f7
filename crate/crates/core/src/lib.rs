//! Individual-fairness auditing for small feed-forward binary classifiers.
//!
//! The crate trains multilayer perceptrons under four regimes (plain SGD,
//! mean-field variational inference, Hamiltonian Monte Carlo and deep
//! ensembles), then estimates their ε-δ individual fairness: a gradient
//! attack searches each ε-neighbourhood under a fairness similarity metric
//! for the largest change in the posterior predictive, and a
//! Chernoff-sized sample of individuals turns the local results into a
//! global estimate.
//!
//! Module map:
//!
//! * [`nn`]: architecture, flat weight vectors, forward pass, exact gradients.
//! * [`posterior`]: training regimes and the posterior predictive.
//! * [`similarity`]: weighted ℓp and Mahalanobis metrics, step scales, projection.
//! * [`attack`]: Fair-FGSM, Fair-PGD and a brute-force grid oracle.
//! * [`audit`]: Chernoff sizing, the empirical estimator and experiment sweeps.
//! * [`data`]: CSV ingestion, preprocessing, stratified splits, synthetic data.
//!
//! With the default `parallel` feature, per-sample and per-cell loops run on
//! rayon. Every reduction happens in a fixed order, so results do not depend
//! on the number of worker threads.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod audit;
pub mod data;
pub mod error;
pub mod nn;
pub mod par;
pub mod posterior;
pub mod rng;
pub mod similarity;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod test_support;
