//! Log-likelihoods the training regimes operate on.

use crate::data::Dataset;
use crate::nn::{backprop_raw, NetworkArchitecture};
use crate::par;

/// A differentiable log-likelihood `log p(D | w)` over a flat parameter vector.
pub trait LogLikelihood: Sync {
    fn dim(&self) -> usize;

    fn n_data(&self) -> usize;

    /// Sum of per-example log-likelihoods over `rows` (every row when
    /// `None`). The gradient of that sum is added into `grad`.
    fn log_lik_grad(&self, w: &[f64], rows: Option<&[usize]>, grad: &mut [f64]) -> f64;
}

/// Rows per gradient chunk. Chunks are reduced in index order, so the
/// floating-point summation tree never depends on the thread count.
const CHUNK: usize = 256;

/// Bernoulli likelihood of a network's sigmoid output.
pub struct NetworkLikelihood<'a> {
    pub arch: &'a NetworkArchitecture,
    pub data: &'a Dataset,
}

impl<'a> NetworkLikelihood<'a> {
    pub fn new(arch: &'a NetworkArchitecture, data: &'a Dataset) -> Self {
        Self { arch, data }
    }

    fn chunk(&self, w: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        let mut ll = 0.0;
        for &i in rows {
            let (_, loss) = backprop_raw(
                self.arch,
                w,
                self.data.row(i),
                self.data.y[i],
                -1.0,
                Some(grad),
                None,
            );
            ll -= loss;
        }
        ll
    }
}

impl LogLikelihood for NetworkLikelihood<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn n_data(&self) -> usize {
        self.data.len()
    }

    fn log_lik_grad(&self, w: &[f64], rows: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..self.data.len()).collect();
                &all
            }
        };
        if rows.len() <= CHUNK {
            return self.chunk(w, rows, grad);
        }
        let chunks: Vec<&[usize]> = rows.chunks(CHUNK).collect();
        let partials = par::map_slice(&chunks, |_, c| {
            let mut g = vec![0.0; grad.len()];
            let ll = self.chunk(w, c, &mut g);
            (ll, g)
        });
        let mut ll = 0.0;
        for (l, g) in partials {
            ll += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        ll
    }
}

/// Observations `y_i ~ N(w, noise_std²)` of a single unknown mean `w`.
/// With a Gaussian prior the posterior is Gaussian in closed form, which
/// makes it the reference model for checking VI and HMC.
pub struct GaussianMean {
    pub observations: Vec<f64>,
    pub noise_std: f64,
}

impl LogLikelihood for GaussianMean {
    fn dim(&self) -> usize {
        1
    }

    fn n_data(&self) -> usize {
        self.observations.len()
    }

    fn log_lik_grad(&self, w: &[f64], rows: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        let var = self.noise_std * self.noise_std;
        let mut term = |y: f64| {
            let r = y - w[0];
            grad[0] += r / var;
            -0.5 * r * r / var
        };
        match rows {
            Some(rows) => rows.iter().map(|&i| term(self.observations[i])).sum(),
            None => self.observations.iter().map(|&y| term(y)).sum(),
        }
    }
}

/// No observations: the posterior equals the prior.
pub struct PriorOnly {
    pub dim: usize,
}

impl LogLikelihood for PriorOnly {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_data(&self) -> usize {
        0
    }

    fn log_lik_grad(&self, _w: &[f64], _rows: Option<&[usize]>, _grad: &mut [f64]) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize;
    use crate::nn::{bce_loss, forward_raw, init_weights, Activation};

    #[test]
    fn chunked_gradient_matches_serial_sum() {
        let data = synthesize(1000, 3, 1.0, 2).unwrap().dataset;
        let arch = NetworkArchitecture::new(4, vec![5], Activation::Tanh);
        let w = init_weights(&arch, 1);
        let model = NetworkLikelihood::new(&arch, &data);
        let mut g = vec![0.0; arch.param_count()];
        let ll = model.log_lik_grad(&w.values, None, &mut g);
        let expect: f64 = (0..data.len())
            .map(|i| -bce_loss(forward_raw(&arch, &w.values, data.row(i)), data.y[i]))
            .sum();
        assert!((ll - expect).abs() < 1e-9 * expect.abs());
        let g1 = par::with_jobs(1, || {
            let mut g = vec![0.0; arch.param_count()];
            model.log_lik_grad(&w.values, None, &mut g);
            g
        });
        let g4 = par::with_jobs(4, || {
            let mut g = vec![0.0; arch.param_count()];
            model.log_lik_grad(&w.values, None, &mut g);
            g
        });
        assert_eq!(g, g1);
        assert_eq!(g1, g4);
    }
}
