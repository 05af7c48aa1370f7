//! Reverse-mode gradients against central differences computed here from
//! the forward pass and an independently written logistic loss.

use bayesfair::nn::{
    forward, grad_input, grad_params, init_weights, Activation, NetworkArchitecture, WeightVector,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(z: f64, y: f64) -> f64 {
    // -y log σ(z) - (1-y) log(1-σ(z)), written as log1p(exp(∓z)).
    let pos = if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
    let neg = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    y * pos + (1.0 - y) * neg
}

fn central<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Componentwise relative error with magnitudes below `floor` treated as `floor`.
fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

struct Case {
    arch: NetworkArchitecture,
    w: WeightVector,
    x: Vec<f64>,
    y: f64,
}

fn random_case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let depth = r.random_range(1..=4);
    let width = [8, 16, 32, 64][r.random_range(0..4)];
    let act = if r.random::<bool>() { Activation::Relu } else { Activation::Tanh };
    let n = r.random_range(2..=10);
    let arch = NetworkArchitecture::uniform(n, depth, width, act);
    let w = init_weights(&arch, seed ^ 0xABCD);
    let x = (0..n).map(|_| r.random::<f64>()).collect();
    let y = if r.random::<bool>() { 1.0 } else { 0.0 };
    Case { arch, w, x, y }
}

#[test]
fn hundred_random_cases_match_central_differences() {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let c = random_case(seed);
        let gp = grad_params(&c.arch, &c.w, &c.x, c.y).unwrap();
        let fd_p = central(
            |p| {
                let w = WeightVector::from_values(&c.arch, p.to_vec()).unwrap();
                loss(forward(&c.arch, &w, &c.x).unwrap(), c.y)
            },
            &c.w.values,
            h,
        );
        let gi = grad_input(&c.arch, &c.w, &c.x, c.y).unwrap();
        let fd_i = central(|x| loss(forward(&c.arch, &c.w, x).unwrap(), c.y), &c.x, h);
        let e = max_rel_err(&gp, &fd_p, 1e-3).max(max_rel_err(&gi, &fd_i, 1e-3));
        assert!(e <= 1e-4, "seed {seed}: relative error {e:e}");
        worst = worst.max(e);
    }
    eprintln!("worst relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn input_gradient_flips_with_label(seed in 0u64..10_000) {
        // ∂L/∂x = (σ(z) − y) ∂z/∂x, so g(y=1) − g(y=0) = −∂z/∂x for every input.
        let c = random_case(seed);
        let g1 = grad_input(&c.arch, &c.w, &c.x, 1.0).unwrap();
        let g0 = grad_input(&c.arch, &c.w, &c.x, 0.0).unwrap();
        let dz = central(|x| forward(&c.arch, &c.w, x).unwrap(), &c.x, 1e-6);
        for ((a, b), d) in g1.iter().zip(&g0).zip(&dz) {
            prop_assert!(((a - b) + d).abs() <= 1e-5 * d.abs().max(1e-2));
        }
    }
}
