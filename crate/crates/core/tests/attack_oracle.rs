//! Gradient attacks against exhaustive grid search on small trained nets.

use bayesfair::attack::{brute_force_oracle, fair_fgsm, fair_pgd, AttackConfig, AttackKind};
use bayesfair::data::synthesize;
use bayesfair::nn::{Activation, NetworkArchitecture};
use bayesfair::posterior::{train_sgd, TrainConfig};
use bayesfair::similarity::{fit_mahalanobis, fit_weighted_lp, MetricFitConfig};

#[test]
fn pgd_reaches_oracle_on_trained_two_input_nets() {
    let arch = NetworkArchitecture::new(2, vec![4], Activation::Relu);
    let cfg = AttackConfig {
        kind: AttackKind::FairPgd,
        eps: 0.1,
        pgd_steps: 50,
        ..Default::default()
    };
    // [pgd, oracle, fgsm] sums per metric family.
    let mut sums = [[0.0; 3]; 2];
    for net in 0..8u64 {
        let data = synthesize(400, 1, 1.0 + net as f64 * 0.5, net).unwrap().dataset;
        let train = TrainConfig {
            epochs: 60,
            seed: net,
            ..Default::default()
        };
        let ens = train_sgd(&arch, &data, &train).unwrap();
        let metrics = [
            fit_weighted_lp(&data, &MetricFitConfig::default()).unwrap(),
            fit_mahalanobis(&data).unwrap(),
        ];
        for (mi, m) in metrics.iter().enumerate() {
            for i in 0..10 {
                let x = data.row(i * 37 % data.len());
                let p = fair_pgd(&ens, m, x, &cfg).unwrap();
                let f = fair_fgsm(&ens, m, x, &cfg).unwrap();
                let o = brute_force_oracle(&ens, m, x, &cfg, 100).unwrap();
                assert!(p.local_delta >= f.local_delta);
                sums[mi][0] += p.local_delta;
                sums[mi][1] += o.local_delta;
                sums[mi][2] += f.local_delta;
            }
        }
    }
    for (mi, s) in sums.iter().enumerate() {
        let ratio = s[0] / s[1];
        eprintln!("metric {mi}: pgd/oracle {ratio:.4}, fgsm/oracle {:.4}", s[2] / s[1]);
        assert!(ratio >= 0.95, "metric {mi}: ratio {ratio}");
    }
}

#[test]
fn oracle_grid_respects_ball_and_box() {
    let arch = NetworkArchitecture::new(2, vec![4], Activation::Tanh);
    let data = synthesize(200, 1, 2.0, 1).unwrap().dataset;
    let ens = train_sgd(&arch, &data, &TrainConfig { epochs: 20, ..Default::default() }).unwrap();
    let m = fit_mahalanobis(&data).unwrap();
    let cfg = AttackConfig::default();
    for i in 0..20 {
        let o = brute_force_oracle(&ens, &m, data.row(i), &cfg, 41).unwrap();
        assert!(o.dist <= cfg.eps);
        assert!(o.x_adv.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(o.steps_used >= 1);
    }
}
