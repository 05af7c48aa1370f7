//! Audit throughput on one thread versus the full rayon pool.
//!
//! Build with `--no-default-features` to measure the sequential fallback;
//! both variants then run on the calling thread.

use bayesfair::attack::{AttackConfig, AttackKind};
use bayesfair::audit::{audit_points, sample_inputs, AuditConfig, SamplingSource};
use bayesfair::nn::{init_weights, Activation, NetworkArchitecture};
use bayesfair::par;
use bayesfair::posterior::{InferenceKind, PosteriorEnsemble, Provenance};
use bayesfair::similarity::{LpExponent, SimilarityMetric};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn audit_bench(c: &mut Criterion) {
    let n = 8;
    let arch = NetworkArchitecture::uniform(n, 2, 16, Activation::Relu);
    let samples = (0..20).map(|s| init_weights(&arch, s)).collect();
    let ens =
        PosteriorEnsemble::new(InferenceKind::Hmc, arch, samples, Provenance::default()).unwrap();
    let metric = SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![1.0; n]).unwrap();
    let cfg = AuditConfig {
        attack: AttackConfig {
            kind: AttackKind::FairPgd,
            pgd_steps: 10,
            ..Default::default()
        },
        source: SamplingSource::UniformBox { seed: 1 },
        ..Default::default()
    };
    let sample = sample_inputs(&cfg.source, 400, None, n).unwrap();
    let threads = std::thread::available_parallelism().map_or(1, |v| v.get());

    let mut group = c.benchmark_group("audit_400_points_pgd10_k20");
    group.sample_size(10);
    for jobs in [1, threads] {
        group.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || audit_points(&ens, &metric, &cfg, &sample).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, audit_bench);
criterion_main!(benches);
