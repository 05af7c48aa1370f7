//! Subcommand implementations.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use bayesfair::attack::{
    brute_force_oracle, fair_pgd, write_sidecar, AttackKind, AttackSidecar, ORACLE_MAX_DIM,
};
use bayesfair::audit::{
    ensemble_fingerprint, estimate_delta_star, fingerprint_value, heatmaps, mean_std,
    posterior_sample_analysis, sample_inputs, sweep_architectures, sweep_epsilon,
    write_curve_csv, write_matrix_csv, CurveSeries, SweepContext,
};
use bayesfair::data::{load_csv, split, split_and_preprocess, synthesize, Dataset, DatasetSchema};
use bayesfair::posterior::{fit_posterior, InferenceSpec, PosteriorEnsemble};
use bayesfair::similarity::{fit_metric, SimilarityMetric};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{streams, DataSource, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let out = cfg.output_dir.clone();
        Ok(Self { cfg, hash, out })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        Ok(d)
    }

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let ds = &self.cfg.dataset;
        let split_seed = self.cfg.derived_seed(streams::SPLIT);
        match &ds.source {
            DataSource::Synthetic { n, n_continuous, bias_strength } => {
                let syn = synthesize(
                    *n,
                    *n_continuous,
                    *bias_strength,
                    self.cfg.derived_seed(streams::SYNTHETIC),
                )?;
                Ok(split(&syn.dataset, ds.train_fraction, split_seed)?)
            }
            DataSource::Csv { path, schema } => {
                let csv_bytes = fs::read(path).map_err(|e| io_err(path, e))?;
                let schema_bytes = fs::read(schema).map_err(|e| io_err(schema, e))?;
                let mut h = Sha256::new();
                h.update(&csv_bytes);
                h.update(&schema_bytes);
                h.update(ds.train_fraction.to_le_bytes());
                h.update(split_seed.to_le_bytes());
                let key = hex::encode(h.finalize());
                let cache = self.out.join("cache");
                if ds.cache {
                    let train = Dataset::load_cache(&cache, &format!("{key}-train"))?;
                    let test = Dataset::load_cache(&cache, &format!("{key}-test"))?;
                    if let (Some(train), Some(test)) = (train, test) {
                        log::info!("using cached dataset {key}");
                        return Ok((train, test));
                    }
                }
                let schema = DatasetSchema::from_json_file(schema)?;
                let raw = load_csv(path, &schema)?;
                if raw.dropped > 0 {
                    log::warn!("dropped {} rows with missing values", raw.dropped);
                }
                let (_, train, test) = split_and_preprocess(&raw, ds.train_fraction, split_seed)?;
                if ds.cache {
                    train.save_cache(&cache, &format!("{key}-train"))?;
                    test.save_cache(&cache, &format!("{key}-test"))?;
                }
                Ok((train, test))
            }
        }
    }

    fn metric(&self, train: &Dataset) -> Result<SimilarityMetric> {
        let m = match &self.cfg.metric.literal {
            Some(lit) => lit.clone().into_metric()?,
            None => fit_metric(train, &self.cfg.metric.fit)?,
        };
        if m.dim() != train.n_features {
            return Err(CliError::config(format!(
                "metric has dimension {}, dataset has {} features",
                m.dim(),
                train.n_features
            )));
        }
        Ok(m)
    }

    fn ensemble_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map_or_else(|| self.out.join("ensemble"), Path::to_path_buf)
    }

    fn load_ensemble(&self, explicit: Option<&Path>, data: &Dataset) -> Result<PosteriorEnsemble> {
        let dir = self.ensemble_dir(explicit);
        if !dir.join("ensemble.json").is_file() {
            return Err(CliError::data(format!(
                "no ensemble at {}; run `train` first or pass --ensemble",
                dir.display()
            )));
        }
        let ens = PosteriorEnsemble::load(&dir)?;
        if ens.input_dim() != data.n_features {
            return Err(CliError::config(format!(
                "ensemble expects {} inputs, dataset has {} features",
                ens.input_dim(),
                data.n_features
            )));
        }
        Ok(ens)
    }

    fn write_json(&self, path: &Path, mut value: serde_json::Value) -> Result<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("config_hash".into(), self.hash.clone().into());
        }
        let text = serde_json::to_string_pretty(&value).map_err(bayesfair::Error::from)?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    fn stamp_csv(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
        writeln!(f, "# config_hash={}", self.hash).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("i/o error on {}: {e}", path.display()))
}

fn train_ensemble(run: &Run, train: &Dataset, spec: &InferenceSpec, seed: u64) -> Result<PosteriorEnsemble> {
    let arch = run.cfg.model.architecture(train.n_features);
    Ok(fit_posterior(&arch, train, spec, seed)?)
}

pub fn train(run: &Run) -> Result<()> {
    let (train, test) = run.load_data()?;
    let seed = run.cfg.derived_seed(streams::TRAIN);
    let mut ens = train_ensemble(run, &train, &run.cfg.model.inference, seed)?;
    ens.provenance.notes.push(format!("config_hash={}", run.hash));
    let dir = run.ensemble_dir(None);
    ens.save(&dir)?;
    let fingerprint = ensemble_fingerprint(&ens);
    let test_acc = ens.accuracy(&test);
    run.write_json(
        &dir.join("run.json"),
        json!({
            "kind": ens.kind,
            "k": ens.k(),
            "seeds": ens.provenance.seeds,
            "architecture": ens.arch,
            "ensemble_fingerprint": fingerprint,
            "train_accuracy": ens.provenance.train_accuracy,
            "test_accuracy": test_acc,
            "acceptance_rate": ens.provenance.acceptance_rate,
        }),
    )?;
    println!("kind: {}", ens.kind);
    println!("k: {}", ens.k());
    println!("seeds: {:?}", dedup(&ens.provenance.seeds));
    if let Some(a) = ens.provenance.train_accuracy {
        println!("train_accuracy: {a:.4}");
    }
    println!("test_accuracy: {test_acc:.4}");
    if let Some(a) = ens.provenance.acceptance_rate {
        println!("acceptance_rate: {a:.4}");
    }
    println!("fingerprint: {fingerprint}");
    println!("saved: {}", dir.display());
    Ok(())
}

fn dedup(seeds: &[u64]) -> Vec<u64> {
    let mut v = seeds.to_vec();
    v.dedup();
    v
}

pub fn fit_metric_cmd(run: &Run) -> Result<()> {
    let (train, _) = run.load_data()?;
    let metric = run.metric(&train)?;
    let path = run.out.join("metric.json");
    fs::create_dir_all(&run.out).map_err(|e| io_err(&run.out, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&metric.to_json()?).map_err(bayesfair::Error::from)?;
    run.write_json(&path, value)?;
    match &metric {
        SimilarityMetric::WeightedLp { p, theta } => {
            println!("weighted_lp p={p}");
            for (name, t) in train.feature_names.iter().zip(theta) {
                println!("  theta[{name}] = {t:.6}");
            }
        }
        SimilarityMetric::Mahalanobis(m) => {
            println!("mahalanobis");
            for (name, s) in train.feature_names.iter().zip(m.diag()) {
                println!("  S[{name},{name}] = {s:.6e}");
            }
        }
    }
    println!("saved: {}", path.display());
    Ok(())
}

pub fn audit(run: &Run, ensemble: Option<&Path>, delta: Option<f64>) -> Result<()> {
    let mut audit_cfg = run.cfg.audit_config();
    if delta.is_some() {
        audit_cfg.delta = delta;
        audit_cfg.validate()?;
    }
    let (train, test) = run.load_data()?;
    let metric = run.metric(&train)?;
    let ens = run.load_ensemble(ensemble, &test)?;
    let mut report = estimate_delta_star(&ens, &metric, &audit_cfg, Some(&test))?;
    report.run_config_hash = Some(run.hash.clone());
    let dir = run.subdir("audit")?;
    let (json_path, csv_path) = report.save(&dir, "report")?;
    run.stamp_csv(&csv_path)?;
    write_sidecar(
        &dir.join("attacks.json"),
        &AttackSidecar {
            config: audit_cfg.attack.clone(),
            seeds: vec![audit_cfg.source.seed()],
            n_points: report.n_samples,
            metric_kind: metric.kind_name().into(),
        },
    )?;
    println!("delta_star_hat: {}", report.delta_star_hat);
    println!("n_samples: {}", report.n_samples);
    println!("theta_c: {}", report.chernoff.theta_c);
    println!("gamma: {}", report.chernoff.gamma);
    if let (Some(d), Some(p)) = (report.delta, report.p_hat) {
        println!("p_hat(delta={d}): {p}");
    }
    println!("guarantee: {}", report.guarantee);
    println!("saved: {}", json_path.display());
    Ok(())
}

pub fn sweep(run: &Run) -> Result<()> {
    let (train, test) = run.load_data()?;
    let metric = run.metric(&train)?;
    let audit_cfg = run.cfg.audit_config();
    let sweep = &run.cfg.sweep;
    let dir = run.subdir("sweep")?;
    let cells_dir = dir.join("cells");

    let ctx = SweepContext {
        sweep,
        spec: &run.cfg.model.inference,
        train: &train,
        test: &test,
        metric: &metric,
        audit: &audit_cfg,
    };
    let outcomes = sweep_architectures(&ctx, Some(&cells_dir))?;
    for h in heatmaps(sweep, &outcomes) {
        let base = format!("heatmap_{}", h.kind);
        let p = dir.join(format!("{base}.csv"));
        write_matrix_csv(&p, &h.depths, &h.widths, &h.mean, Some(&run.hash))?;
        write_matrix_csv(&dir.join(format!("{base}_std.csv")), &h.depths, &h.widths, &h.std, Some(&run.hash))?;
        println!("heatmap {}: {}", h.kind, p.display());
    }
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failed > 0 {
        println!("invalid cells: {failed}");
    }
    run.write_json(&dir.join("cells.json"), json!({ "cells": outcomes }))?;

    // ε curve for the configured architecture, one chain per (kind, seed).
    let mut series = Vec::new();
    for &kind in &sweep.inference_kinds {
        let spec = InferenceSpec { kind, ..run.cfg.model.inference.clone() };
        let mut per_seed: Vec<Vec<f64>> = Vec::new();
        for &seed in &sweep.seeds {
            let key = fingerprint_value(&json!({
                "curve": "epsilon",
                "kind": kind,
                "seed": seed,
                "model": run.cfg.model.architecture(train.n_features),
                "spec": spec,
                "audit": audit_cfg,
                "eps": sweep.eps_list,
                "metric": metric.to_json()?,
                "train": train.fingerprint(),
                "test": test.fingerprint(),
            }));
            let cell = cells_dir.join(format!("eps_{key}.json"));
            if cell.is_file() {
                let s = fs::read_to_string(&cell).map_err(|e| io_err(&cell, e))?;
                per_seed.push(serde_json::from_str(&s).map_err(bayesfair::Error::from)?);
                continue;
            }
            let values = match train_ensemble(run, &train, &spec, seed) {
                Ok(ens) => sweep_epsilon(&ens, &metric, &audit_cfg, &sweep.eps_list, Some(&test))?,
                Err(e) if e.code == crate::error::EXIT_TRAINING => {
                    log::warn!("epsilon curve {kind} seed {seed}: {e}");
                    vec![f64::NAN; sweep.eps_list.len()]
                }
                Err(e) => return Err(e),
            };
            let text = serde_json::to_string(&values).map_err(bayesfair::Error::from)?;
            fs::write(&cell, text).map_err(|e| io_err(&cell, e))?;
            per_seed.push(values);
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for i in 0..sweep.eps_list.len() {
            let vals: Vec<f64> = per_seed.iter().map(|v| v[i]).filter(|v| !v.is_nan()).collect();
            let (m, s) = mean_std(&vals);
            mean.push(m);
            std.push(s);
        }
        series.push(CurveSeries { label: kind.to_string(), mean, std });
    }
    let p = dir.join("curve_epsilon.csv");
    write_curve_csv(&p, "eps", &sweep.eps_list, &series, Some(&run.hash))?;
    println!("epsilon curve: {}", p.display());
    Ok(())
}

pub fn analyze_posterior(run: &Run, ensemble: Option<&Path>) -> Result<()> {
    let (train, test) = run.load_data()?;
    let ens = run.load_ensemble(ensemble, &test)?;
    let sweep = &run.cfg.sweep;
    if let Some(&k) = sweep.k_list.iter().find(|&&k| k > ens.k()) {
        return Err(CliError::config(format!(
            "k_list entry {k} exceeds the ensemble size {}",
            ens.k()
        )));
    }
    let metric = run.metric(&train)?;
    let audit_cfg = run.cfg.audit_config();
    let stats = posterior_sample_analysis(
        &ens,
        &metric,
        &audit_cfg,
        &sweep.k_list,
        sweep.resamplings,
        sweep.analysis_points,
        Some(&test),
        run.cfg.derived_seed(streams::ANALYSIS),
    )?;
    let dir = run.subdir("analysis")?;
    let xs: Vec<f64> = stats.iter().map(|s| s.k as f64).collect();
    let series = [CurveSeries {
        label: ens.kind.to_string(),
        mean: stats.iter().map(|s| s.mean).collect(),
        std: stats.iter().map(|s| s.std).collect(),
    }];
    let p = dir.join("curve_posterior_samples.csv");
    write_curve_csv(&p, "k", &xs, &series, Some(&run.hash))?;
    run.write_json(&dir.join("posterior_samples.json"), json!({ "kind": ens.kind, "stats": stats }))?;
    for s in &stats {
        println!("k={}: mean delta_star_hat {:.6} (std {:.6})", s.k, s.mean, s.std);
    }
    println!("saved: {}", p.display());
    Ok(())
}

pub fn oracle_check(run: &Run, ensemble: Option<&Path>) -> Result<()> {
    let (train, test) = run.load_data()?;
    if train.n_features > ORACLE_MAX_DIM {
        return Err(CliError::config(format!(
            "oracle check supports at most {ORACLE_MAX_DIM} input dimensions, dataset has {}",
            train.n_features
        )));
    }
    let ens = run.load_ensemble(ensemble, &test)?;
    let metric = run.metric(&train)?;
    let mut audit_cfg = run.cfg.audit_config();
    audit_cfg.source = audit_cfg.source.with_seed(run.cfg.derived_seed(streams::ORACLE));
    let attack = bayesfair::attack::AttackConfig { kind: AttackKind::FairPgd, ..audit_cfg.attack.clone() };
    let sample = sample_inputs(&audit_cfg.source, run.cfg.oracle.points, Some(&test), ens.input_dim())?;
    let grid = run.cfg.oracle.grid;
    let rows = bayesfair::par::map_slice(&sample.points, |_, x| {
        let p = fair_pgd(&ens, &metric, x, &attack)?;
        let o = brute_force_oracle(&ens, &metric, x, &attack, grid)?;
        Ok::<_, bayesfair::Error>((p.local_delta, o.local_delta))
    })
    .into_iter()
    .collect::<std::result::Result<Vec<_>, _>>()?;
    let ratio = |a: f64, b: f64| if b == 0.0 && a == 0.0 { 1.0 } else { a / b };
    let dir = run.subdir("oracle")?;
    let path = dir.join("oracle_check.csv");
    let mut w = csv::Writer::from_path(&path).map_err(bayesfair::Error::from)?;
    w.write_record(["index", "pgd_delta", "oracle_delta", "ratio"]).map_err(bayesfair::Error::from)?;
    for (i, (p, o)) in rows.iter().enumerate() {
        w.write_record([i.to_string(), p.to_string(), o.to_string(), ratio(*p, *o).to_string()])
            .map_err(bayesfair::Error::from)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    drop(w);
    run.stamp_csv(&path)?;
    let ratios: Vec<f64> = rows.iter().map(|(p, o)| ratio(*p, *o)).collect();
    let (mean_ratio, _) = mean_std(&ratios);
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum_p: f64 = rows.iter().map(|r| r.0).sum();
    let sum_o: f64 = rows.iter().map(|r| r.1).sum();
    println!("points: {}", rows.len());
    println!("mean_ratio: {mean_ratio:.6}");
    println!("min_ratio: {min_ratio:.6}");
    println!("ratio_of_means: {:.6}", ratio(sum_p, sum_o));
    println!("saved: {}", path.display());
    Ok(())
}
