//! Outer problem: sample inputs, attack each one, and report the largest
//! local δ found together with its Chernoff guarantee.
//!
//! With `n > ln(2/γ) / (2θ_c²)` iid samples, with probability at least
//! `1 − γ` the fraction of the input measure whose local δ exceeds the
//! empirical maximum is at most `θ_c`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{run_attack, AttackConfig, AttackResult, AttackSummary};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkArchitecture};
use crate::par;
use crate::posterior::{fit_posterior, InferenceKind, InferenceSpec, PosteriorEnsemble};
use crate::rng;
use crate::similarity::SimilarityMetric;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChernoffParams {
    pub theta_c: f64,
    pub gamma: f64,
}

impl Default for ChernoffParams {
    fn default() -> Self {
        Self {
            theta_c: 0.05,
            gamma: 0.05,
        }
    }
}

impl ChernoffParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta_c", self.theta_c), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("Chernoff {name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Smallest integer strictly greater than `ln(2/γ) / (2 θ_c²)`.
pub fn chernoff_sample_size(p: &ChernoffParams) -> Result<usize> {
    p.validate()?;
    let bound = (2.0 / p.gamma).ln() / (2.0 * p.theta_c * p.theta_c);
    Ok(bound.floor() as usize + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingSource {
    /// Rows of the supplied dataset, drawn with replacement.
    DatasetEmpirical { seed: u64 },
    /// Uniform over `[0,1]^n`.
    UniformBox { seed: u64 },
}

impl Default for SamplingSource {
    fn default() -> Self {
        SamplingSource::DatasetEmpirical { seed: 0 }
    }
}

impl SamplingSource {
    pub fn seed(&self) -> u64 {
        match *self {
            SamplingSource::DatasetEmpirical { seed } | SamplingSource::UniformBox { seed } => seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            SamplingSource::DatasetEmpirical { .. } => SamplingSource::DatasetEmpirical { seed },
            SamplingSource::UniformBox { .. } => SamplingSource::UniformBox { seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSample {
    pub points: Vec<Vec<f64>>,
    /// Present for dataset sources.
    pub labels: Option<Vec<f64>>,
}

impl InputSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `n` iid draws from `source`; `dim` is used by the uniform source.
pub fn sample_inputs(
    source: &SamplingSource,
    n: usize,
    data: Option<&Dataset>,
    dim: usize,
) -> Result<InputSample> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut r = rng::stream(source.seed(), &[0xA0D1]);
    match source {
        SamplingSource::DatasetEmpirical { .. } => {
            let data = data.ok_or_else(|| {
                Error::Config("dataset sampling source needs a loaded dataset".into())
            })?;
            if data.is_empty() {
                return Err(Error::Data("cannot sample from an empty dataset".into()));
            }
            if data.n_features != dim {
                return Err(Error::dim("dataset features", dim, data.n_features));
            }
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..data.len())).collect();
            Ok(InputSample {
                points: idx.iter().map(|&i| data.row(i).to_vec()).collect(),
                labels: Some(idx.iter().map(|&i| data.y[i]).collect()),
            })
        }
        SamplingSource::UniformBox { .. } => Ok(InputSample {
            points: (0..n)
                .map(|_| (0..dim).map(|_| r.random::<f64>()).collect())
                .collect(),
            labels: None,
        }),
    }
}

fn attack_sample(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AttackConfig,
    sample: &InputSample,
    warm: Option<&[AttackResult]>,
) -> Result<Vec<AttackResult>> {
    if sample.is_empty() {
        return Err(Error::Config("no input samples to audit".into()));
    }
    par::map_slice(&sample.points, |i, x| {
        let label = sample.labels.as_ref().map(|l| l[i]);
        let cands: Vec<Vec<f64>> = warm.map(|w| vec![w[i].x_adv.clone()]).unwrap_or_default();
        run_attack(ens, metric, x, label, cfg, &cands)
    })
    .into_iter()
    .collect()
}

fn p_hat_of(results: &[AttackResult], delta: f64) -> f64 {
    let fair = results.iter().filter(|r| r.local_delta <= delta).count();
    fair as f64 / results.len() as f64
}

fn max_delta(results: &[AttackResult]) -> f64 {
    results.iter().map(|r| r.local_delta).fold(0.0, f64::max)
}

/// Fraction of samples whose attacked gap is at most `delta`, plus the
/// per-sample records.
pub fn estimate_p_hat(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AttackConfig,
    delta: f64,
    sample: &InputSample,
) -> Result<(f64, Vec<AttackResult>)> {
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("delta must be non-negative, got {delta}")));
    }
    let results = attack_sample(ens, metric, cfg, sample, None)?;
    Ok((p_hat_of(&results, delta), results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AuditConfig {
    pub attack: AttackConfig,
    pub chernoff: ChernoffParams,
    pub source: SamplingSource,
    /// Also report `p̂` at this δ.
    pub delta: Option<f64>,
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.chernoff.validate()?;
        if let Some(d) = self.delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("delta must be non-negative, got {d}")));
            }
        }
        if matches!(self.source, SamplingSource::UniformBox { .. })
            && self.attack.label_rule == crate::attack::LabelRule::Dataset
        {
            return Err(Error::Config(
                "label_rule = dataset cannot be combined with the uniform sampling source".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub delta_star_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<f64>,
    pub n_samples: usize,
    pub chernoff: ChernoffParams,
    pub guarantee: String,
    pub inference_kind: InferenceKind,
    pub ensemble_size: usize,
    pub metric_kind: String,
    pub attack: AttackConfig,
    pub source: SamplingSource,
    pub config_fingerprint: String,
    /// Hash of the driving run configuration, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config_hash: Option<String>,
    pub per_sample: Vec<AttackSummary>,
    /// Seconds.
    pub wall_time: f64,
}

impl AuditReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        crate::attack::write_summaries_csv(&csv, &self.per_sample)?;
        Ok((json, csv))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// SHA-256 of the compact JSON form; object keys serialize sorted.
pub fn fingerprint_value(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// SHA-256 over architecture and every weight's bit pattern.
pub fn ensemble_fingerprint(ens: &PosteriorEnsemble) -> String {
    let mut h = Sha256::new();
    h.update(ens.kind.as_str().as_bytes());
    h.update(serde_json::to_string(&ens.arch).unwrap_or_default().as_bytes());
    for w in &ens.samples {
        for v in &w.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn guarantee_text(c: &ChernoffParams) -> String {
    format!(
        "with probability at least {} the measure of inputs whose local delta exceeds \
         delta_star_hat is at most {}",
        1.0 - c.gamma,
        c.theta_c
    )
}

fn build_report(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AuditConfig,
    results: &[AttackResult],
    data_fingerprint: Option<String>,
    start: Instant,
) -> Result<AuditReport> {
    let fingerprint = fingerprint_value(&serde_json::json!({
        "audit": serde_json::to_value(cfg)?,
        "metric": serde_json::from_str::<serde_json::Value>(&metric.to_json()?)?,
        "ensemble": ensemble_fingerprint(ens),
        "data": data_fingerprint,
    }));
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        delta_star_hat: max_delta(results),
        delta: cfg.delta,
        p_hat: cfg.delta.map(|d| p_hat_of(results, d)),
        n_samples: results.len(),
        chernoff: cfg.chernoff,
        guarantee: guarantee_text(&cfg.chernoff),
        inference_kind: ens.kind,
        ensemble_size: ens.k(),
        metric_kind: metric.kind_name().into(),
        attack: cfg.attack.clone(),
        source: cfg.source,
        config_fingerprint: fingerprint,
        per_sample: results.iter().enumerate().map(|(i, r)| r.summary(i)).collect(),
        run_config_hash: None,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Audits `chernoff_sample_size` inputs drawn from `cfg.source`.
/// `δ̂*` is the largest local δ found, i.e. the smallest δ with `p̂ = 1`.
pub fn estimate_delta_star(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AuditConfig,
    data: Option<&Dataset>,
) -> Result<AuditReport> {
    cfg.validate()?;
    let start = Instant::now();
    let n = chernoff_sample_size(&cfg.chernoff)?;
    let sample = sample_inputs(&cfg.source, n, data, ens.input_dim())?;
    let results = attack_sample(ens, metric, &cfg.attack, &sample, None)?;
    build_report(ens, metric, cfg, &results, data.map(Dataset::fingerprint), start)
}

/// Audit on caller-supplied points.
pub fn audit_points(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AuditConfig,
    sample: &InputSample,
) -> Result<AuditReport> {
    cfg.validate()?;
    let start = Instant::now();
    let results = attack_sample(ens, metric, &cfg.attack, sample, None)?;
    build_report(ens, metric, cfg, &results, None, start)
}

/// `δ̂*` for each ε in ascending `eps_list` on one shared sample. Each
/// point's adversary at the previous ε is re-evaluated as a candidate, so
/// the returned values are non-decreasing.
pub fn sweep_epsilon(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AuditConfig,
    eps_list: &[f64],
    data: Option<&Dataset>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if eps_list.is_empty() {
        return Err(Error::Config("eps_list must not be empty".into()));
    }
    if eps_list.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("eps_list must be sorted ascending".into()));
    }
    let n = chernoff_sample_size(&cfg.chernoff)?;
    let sample = sample_inputs(&cfg.source, n, data, ens.input_dim())?;
    let mut prev: Option<Vec<AttackResult>> = None;
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let attack = AttackConfig {
            eps,
            ..cfg.attack.clone()
        };
        let results = attack_sample(ens, metric, &attack, &sample, prev.as_deref())?;
        out.push(max_delta(&results));
        prev = Some(results);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStat {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Sample mean and sample standard deviation (`n − 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For each `k`, `resamplings` random size-`k` subsets of the ensemble are
/// audited on the same `n_points` inputs.
#[allow(clippy::too_many_arguments)]
pub fn posterior_sample_analysis(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    cfg: &AuditConfig,
    k_list: &[usize],
    resamplings: usize,
    n_points: usize,
    data: Option<&Dataset>,
    seed: u64,
) -> Result<Vec<KStat>> {
    cfg.validate()?;
    if k_list.is_empty() || resamplings == 0 {
        return Err(Error::Config("k_list and resamplings must be non-empty".into()));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > ens.k()) {
        return Err(Error::Config(format!(
            "k = {k} is outside 1..={} (ensemble size)",
            ens.k()
        )));
    }
    let sample = sample_inputs(&cfg.source, n_points, data, ens.input_dim())?;
    k_list
        .iter()
        .map(|&k| {
            let values = (0..resamplings)
                .map(|r| {
                    let sub = ens.subsample(k, rng::derive_seed(seed, &[k as u64, r as u64]))?;
                    Ok(max_delta(&attack_sample(&sub, metric, &cfg.attack, &sample, None)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&values);
            Ok(KStat {
                k,
                mean,
                std,
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub eps_list: Vec<f64>,
    pub k_list: Vec<usize>,
    pub resamplings: usize,
    pub inference_kinds: Vec<InferenceKind>,
    pub seeds: Vec<u64>,
    pub activation: Activation,
    /// Points per resampling in the posterior-sample analysis.
    pub analysis_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            depths: vec![1, 2, 3, 4],
            widths: vec![8, 16, 32, 64],
            eps_list: vec![0.02, 0.05, 0.1, 0.2],
            k_list: vec![1, 5, 25, 50],
            resamplings: 15,
            inference_kinds: vec![InferenceKind::Deterministic, InferenceKind::Hmc],
            seeds: vec![0],
            activation: Activation::Relu,
            analysis_points: 100,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty()
            || self.widths.is_empty()
            || self.eps_list.is_empty()
            || self.k_list.is_empty()
            || self.inference_kinds.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("sweep lists must be non-empty".into()));
        }
        if self.resamplings == 0 || self.analysis_points == 0 {
            return Err(Error::Config("resamplings and analysis_points must be positive".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.eps_list.windows(2).any(|w| !(w[0] <= w[1])) || self.eps_list[0] <= 0.0 {
            return Err(Error::Config("eps_list must be positive and ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchCell {
    pub depth: usize,
    pub width: usize,
    pub kind: InferenceKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: ArchCell,
    pub delta_star_hat: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Cells in (kind, depth, width, seed) order.
pub fn arch_cells(sweep: &SweepConfig) -> Vec<ArchCell> {
    let mut out = Vec::new();
    for &kind in &sweep.inference_kinds {
        for &depth in &sweep.depths {
            for &width in &sweep.widths {
                for &seed in &sweep.seeds {
                    out.push(ArchCell {
                        depth,
                        width,
                        kind,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// Shared state of an architecture sweep.
pub struct SweepContext<'a> {
    pub sweep: &'a SweepConfig,
    pub spec: &'a InferenceSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub metric: &'a SimilarityMetric,
    pub audit: &'a AuditConfig,
}

impl SweepContext<'_> {
    /// Content hash identifying a cell's result.
    pub fn cell_key(&self, cell: &ArchCell) -> Result<String> {
        Ok(fingerprint_value(&serde_json::json!({
            "cell": serde_json::to_value(cell)?,
            "activation": serde_json::to_value(self.sweep.activation)?,
            "spec": serde_json::to_value(self.spec)?,
            "audit": serde_json::to_value(self.audit)?,
            "metric": serde_json::from_str::<serde_json::Value>(&self.metric.to_json()?)?,
            "train": self.train.fingerprint(),
            "test": self.test.fingerprint(),
        })))
    }

    /// Trains and audits one cell. Training failures are recorded, not raised.
    pub fn run_cell(&self, cell: &ArchCell) -> Result<CellOutcome> {
        let arch = NetworkArchitecture::uniform(
            self.train.n_features,
            cell.depth,
            cell.width,
            self.sweep.activation,
        );
        let spec = InferenceSpec {
            kind: cell.kind,
            ..self.spec.clone()
        };
        match fit_posterior(&arch, self.train, &spec, cell.seed) {
            Ok(ens) => {
                let report = estimate_delta_star(&ens, self.metric, self.audit, Some(self.test))?;
                Ok(CellOutcome {
                    cell: cell.clone(),
                    delta_star_hat: Some(report.delta_star_hat),
                    train_accuracy: ens.provenance.train_accuracy.or(Some(ens.accuracy(self.train))),
                    error: None,
                })
            }
            Err(Error::Training(msg)) => {
                log::warn!("sweep cell {cell:?} failed: {msg}");
                Ok(CellOutcome {
                    cell: cell.clone(),
                    delta_star_hat: None,
                    train_accuracy: None,
                    error: Some(msg),
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Runs every cell, reusing `<cache_dir>/cell_<key>.json` results when
/// present and writing them after each completed cell.
pub fn sweep_architectures(ctx: &SweepContext<'_>, cache_dir: Option<&Path>) -> Result<Vec<CellOutcome>> {
    ctx.sweep.validate()?;
    ctx.spec.validate()?;
    ctx.audit.validate()?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cells = arch_cells(ctx.sweep);
    let mut out = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let path = match cache_dir {
            Some(dir) => Some(dir.join(format!("cell_{}.json", ctx.cell_key(cell)?))),
            None => None,
        };
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            log::info!("sweep cell {}/{} cached", i + 1, cells.len());
            out.push(serde_json::from_str(&s)?);
            continue;
        }
        log::info!("sweep cell {}/{}: {cell:?}", i + 1, cells.len());
        let outcome = ctx.run_cell(cell)?;
        if let Some(p) = &path {
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, serde_json::to_string_pretty(&outcome)?).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, p).map_err(|e| Error::io(p, e))?;
        }
        out.push(outcome);
    }
    Ok(out)
}

/// Depth × width matrices of the mean and std of `δ̂*` over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub kind: InferenceKind,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// Seeds that produced a valid result, per cell.
    pub valid: Vec<Vec<usize>>,
}

pub fn heatmaps(sweep: &SweepConfig, outcomes: &[CellOutcome]) -> Vec<Heatmap> {
    let mut by_cell: BTreeMap<(InferenceKind, usize, usize), Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        let entry = by_cell.entry((o.cell.kind, o.cell.depth, o.cell.width)).or_default();
        if let Some(d) = o.delta_star_hat {
            entry.push(d);
        }
    }
    sweep
        .inference_kinds
        .iter()
        .map(|&kind| {
            let mut mean = Vec::new();
            let mut std = Vec::new();
            let mut valid = Vec::new();
            for &d in &sweep.depths {
                let (mut mr, mut sr, mut vr) = (Vec::new(), Vec::new(), Vec::new());
                for &w in &sweep.widths {
                    let vals = by_cell.get(&(kind, d, w)).cloned().unwrap_or_default();
                    let (m, s) = mean_std(&vals);
                    mr.push(m);
                    sr.push(s);
                    vr.push(vals.len());
                }
                mean.push(mr);
                std.push(sr);
                valid.push(vr);
            }
            Heatmap {
                kind,
                depths: sweep.depths.clone(),
                widths: sweep.widths.clone(),
                mean,
                std,
                valid,
            }
        })
        .collect()
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Rows are depths, columns widths; invalid cells are left empty. A
/// trailing `# config_hash=<hash>` comment line is added when `hash` is set.
pub fn write_matrix_csv(
    path: &Path,
    depths: &[usize],
    widths: &[usize],
    values: &[Vec<f64>],
    hash: Option<&str>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let mut header = vec!["depth\\width".to_string()];
    header.extend(widths.iter().map(|w| w.to_string()));
    w.write_record(&header)?;
    for (d, row) in depths.iter().zip(values) {
        let mut rec = vec![d.to_string()];
        rec.extend(row.iter().map(|&v| fmt_value(v)));
        w.write_record(&rec)?;
    }
    if let Some(h) = hash {
        w.write_record([format!("# config_hash={h}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One curve column: label plus per-x mean and std.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns `x_name, <label>_mean, <label>_std, ...`.
pub fn write_curve_csv(
    path: &Path,
    x_name: &str,
    xs: &[f64],
    series: &[CurveSeries],
    hash: Option<&str>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let mut header = vec![x_name.to_string()];
    for s in series {
        header.push(format!("{}_mean", s.label));
        header.push(format!("{}_std", s.label));
    }
    w.write_record(&header)?;
    for (i, x) in xs.iter().enumerate() {
        let mut rec = vec![x.to_string()];
        for s in series {
            rec.push(fmt_value(s.mean[i]));
            rec.push(fmt_value(s.std[i]));
        }
        w.write_record(&rec)?;
    }
    if let Some(h) = hash {
        w.write_record([format!("# config_hash={h}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::nn::{init_weights, WeightVector};
    use crate::similarity::LpExponent;

    fn flat(n: usize) -> PosteriorEnsemble {
        let arch = NetworkArchitecture::uniform(n, 1, 4, Activation::Relu);
        PosteriorEnsemble::point(arch.clone(), WeightVector::zeros(&arch)).unwrap()
    }

    fn random_net(n: usize, seed: u64) -> PosteriorEnsemble {
        let arch = NetworkArchitecture::uniform(n, 1, 8, Activation::Tanh);
        let mut w = init_weights(&arch, seed);
        w.values.iter_mut().for_each(|v| *v *= 4.0);
        PosteriorEnsemble::point(arch, w).unwrap()
    }

    fn metric(n: usize) -> SimilarityMetric {
        SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![1.0; n]).unwrap()
    }

    fn uniform_cfg() -> AuditConfig {
        AuditConfig {
            source: SamplingSource::UniformBox { seed: 3 },
            ..Default::default()
        }
    }

    #[test]
    fn chernoff_examples() {
        let n = |t, g| chernoff_sample_size(&ChernoffParams { theta_c: t, gamma: g }).unwrap();
        assert_eq!(n(0.05, 0.05), 738);
        assert_eq!(n(0.1, 0.05), 185);
        assert_eq!(n(0.05, 0.1), 600);
        assert!(chernoff_sample_size(&ChernoffParams { theta_c: 1.0, gamma: 0.5 }).is_err());
    }

    #[test]
    fn sampling_sources() {
        let d = crate::test_support::blobs(500, 1);
        let s = sample_inputs(&SamplingSource::DatasetEmpirical { seed: 1 }, 738, Some(&d), 2)
            .unwrap();
        assert_eq!(s.len(), 738);
        let rows: Vec<&[f64]> = d.rows().collect();
        assert!(s.points.iter().all(|p| rows.contains(&p.as_slice())));
        let u = sample_inputs(&SamplingSource::UniformBox { seed: 1 }, 200, None, 3).unwrap();
        assert!(u.points.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(u, sample_inputs(&SamplingSource::UniformBox { seed: 1 }, 200, None, 3).unwrap());
        assert!(sample_inputs(&SamplingSource::DatasetEmpirical { seed: 1 }, 5, None, 2).is_err());
    }

    #[test]
    fn flat_predictor_is_fair() {
        let ens = flat(3);
        let cfg = AuditConfig {
            delta: Some(0.0),
            ..uniform_cfg()
        };
        let r = estimate_delta_star(&ens, &metric(3), &cfg, None).unwrap();
        assert_eq!(r.delta_star_hat, 0.0);
        assert_eq!(r.p_hat, Some(1.0));
        assert_eq!(r.n_samples, 738);
        let curve = sweep_epsilon(&ens, &metric(3), &cfg, &[0.05, 0.1], None).unwrap();
        assert_eq!(curve, vec![0.0, 0.0]);
    }

    #[test]
    fn delta_star_is_max_and_p_hat_consistent() {
        let ens = random_net(2, 7);
        let cfg = AuditConfig {
            chernoff: ChernoffParams { theta_c: 0.1, gamma: 0.05 },
            ..uniform_cfg()
        };
        let r = estimate_delta_star(&ens, &metric(2), &cfg, None).unwrap();
        let max = r.per_sample.iter().map(|s| s.local_delta).fold(0.0, f64::max);
        assert_eq!(r.delta_star_hat, max);
        assert!(max > 0.0);
        let sample = sample_inputs(&cfg.source, r.n_samples, None, 2).unwrap();
        let (p, _) = estimate_p_hat(&ens, &metric(2), &cfg.attack, max, &sample).unwrap();
        assert_eq!(p, 1.0);
        let (p, _) = estimate_p_hat(&ens, &metric(2), &cfg.attack, max * 0.999, &sample).unwrap();
        assert!(p < 1.0);
    }

    #[test]
    fn p_hat_is_permutation_invariant() {
        let ens = random_net(2, 8);
        let cfg = uniform_cfg();
        let mut sample = sample_inputs(&cfg.source, 50, None, 2).unwrap();
        let (a, _) = estimate_p_hat(&ens, &metric(2), &cfg.attack, 0.02, &sample).unwrap();
        sample.points.reverse();
        let (b, _) = estimate_p_hat(&ens, &metric(2), &cfg.attack, 0.02, &sample).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_audit() {
        let ens = random_net(2, 9);
        let cfg = uniform_cfg();
        let sample = sample_inputs(&cfg.source, 1, None, 2).unwrap();
        let r = audit_points(&ens, &metric(2), &cfg, &sample).unwrap();
        let direct = run_attack(&ens, &metric(2), &sample.points[0], None, &cfg.attack, &[]).unwrap();
        assert_eq!(r.delta_star_hat, direct.local_delta);
    }

    #[test]
    fn epsilon_sweep_non_decreasing() {
        let ens = random_net(3, 10);
        let cfg = AuditConfig {
            attack: AttackConfig {
                kind: AttackKind::FairPgd,
                pgd_steps: 5,
                ..Default::default()
            },
            chernoff: ChernoffParams { theta_c: 0.1, gamma: 0.05 },
            ..uniform_cfg()
        };
        let curve = sweep_epsilon(&ens, &metric(3), &cfg, &[0.02, 0.05, 0.1, 0.2], None).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
        assert!(sweep_epsilon(&ens, &metric(3), &cfg, &[0.1, 0.05], None).is_err());
    }

    #[test]
    fn full_pool_analysis_equals_full_audit() {
        let arch = NetworkArchitecture::uniform(2, 1, 4, Activation::Tanh);
        let samples: Vec<_> = (0..6).map(|s| init_weights(&arch, s)).collect();
        let ens = PosteriorEnsemble::new(InferenceKind::Hmc, arch, samples, Default::default()).unwrap();
        let cfg = uniform_cfg();
        let stats =
            posterior_sample_analysis(&ens, &metric(2), &cfg, &[6], 1, 40, None, 1).unwrap();
        let sample = sample_inputs(&cfg.source, 40, None, 2).unwrap();
        let full = audit_points(&ens, &metric(2), &cfg, &sample).unwrap();
        assert_eq!(stats[0].mean, full.delta_star_hat);
        assert_eq!(stats[0].std, 0.0);
        assert!(posterior_sample_analysis(&ens, &metric(2), &cfg, &[7], 1, 40, None, 1).is_err());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn heatmap_layout() {
        let sweep = SweepConfig {
            depths: vec![1, 2],
            widths: vec![4],
            seeds: vec![0, 1],
            inference_kinds: vec![InferenceKind::Deterministic],
            ..Default::default()
        };
        let outcomes: Vec<CellOutcome> = arch_cells(&sweep)
            .into_iter()
            .map(|cell| CellOutcome {
                delta_star_hat: if cell.depth == 2 && cell.seed == 1 {
                    None
                } else {
                    Some(cell.depth as f64 + cell.seed as f64)
                },
                train_accuracy: None,
                error: None,
                cell,
            })
            .collect();
        let h = heatmaps(&sweep, &outcomes);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].mean, vec![vec![1.5], vec![2.0]]);
        assert_eq!(h[0].valid, vec![vec![2], vec![1]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_matrix_csv(&p, &h[0].depths, &h[0].widths, &h[0].mean, Some("abc")).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "depth\\width,4\n1,1.5\n2,2\n# config_hash=abc\n");
    }
}
