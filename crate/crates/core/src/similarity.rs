//! Fairness similarity metrics `d_fair`.
//!
//! Two families are supported: a weighted ℓp distance
//! `(Σ θ_i |Δ_i|^p)^(1/p)` and the Mahalanobis distance `sqrt(Δᵀ S⁻¹ Δ)`.
//! Both are norms of `Δ = x' - x''`, so the ε-ball around a point is convex
//! and scaling along a ray from the centre is an exact projection onto it.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Exponent of the weighted ℓp metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpExponent {
    Finite(f64),
    /// `max_i θ_i |Δ_i|`: weights enter linearly in the limit.
    Infinity,
}

impl Serialize for LpExponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LpExponent::Finite(p) => s.serialize_f64(*p),
            LpExponent::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for LpExponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(LpExponent::Finite(p)),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") => {
                Ok(LpExponent::Infinity)
            }
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad exponent {s:?}"))),
        }
    }
}

impl std::fmt::Display for LpExponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LpExponent::Finite(p) => write!(f, "{p}"),
            LpExponent::Infinity => f.write_str("inf"),
        }
    }
}

impl Default for LpExponent {
    fn default() -> Self {
        LpExponent::Finite(2.0)
    }
}

/// Mahalanobis metric with the Cholesky factor of `S` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Mahalanobis {
    n: usize,
    /// Row-major `S`.
    s: Vec<f64>,
    /// Row-major lower-triangular `L` with `S = L Lᵀ`.
    chol: Vec<f64>,
}

impl Mahalanobis {
    /// `s` is row-major `n × n`; it must be symmetric positive definite.
    pub fn new(n: usize, s: Vec<f64>) -> Result<Self> {
        if s.len() != n * n {
            return Err(Error::dim("covariance matrix", n * n, s.len()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (s[i * n + j], s[j * n + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Data(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let m = DMatrix::from_row_slice(n, n, &s);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Data("matrix is not positive definite".into()))?;
        let l = chol.l();
        let mut flat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                flat[i * n + j] = l[(i, j)];
            }
        }
        Ok(Self { n, s, chol: flat })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.s
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.s[i * self.n + i]).collect()
    }

    /// Solves `L z = v`; `|z|² = vᵀ S⁻¹ v`.
    fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = vec![0.0; n];
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let acc: f64 = row.iter().zip(&z).map(|(l, zj)| l * zj).sum();
            z[i] = (v[i] - acc) / self.chol[i * n + i];
        }
        z
    }

    fn norm(&self, v: &[f64]) -> f64 {
        self.whiten(v).iter().map(|z| z * z).sum::<f64>().sqrt()
    }

    fn mul_s(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.s[i * self.n..(i + 1) * self.n].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityMetric {
    WeightedLp { p: LpExponent, theta: Vec<f64> },
    Mahalanobis(Mahalanobis),
}

impl SimilarityMetric {
    pub fn weighted_lp(p: LpExponent, theta: Vec<f64>) -> Result<Self> {
        if let LpExponent::Finite(p) = p {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(Error::Config(format!("ℓp exponent {p} must be >= 1")));
            }
        }
        if theta.is_empty() || theta.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("ℓp weights must be finite and strictly positive".into()));
        }
        Ok(SimilarityMetric::WeightedLp { p, theta })
    }

    pub fn mahalanobis(n: usize, s: Vec<f64>) -> Result<Self> {
        Ok(SimilarityMetric::Mahalanobis(Mahalanobis::new(n, s)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            SimilarityMetric::WeightedLp { theta, .. } => theta.len(),
            SimilarityMetric::Mahalanobis(m) => m.n,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SimilarityMetric::WeightedLp { .. } => "weighted_lp",
            SimilarityMetric::Mahalanobis(_) => "mahalanobis",
        }
    }

    /// Norm of a difference vector.
    pub fn norm(&self, delta: &[f64]) -> f64 {
        match self {
            SimilarityMetric::WeightedLp { p, theta } => match *p {
                LpExponent::Infinity => theta
                    .iter()
                    .zip(delta)
                    .map(|(t, d)| t * d.abs())
                    .fold(0.0, f64::max),
                LpExponent::Finite(1.0) => {
                    theta.iter().zip(delta).map(|(t, d)| t * d.abs()).sum()
                }
                LpExponent::Finite(2.0) => theta
                    .iter()
                    .zip(delta)
                    .map(|(t, d)| t * d * d)
                    .sum::<f64>()
                    .sqrt(),
                LpExponent::Finite(p) => theta
                    .iter()
                    .zip(delta)
                    .map(|(t, d)| t * d.abs().powf(p))
                    .sum::<f64>()
                    .powf(1.0 / p),
            },
            SimilarityMetric::Mahalanobis(m) => m.norm(delta),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.distance_unchecked(a, b))
    }

    pub(crate) fn distance_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.norm(&delta)
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::dim("metric input", self.dim(), v.len()));
        }
        Ok(())
    }

    /// Per-coordinate attack magnitude η: `ε / sqrt(θ_i)` for weighted ℓp,
    /// `ε sqrt(S_ii)` for Mahalanobis.
    pub fn step_scale(&self, eps: f64) -> Vec<f64> {
        match self {
            SimilarityMetric::WeightedLp { theta, .. } => {
                theta.iter().map(|t| eps / t.sqrt()).collect()
            }
            SimilarityMetric::Mahalanobis(m) => m.diag().iter().map(|s| eps * s.sqrt()).collect(),
        }
    }

    /// Half-widths of the axis-aligned box enclosing the ε-ball.
    pub fn bounding_half_widths(&self, eps: f64) -> Vec<f64> {
        match self {
            SimilarityMetric::WeightedLp { p, theta } => theta
                .iter()
                .map(|t| match p {
                    LpExponent::Infinity => eps / t,
                    LpExponent::Finite(p) => eps / t.powf(1.0 / p),
                })
                .collect(),
            SimilarityMetric::Mahalanobis(m) => m.diag().iter().map(|s| eps * s.sqrt()).collect(),
        }
    }

    /// Direction of unit metric length maximizing `gᵀv`, i.e. the steepest
    /// ascent direction of a linear objective inside the ball. Zero when
    /// `g` is zero.
    pub fn ascent_direction(&self, g: &[f64]) -> Vec<f64> {
        let n = g.len();
        if g.iter().all(|&v| v == 0.0) {
            return vec![0.0; n];
        }
        let raw: Vec<f64> = match self {
            SimilarityMetric::Mahalanobis(m) => m.mul_s(g),
            SimilarityMetric::WeightedLp { p, theta } => match *p {
                LpExponent::Infinity => g.iter().zip(theta).map(|(gi, t)| sgn(*gi) / t).collect(),
                LpExponent::Finite(1.0) => {
                    let mut best = 0;
                    for i in 1..n {
                        if g[i].abs() / theta[i] > g[best].abs() / theta[best] {
                            best = i;
                        }
                    }
                    let mut v = vec![0.0; n];
                    v[best] = sgn(g[best]) / theta[best];
                    v
                }
                LpExponent::Finite(p) => {
                    let q = 1.0 / (p - 1.0);
                    g.iter()
                        .zip(theta)
                        .map(|(gi, t)| sgn(*gi) * (gi.abs() / t).powf(q))
                        .collect()
                }
            },
        };
        let len = self.norm(&raw);
        if !(len > 0.0 && len.is_finite()) {
            return vec![0.0; n];
        }
        raw.into_iter().map(|v| v / len).collect()
    }

    /// Returns `point` if it lies in the ε-ball around `center`, otherwise
    /// the point where the segment from `center` to `point` leaves the ball.
    pub fn project_to_ball(&self, center: &[f64], point: &[f64], eps: f64) -> Result<Vec<f64>> {
        self.check(center)?;
        self.check(point)?;
        Ok(self.project_unchecked(center, point, eps))
    }

    pub(crate) fn project_unchecked(&self, center: &[f64], point: &[f64], eps: f64) -> Vec<f64> {
        let d = self.distance_unchecked(point, center);
        if d <= eps {
            return point.to_vec();
        }
        let alpha = eps / d;
        center
            .iter()
            .zip(point)
            .map(|(c, p)| c + alpha * (p - c))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MetricFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<MetricFile>(s)?.into_metric()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `sgn` with `sgn(0) = 0`.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// On-disk form of a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricFile {
    WeightedLp { p: LpExponent, theta: Vec<f64> },
    Mahalanobis { n: usize, s: Vec<f64> },
}

impl From<&SimilarityMetric> for MetricFile {
    fn from(m: &SimilarityMetric) -> Self {
        match m {
            SimilarityMetric::WeightedLp { p, theta } => MetricFile::WeightedLp {
                p: *p,
                theta: theta.clone(),
            },
            SimilarityMetric::Mahalanobis(m) => MetricFile::Mahalanobis {
                n: m.n,
                s: m.s.clone(),
            },
        }
    }
}

impl MetricFile {
    pub fn into_metric(self) -> Result<SimilarityMetric> {
        match self {
            MetricFile::WeightedLp { p, theta } => SimilarityMetric::weighted_lp(p, theta),
            MetricFile::Mahalanobis { n, s } => SimilarityMetric::mahalanobis(n, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    CorrelationWeights,
    CovarianceMahalanobis,
}

/// Map from absolute correlation with the sensitive attribute to θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMap {
    /// `θ_i = |ρ_i|`
    #[default]
    AbsCorrelation,
    /// `θ_i = 1 - |ρ_i|`: proxies of the sensitive attribute become cheap to vary.
    Decorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricFitConfig {
    /// Defaults to the dataset's sensitive column.
    pub sensitive_column: Option<usize>,
    pub epsilon_floor: f64,
    pub method: FitMethod,
    pub p: LpExponent,
    pub weight_map: WeightMap,
}

impl Default for MetricFitConfig {
    fn default() -> Self {
        Self {
            sensitive_column: None,
            epsilon_floor: 0.05,
            method: FitMethod::CorrelationWeights,
            p: LpExponent::Finite(2.0),
            weight_map: WeightMap::AbsCorrelation,
        }
    }
}

impl MetricFitConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor <= 1.0) {
            return Err(Error::Config("epsilon_floor must lie in (0, 1]".into()));
        }
        if let Some(c) = self.sensitive_column {
            if c >= n_features {
                return Err(Error::Config(format!(
                    "sensitive column {c} out of range for {n_features} features"
                )));
            }
        }
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Weighted ℓp metric with θ derived from correlation with the sensitive
/// column. The sensitive column itself, and any zero-variance feature, get
/// `epsilon_floor`.
pub fn fit_weighted_lp(data: &Dataset, cfg: &MetricFitConfig) -> Result<SimilarityMetric> {
    cfg.validate(data.n_features)?;
    if data.is_empty() {
        return Err(Error::Data("cannot fit a metric on an empty dataset".into()));
    }
    let sens_idx = cfg.sensitive_column.unwrap_or(data.sensitive_index);
    let sens = data.column(sens_idx);
    let floor = cfg.epsilon_floor;
    let theta = (0..data.n_features)
        .map(|j| {
            if j == sens_idx {
                return floor;
            }
            match pearson(&data.column(j), &sens) {
                None => floor,
                Some(r) => {
                    let t = match cfg.weight_map {
                        WeightMap::AbsCorrelation => r.abs(),
                        WeightMap::Decorrelation => 1.0 - r.abs(),
                    };
                    t.clamp(floor, 1.0)
                }
            }
        })
        .collect();
    SimilarityMetric::weighted_lp(cfg.p, theta)
}

/// Mahalanobis metric with `S` the sample covariance plus `λI`,
/// `λ = 1e-6 · trace / n`.
pub fn fit_mahalanobis(data: &Dataset) -> Result<SimilarityMetric> {
    let n = data.n_features;
    let rows = data.len();
    if rows < n + 1 {
        return Err(Error::Data(format!(
            "covariance of {n} features needs at least {} rows, got {rows}",
            n + 1
        )));
    }
    let mut mean = vec![0.0; n];
    for r in data.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut s = vec![0.0; n * n];
    for r in data.rows() {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in 0..=i {
                s[i * n + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (rows - 1) as f64;
    for i in 0..n {
        for j in 0..=i {
            let v = s[i * n + j] / denom;
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    let trace: f64 = (0..n).map(|i| s[i * n + i]).sum();
    let lambda = 1e-6 * trace / n as f64;
    for i in 0..n {
        s[i * n + i] += lambda;
    }
    SimilarityMetric::mahalanobis(n, s).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("covariance regularization failed: {msg}")),
        other => other,
    })
}

/// Dispatches on `cfg.method`.
pub fn fit_metric(data: &Dataset, cfg: &MetricFitConfig) -> Result<SimilarityMetric> {
    match cfg.method {
        FitMethod::CorrelationWeights => fit_weighted_lp(data, cfg),
        FitMethod::CovarianceMahalanobis => fit_mahalanobis(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize;
    use proptest::prelude::*;

    fn identity(n: usize) -> SimilarityMetric {
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 1.0;
        }
        SimilarityMetric::mahalanobis(n, s).unwrap()
    }

    #[test]
    fn euclidean_special_cases() {
        let m = identity(2);
        assert_eq!(m.distance(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 5.0);
        let lp = SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![1.0, 1.0]).unwrap();
        assert_eq!(lp.distance(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 5.0);
        let w = SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![4.0, 1.0]).unwrap();
        assert!((w.distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn general_p_and_infinity() {
        let m = SimilarityMetric::weighted_lp(LpExponent::Finite(3.0), vec![2.0, 1.0]).unwrap();
        let d = m.distance(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((d - 10f64.powf(1.0 / 3.0)).abs() < 1e-12);
        let inf = SimilarityMetric::weighted_lp(LpExponent::Infinity, vec![2.0, 1.0]).unwrap();
        assert_eq!(inf.distance(&[0.0, 0.0], &[1.0, 1.5]).unwrap(), 2.0);
    }

    #[test]
    fn invalid_metrics_rejected() {
        assert!(SimilarityMetric::weighted_lp(LpExponent::Finite(0.5), vec![1.0]).is_err());
        assert!(SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![0.0]).is_err());
        assert!(SimilarityMetric::mahalanobis(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(SimilarityMetric::mahalanobis(2, vec![1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(identity(2).distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn step_scales() {
        let w = SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![4.0, 1.0]).unwrap();
        assert_eq!(w.step_scale(0.1), vec![0.05, 0.1]);
        let m = SimilarityMetric::mahalanobis(2, vec![0.04, 0.0, 0.0, 0.25]).unwrap();
        assert_eq!(m.step_scale(0.5), vec![0.1, 0.25]);
        let u = SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![1.0; 4]).unwrap();
        assert_eq!(u.step_scale(0.1), vec![0.1; 4]);
    }

    #[test]
    fn projection_examples() {
        let m = identity(2);
        let p = m.project_to_ball(&[0.0, 0.0], &[0.3, 0.4], 0.25).unwrap();
        assert!((p[0] - 0.15).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        assert_eq!(m.project_to_ball(&[0.0, 0.0], &[0.1, 0.1], 0.25).unwrap(), vec![0.1, 0.1]);
        assert_eq!(m.project_to_ball(&[0.3, 0.3], &[0.3, 0.3], 0.25).unwrap(), vec![0.3, 0.3]);
    }

    #[test]
    fn ascent_direction_is_unit_and_optimal() {
        let g = [0.8, -0.3, 0.1];
        let metrics = vec![
            SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![4.0, 1.0, 0.5]).unwrap(),
            SimilarityMetric::weighted_lp(LpExponent::Finite(1.0), vec![4.0, 1.0, 0.5]).unwrap(),
            SimilarityMetric::weighted_lp(LpExponent::Finite(3.0), vec![4.0, 1.0, 0.5]).unwrap(),
            SimilarityMetric::weighted_lp(LpExponent::Infinity, vec![4.0, 1.0, 0.5]).unwrap(),
            SimilarityMetric::mahalanobis(3, vec![1.0, 0.3, 0.0, 0.3, 0.5, 0.1, 0.0, 0.1, 2.0])
                .unwrap(),
        ];
        for m in &metrics {
            let v = m.ascent_direction(&g);
            assert!((m.norm(&v) - 1.0).abs() < 1e-12, "{m:?}");
            let best: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
            // No random unit direction beats it.
            let mut r = crate::rng::rng_from_seed(1);
            for _ in 0..2000 {
                use rand::Rng;
                let u: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
                let len = m.norm(&u);
                let val: f64 = g.iter().zip(&u).map(|(a, b)| a * b / len).sum();
                assert!(val <= best + 1e-12);
            }
            assert_eq!(m.ascent_direction(&[0.0; 3]), vec![0.0; 3]);
        }
    }

    #[test]
    fn correlation_weights() {
        let mut d = synthesize(10_000, 2, 0.0, 5).unwrap().dataset;
        // Column 0 becomes a copy of the sensitive attribute, column 1 is
        // independent of it; add a constant column.
        let n = d.len();
        let mut x = Vec::with_capacity(n * 4);
        for i in 0..n {
            let r = d.row(i);
            x.extend_from_slice(&[r[2], r[1], r[2], 0.5]);
        }
        d.x = x;
        d.n_features = 4;
        d.sensitive_index = 2;
        let cfg = MetricFitConfig {
            epsilon_floor: 0.01,
            ..Default::default()
        };
        let SimilarityMetric::WeightedLp { theta, .. } = fit_weighted_lp(&d, &cfg).unwrap() else {
            panic!("expected weighted lp");
        };
        assert_eq!(theta[0], 1.0);
        // |ρ| of independent variables at n = 10^4 is O(1/sqrt(n)) = 0.01.
        assert!(theta[1] <= 0.04, "theta {}", theta[1]);
        assert_eq!(theta[2], 0.01);
        assert_eq!(theta[3], 0.01);
        // With the sensitive override pointed at the duplicated column both get the floor.
        let cfg0 = MetricFitConfig {
            sensitive_column: Some(0),
            ..cfg
        };
        let SimilarityMetric::WeightedLp { theta, .. } = fit_weighted_lp(&d, &cfg0).unwrap() else {
            panic!()
        };
        assert_eq!(theta[0], 0.01);
    }

    #[test]
    fn covariance_of_whitened_data_is_identity() {
        let mut r = crate::rng::rng_from_seed(3);
        let mut d = synthesize(20_000, 3, 0.0, 1).unwrap().dataset;
        use rand_distr::{Distribution, StandardNormal};
        d.x = (0..d.len() * 4).map(|_| StandardNormal.sample(&mut r)).collect();
        let m = fit_mahalanobis(&d).unwrap();
        let SimilarityMetric::Mahalanobis(m) = m else { panic!() };
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m.matrix()[i * 4 + j] - expect).abs() < 0.05);
            }
        }
    }

    #[test]
    fn duplicated_feature_direction() {
        // x and a copy of x: S = v[[1,1],[1,1]] + λI.
        let mut d = synthesize(2000, 1, 0.0, 2).unwrap().dataset;
        let col = d.column(0);
        d.x = col.iter().flat_map(|&v| [v, v]).collect();
        d.n_features = 2;
        d.sensitive_index = 1;
        let metric = fit_mahalanobis(&d).unwrap();
        let var = {
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64
        };
        let lambda = 1e-6 * 2.0 * var / 2.0;
        // Along (1,1): eigenvalue 2v+λ. Along (1,-1): eigenvalue λ.
        let a = 0.01;
        let along = metric.distance(&[0.0, 0.0], &[a, a]).unwrap();
        let across = metric.distance(&[0.0, 0.0], &[a, -a]).unwrap();
        let exp_along = (2.0 * a * a / (2.0 * var + lambda)).sqrt();
        let exp_across = (2.0 * a * a / lambda).sqrt();
        assert!((along - exp_along).abs() < 1e-6 * exp_along);
        assert!((across - exp_across).abs() < 1e-4 * exp_across);
        assert!(across.is_finite() && across > 100.0 * along);
    }

    #[test]
    fn mahalanobis_needs_rows() {
        let d = synthesize(10, 3, 0.0, 2).unwrap().dataset;
        assert!(fit_mahalanobis(&d.subset(&[0, 1, 2], d.split)).is_err());
    }

    #[test]
    fn json_roundtrip() {
        for m in [
            SimilarityMetric::weighted_lp(LpExponent::Infinity, vec![0.5, 2.0]).unwrap(),
            SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), vec![0.5, 2.0]).unwrap(),
            SimilarityMetric::mahalanobis(2, vec![1.0, 0.2, 0.2, 3.0]).unwrap(),
        ] {
            assert_eq!(SimilarityMetric::from_json(&m.to_json().unwrap()).unwrap(), m);
        }
        assert!(m_json_has_tag());
    }

    fn m_json_has_tag() -> bool {
        let m = SimilarityMetric::weighted_lp(LpExponent::Infinity, vec![1.0]).unwrap();
        m.to_json().unwrap().contains("\"kind\": \"weighted_lp\"")
    }

    fn random_spd(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        use rand::Rng;
        let mut r = crate::rng::rng_from_seed(seed);
        let a: Vec<f64> = (0..n * n)
            .map(|k| {
                let base = r.random::<f64>() - 0.5;
                if k % (n + 1) == 0 {
                    base + 2.0
                } else {
                    base
                }
            })
            .collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            }
        }
        (a, s)
    }

    #[test]
    fn mahalanobis_equals_whitened_euclidean() {
        for seed in 0..20 {
            let n = 4;
            let (a, s) = random_spd(seed, n);
            let m = SimilarityMetric::mahalanobis(n, s).unwrap();
            let am = DMatrix::from_row_slice(n, n, &a);
            let inv = am.try_inverse().unwrap();
            let delta = nalgebra::DVector::from_vec(vec![0.3, -0.1, 0.7, 0.2]);
            let whitened = &inv * &delta;
            let expect = whitened.norm();
            let got = m.norm(delta.as_slice());
            assert!((got - expect).abs() < 1e-10 * expect);
        }
    }

    fn metric_strategy() -> impl Strategy<Value = SimilarityMetric> {
        let lp = (
            prop_oneof![
                Just(LpExponent::Finite(1.0)),
                Just(LpExponent::Finite(2.0)),
                Just(LpExponent::Finite(3.5)),
                Just(LpExponent::Infinity)
            ],
            prop::collection::vec(0.05f64..5.0, 3),
        )
            .prop_map(|(p, t)| SimilarityMetric::weighted_lp(p, t).unwrap());
        let mah = (0u64..1000).prop_map(|s| {
            let (_, m) = random_spd(s, 3);
            SimilarityMetric::mahalanobis(3, m).unwrap()
        });
        prop_oneof![lp, mah]
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 3)
    }

    proptest! {
        #[test]
        fn metric_axioms(m in metric_strategy(), a in vec3(), b in vec3(), c in vec3()) {
            let dab = m.distance(&a, &b).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
            prop_assert!((dab - m.distance(&b, &a).unwrap()).abs() <= 1e-9);
            let dac = m.distance(&a, &c).unwrap();
            let dcb = m.distance(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-9);
        }

        #[test]
        fn projection_feasible_and_idempotent(
            m in metric_strategy(), c in vec3(), p in vec3(), eps in 0.001f64..1.5
        ) {
            let q = m.project_to_ball(&c, &p, eps).unwrap();
            prop_assert!(m.distance(&c, &q).unwrap() <= eps * (1.0 + 1e-9));
            let q2 = m.project_to_ball(&c, &q, eps).unwrap();
            for (x, y) in q.iter().zip(&q2) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
