//! Inner maximization: find `x''` in the ε-ball of `x'` that maximizes
//! `|π(x'') − π(x')|`.
//!
//! Fair-FGSM takes one signed step of per-coordinate size `η` along the
//! expected loss gradient. Fair-PGD starts with that same step and then
//! follows the metric's steepest-ascent direction with steps of metric length
//! `ε · pgd_step_fraction`, keeping the best iterate. Every candidate is
//! projected onto the ball, clamped to the domain box and projected again;
//! when the origin is inside the box the last projection cannot leave it,
//! since box and ball are both convex and contain the origin.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::posterior::PosteriorEnsemble;
use crate::similarity::{sgn, SimilarityMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    FairFgsm,
    FairPgd,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::FairFgsm => "fair_fgsm",
            AttackKind::FairPgd => "fair_pgd",
        }
    }
}

/// Which label enters the loss whose gradient drives the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// `y = 1` if `π(x') >= 0.5`, else 0.
    #[default]
    Predicted,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampBox {
    Off,
    /// `[0, 1]` on every feature.
    #[default]
    Unit,
    Bounds { lo: Vec<f64>, hi: Vec<f64> },
}

impl ClampBox {
    fn bounds(&self, i: usize) -> Option<(f64, f64)> {
        match self {
            ClampBox::Off => None,
            ClampBox::Unit => Some((0.0, 1.0)),
            ClampBox::Bounds { lo, hi } => Some((lo[i], hi[i])),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| match self.bounds(i) {
            None => true,
            Some((lo, hi)) => lo <= v && v <= hi,
        })
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            if let Some((lo, hi)) = self.bounds(i) {
                *v = v.clamp(lo, hi);
            }
        }
    }

    fn validate(&self, n: Option<usize>) -> Result<()> {
        if let ClampBox::Bounds { lo, hi } = self {
            if lo.len() != hi.len() {
                return Err(Error::dim("clamp box upper bounds", lo.len(), hi.len()));
            }
            if let Some(n) = n {
                if lo.len() != n {
                    return Err(Error::dim("clamp box", n, lo.len()));
                }
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Config("clamp box needs lo <= hi on every feature".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub eps: f64,
    pub pgd_steps: usize,
    /// Metric length of PGD steps after the first, relative to ε.
    /// Defaults to `2 / pgd_steps`.
    pub pgd_step_fraction: Option<f64>,
    pub clamp_box: ClampBox,
    pub label_rule: LabelRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::FairFgsm,
            eps: 0.1,
            pgd_steps: 25,
            pgd_step_fraction: None,
            clamp_box: ClampBox::Unit,
            label_rule: LabelRule::Predicted,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("attack eps must be positive, got {}", self.eps)));
        }
        if self.pgd_steps == 0 {
            return Err(Error::Config("pgd_steps must be at least 1".into()));
        }
        if let Some(f) = self.pgd_step_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("pgd_step_fraction {f} outside (0, 1]")));
            }
        }
        self.clamp_box.validate(None)
    }

    pub fn step_fraction(&self) -> f64 {
        self.pgd_step_fraction
            .unwrap_or_else(|| (2.0 / self.pgd_steps as f64).min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_origin: Vec<f64>,
    pub x_adv: Vec<f64>,
    pub pi_origin: f64,
    pub pi_adv: f64,
    pub local_delta: f64,
    pub dist: f64,
    /// Gradient steps taken; for the oracle, the number of feasible grid points.
    pub steps_used: usize,
}

/// `|π(a) − π(b)|`.
pub fn local_delta(ens: &PosteriorEnsemble, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((ens.predictive(a)? - ens.predictive(b)?).abs())
}

/// Projects onto the ball, clamps, and projects again.
fn make_feasible(metric: &SimilarityMetric, origin: &[f64], cand: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let mut p = metric.project_unchecked(origin, cand, cfg.eps);
    cfg.clamp_box.clamp(&mut p);
    let mut p = metric.project_unchecked(origin, &p, cfg.eps);
    // Ray scaling can land a rounding error outside the ball.
    let mut shrink = 1.0;
    while metric.distance_unchecked(&p, origin) > cfg.eps {
        shrink *= 1.0 - 1e-12;
        p = origin
            .iter()
            .zip(&p)
            .map(|(o, v)| o + shrink * (v - o))
            .collect();
    }
    p
}

fn check_inputs(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    cfg: &AttackConfig,
) -> Result<()> {
    cfg.validate()?;
    let n = ens.input_dim();
    if x.len() != n {
        return Err(Error::dim("attack origin", n, x.len()));
    }
    if metric.dim() != n {
        return Err(Error::dim("metric dimension", n, metric.dim()));
    }
    cfg.clamp_box.validate(Some(n))?;
    if !cfg.clamp_box.contains(x) {
        return Err(Error::Data("attack origin lies outside the clamp box".into()));
    }
    Ok(())
}

fn resolve_label(pi: f64, label: Option<f64>, rule: LabelRule) -> Result<f64> {
    match rule {
        LabelRule::Predicted => Ok(if pi >= 0.5 { 1.0 } else { 0.0 }),
        LabelRule::Dataset => {
            label.ok_or_else(|| Error::Config("label_rule = dataset needs a label".into()))
        }
    }
}

/// Shared loop: step 0 is the signed FGSM step, later steps follow the
/// metric's ascent direction.
fn attack_core(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    label: Option<f64>,
    cfg: &AttackConfig,
    steps: usize,
    candidates: &[Vec<f64>],
) -> Result<AttackResult> {
    let pi0 = ens.predictive_unchecked(x);
    let y = resolve_label(pi0, label, cfg.label_rule)?;
    let eta = metric.step_scale(cfg.eps);
    let later = cfg.eps * cfg.step_fraction();

    let mut best = x.to_vec();
    let mut best_pi = pi0;
    let mut best_delta = 0.0;
    let mut cur = x.to_vec();
    let mut used = 0;
    for t in 0..steps {
        let g = ens.expected_input_gradient_unchecked(&cur, y);
        let cand: Vec<f64> = if t == 0 {
            cur.iter()
                .zip(&g)
                .zip(&eta)
                .map(|((c, gi), e)| c + e * sgn(*gi))
                .collect()
        } else {
            let v = metric.ascent_direction(&g);
            cur.iter().zip(&v).map(|(c, vi)| c + later * vi).collect()
        };
        let next = make_feasible(metric, x, &cand, cfg);
        used = t + 1;
        let pi = ens.predictive_unchecked(&next);
        let d = (pi - pi0).abs();
        if d >= best_delta {
            best_delta = d;
            best_pi = pi;
            best.clone_from(&next);
        }
        if next == cur {
            break;
        }
        cur = next;
    }
    for c in candidates {
        if c.len() != x.len()
            || metric.distance_unchecked(c, x) > cfg.eps
            || !cfg.clamp_box.contains(c)
        {
            continue;
        }
        let pi = ens.predictive_unchecked(c);
        let d = (pi - pi0).abs();
        if d > best_delta {
            best_delta = d;
            best_pi = pi;
            best.clone_from(c);
        }
    }
    let dist = metric.distance_unchecked(&best, x);
    Ok(AttackResult {
        x_origin: x.to_vec(),
        x_adv: best,
        pi_origin: pi0,
        pi_adv: best_pi,
        local_delta: best_delta,
        dist,
        steps_used: used,
    })
}

/// One signed step `x' + η ⊙ sgn(E_w[∇_x L])`, made feasible.
pub fn fair_fgsm(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(ens, metric, x, cfg)?;
    attack_core(ens, metric, x, None, cfg, 1, &[])
}

/// Multi-step attack reporting the best iterate, origin included.
/// With `pgd_steps = 1` it coincides with [`fair_fgsm`].
pub fn fair_pgd(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(ens, metric, x, cfg)?;
    attack_core(ens, metric, x, None, cfg, cfg.pgd_steps, &[])
}

/// Runs `cfg.kind`. `label` is required under [`LabelRule::Dataset`].
/// Feasible `candidates` (e.g. adversaries found at a smaller ε) are also
/// evaluated and replace the attack's point if strictly better.
pub fn run_attack(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    label: Option<f64>,
    cfg: &AttackConfig,
    candidates: &[Vec<f64>],
) -> Result<AttackResult> {
    check_inputs(ens, metric, x, cfg)?;
    let steps = match cfg.kind {
        AttackKind::FairFgsm => 1,
        AttackKind::FairPgd => cfg.pgd_steps,
    };
    attack_core(ens, metric, x, label, cfg, steps, candidates)
}

/// Attacks every point in parallel; output order follows `points`.
pub fn attack_batch(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    points: &[Vec<f64>],
    labels: Option<&[f64]>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if let Some(l) = labels {
        if l.len() != points.len() {
            return Err(Error::dim("labels", points.len(), l.len()));
        }
    }
    par::map_slice(points, |i, x| {
        run_attack(ens, metric, x, labels.map(|l| l[i]), cfg, &[])
    })
    .into_iter()
    .collect()
}

pub const ORACLE_MAX_DIM: usize = 4;

/// Exhaustive search over a `grid_points_per_dim^n` grid spanning the
/// bounding box of the ε-ball, restricted to the ball and the clamp box.
/// Ties go to the lowest grid index; the origin is always a candidate.
pub fn brute_force_oracle(
    ens: &PosteriorEnsemble,
    metric: &SimilarityMetric,
    x: &[f64],
    cfg: &AttackConfig,
    grid_points_per_dim: usize,
) -> Result<AttackResult> {
    check_inputs(ens, metric, x, cfg)?;
    let n = x.len();
    if n > ORACLE_MAX_DIM {
        return Err(Error::Config(format!(
            "brute-force oracle supports at most {ORACLE_MAX_DIM} input dimensions, got {n}"
        )));
    }
    if grid_points_per_dim < 2 {
        return Err(Error::Config("oracle grid needs at least 2 points per dimension".into()));
    }
    let g = grid_points_per_dim;
    let half = metric.bounding_half_widths(cfg.eps);
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..g)
                .map(|k| x[i] - half[i] + 2.0 * half[i] * k as f64 / (g - 1) as f64)
                .collect()
        })
        .collect();
    let total = g.pow(n as u32);
    let pi0 = ens.predictive_unchecked(x);
    let scored = par::map_range(total, |mut idx| {
        let mut p = vec![0.0; n];
        for (i, axis) in axes.iter().enumerate() {
            p[i] = axis[idx % g];
            idx /= g;
        }
        if metric.distance_unchecked(&p, x) > cfg.eps || !cfg.clamp_box.contains(&p) {
            return None;
        }
        let pi = ens.predictive_unchecked(&p);
        Some(((pi - pi0).abs(), pi))
    });
    let mut best = (0.0, pi0, None);
    let mut feasible = 0;
    for (i, s) in scored.iter().enumerate() {
        if let Some((d, pi)) = *s {
            feasible += 1;
            if d > best.0 {
                best = (d, pi, Some(i));
            }
        }
    }
    let x_adv = match best.2 {
        None => x.to_vec(),
        Some(mut idx) => axes
            .iter()
            .map(|axis| {
                let v = axis[idx % g];
                idx /= g;
                v
            })
            .collect(),
    };
    Ok(AttackResult {
        dist: metric.distance_unchecked(&x_adv, x),
        x_origin: x.to_vec(),
        x_adv,
        pi_origin: pi0,
        pi_adv: best.1,
        local_delta: best.0,
        steps_used: feasible,
    })
}

/// Per-point record without the coordinate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub index: usize,
    pub dist: f64,
    pub pi_origin: f64,
    pub pi_adv: f64,
    pub local_delta: f64,
    pub steps_used: usize,
}

impl AttackResult {
    pub fn summary(&self, index: usize) -> AttackSummary {
        AttackSummary {
            index,
            dist: self.dist,
            pi_origin: self.pi_origin,
            pi_adv: self.pi_adv,
            local_delta: self.local_delta,
            steps_used: self.steps_used,
        }
    }
}

/// CSV with columns `index, dist, pi_origin, pi_adv, local_delta, steps_used`.
pub fn write_summaries_csv(path: &Path, rows: &[AttackSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_results_csv(path: &Path, results: &[AttackResult]) -> Result<()> {
    let rows: Vec<AttackSummary> = results.iter().enumerate().map(|(i, r)| r.summary(i)).collect();
    write_summaries_csv(path, &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSidecar {
    pub config: AttackConfig,
    pub seeds: Vec<u64>,
    pub n_points: usize,
    pub metric_kind: String,
}

pub fn write_sidecar(path: &Path, sidecar: &AttackSidecar) -> Result<()> {
    let s = serde_json::to_string_pretty(sidecar)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{sigmoid, Activation, NetworkArchitecture, WeightVector};
    use crate::similarity::LpExponent;

    fn linear(weight: f64) -> PosteriorEnsemble {
        let arch = NetworkArchitecture::new(1, vec![], Activation::Relu);
        let w = WeightVector::from_values(&arch, vec![weight, 0.0]).unwrap();
        PosteriorEnsemble::point(arch, w).unwrap()
    }

    fn l2(theta: Vec<f64>) -> SimilarityMetric {
        SimilarityMetric::weighted_lp(LpExponent::Finite(2.0), theta).unwrap()
    }

    #[test]
    fn fgsm_linear_closed_form() {
        let ens = linear(2.0);
        let cfg = AttackConfig {
            clamp_box: ClampBox::Off,
            ..Default::default()
        };
        let r = fair_fgsm(&ens, &l2(vec![1.0]), &[0.0], &cfg).unwrap();
        assert!((r.x_adv[0] + 0.1).abs() < 1e-15);
        assert!((r.local_delta - (0.5 - sigmoid(-0.2))).abs() < 1e-15);
        assert!((r.local_delta - 0.04983).abs() < 1e-5);
        assert_eq!(r.steps_used, 1);
    }

    #[test]
    fn clamp_blocks_leaving_the_box() {
        let r = fair_fgsm(&linear(2.0), &l2(vec![1.0]), &[0.0], &AttackConfig::default()).unwrap();
        assert_eq!(r.x_adv, vec![0.0]);
        assert_eq!(r.local_delta, 0.0);
    }

    #[test]
    fn flat_predictor_returns_origin() {
        let arch = NetworkArchitecture::uniform(2, 2, 4, Activation::Relu);
        let ens = PosteriorEnsemble::point(arch.clone(), WeightVector::zeros(&arch)).unwrap();
        let m = l2(vec![1.0, 1.0]);
        for kind in [AttackKind::FairFgsm, AttackKind::FairPgd] {
            let cfg = AttackConfig {
                kind,
                ..Default::default()
            };
            let r = run_attack(&ens, &m, &[0.3, 0.7], None, &cfg, &[]).unwrap();
            assert_eq!(r.x_adv, vec![0.3, 0.7]);
            assert_eq!(r.local_delta, 0.0);
            assert!(r.pi_adv.is_finite());
        }
        let o = brute_force_oracle(&ens, &m, &[0.3, 0.7], &AttackConfig::default(), 11).unwrap();
        assert_eq!(o.local_delta, 0.0);
    }

    #[test]
    fn local_delta_properties() {
        let ens = linear(3.0);
        assert_eq!(local_delta(&ens, &[0.4], &[0.4]).unwrap(), 0.0);
        let a = local_delta(&ens, &[0.1], &[0.6]).unwrap();
        let b = local_delta(&ens, &[0.6], &[0.1]).unwrap();
        assert_eq!(a, b);
        assert!((a - (sigmoid(1.8) - sigmoid(0.3))).abs() < 1e-15);
    }

    #[test]
    fn oracle_1d_linear_hits_boundary() {
        let ens = linear(-4.0);
        let cfg = AttackConfig {
            clamp_box: ClampBox::Off,
            ..Default::default()
        };
        let o = brute_force_oracle(&ens, &l2(vec![1.0]), &[0.5], &cfg, 101).unwrap();
        // Monotone in x, so the maximizer is one of the two boundary points.
        let left = (sigmoid(-4.0 * 0.4) - sigmoid(-2.0)).abs();
        let right = (sigmoid(-4.0 * 0.6) - sigmoid(-2.0)).abs();
        let expect = left.max(right);
        assert!((o.local_delta - expect).abs() < 1e-12);
        assert!((o.dist - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oracle_dimension_guard() {
        let arch = NetworkArchitecture::uniform(5, 1, 2, Activation::Relu);
        let ens = PosteriorEnsemble::point(arch.clone(), WeightVector::zeros(&arch)).unwrap();
        let r = brute_force_oracle(&ens, &l2(vec![1.0; 5]), &[0.5; 5], &AttackConfig::default(), 3);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig { eps: -0.1, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { pgd_steps: 0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { pgd_step_fraction: Some(1.5), ..Default::default() }
            .validate()
            .is_err());
        let bad_box = ClampBox::Bounds { lo: vec![1.0], hi: vec![0.0] };
        assert!(AttackConfig { clamp_box: bad_box, ..Default::default() }.validate().is_err());
        assert_eq!(AttackConfig::default().step_fraction(), 0.08);
    }

    #[test]
    fn dataset_label_rule_needs_label() {
        let ens = linear(2.0);
        let cfg = AttackConfig {
            label_rule: LabelRule::Dataset,
            ..Default::default()
        };
        assert!(run_attack(&ens, &l2(vec![1.0]), &[0.5], None, &cfg, &[]).is_err());
        assert!(run_attack(&ens, &l2(vec![1.0]), &[0.5], Some(0.0), &cfg, &[]).is_ok());
    }

    #[test]
    fn candidates_only_replace_when_better_and_feasible() {
        let ens = linear(2.0);
        let m = l2(vec![1.0]);
        let cfg = AttackConfig::default();
        let base = run_attack(&ens, &m, &[0.5], None, &cfg, &[]).unwrap();
        let infeasible = run_attack(&ens, &m, &[0.5], None, &cfg, &[vec![0.1]]).unwrap();
        assert_eq!(base, infeasible);
        let worse = run_attack(&ens, &m, &[0.5], None, &cfg, &[vec![0.49]]).unwrap();
        assert_eq!(base, worse);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = fair_fgsm(&linear(2.0), &l2(vec![1.0]), &[0.5], &AttackConfig::default()).unwrap();
        write_results_csv(&path, &[r.clone(), r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "index,dist,pi_origin,pi_adv,local_delta,steps_used");
        assert!(lines.next().unwrap().starts_with("0,"));
        assert!(lines.next().unwrap().starts_with("1,"));
    }
}
