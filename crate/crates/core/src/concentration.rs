//! Tail checks against approximate concentration-of-measure bounds, step
//! Lipschitz estimates, contraction summaries, and moment diagnostics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{column_means, random_orthogonal, sym_eigen_desc, sym_eigenvalues_desc};
use crate::sampler::{apply_step_columns, run_batch, Denoiser, SamplerConfig, TrajectoryRecord, TrajectoryStreams};
use crate::seed::{derive_seed, stream_rng};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

/// Minimum draws for a tail check.
pub const MIN_TAIL_DRAWS: usize = 1000;

/// (C, c, c', d, σ) with the Lipschitz constant L of the probe family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationBound {
    pub big_c: f64,
    pub c: f64,
    pub c_prime: f64,
    pub d: usize,
    pub sigma: f64,
    pub lipschitz: f64,
}

impl ConcentrationBound {
    pub fn new(big_c: f64, c: f64, c_prime: f64, d: usize, sigma: f64, lipschitz: f64) -> Result<Self> {
        if !(big_c >= 0.0 && c >= 0.0 && c_prime >= 0.0) {
            return Err(Error::InvalidConfig(format!("need C, c, c' ≥ 0, got ({big_c}, {c}, {c_prime})")));
        }
        if !(sigma > 0.0 && lipschitz > 0.0) {
            return Err(Error::InvalidConfig(format!("need σ, L > 0, got σ={sigma}, L={lipschitz}")));
        }
        Ok(Self { big_c, c, c_prime, d, sigma, lipschitz })
    }

    /// C = 2, c = 0, σ = ‖Σ^{1/2}‖_op for N(μ, Σ).
    pub fn gaussian(cov: &DMatrix<f64>) -> Result<Self> {
        let top = sym_eigenvalues_desc(cov)[0].max(0.0);
        if top == 0.0 {
            return Err(Error::InvalidCovariance("zero covariance has no σ".into()));
        }
        Self::new(2.0, 0.0, 0.0, cov.nrows(), top.sqrt(), 1.0)
    }

    /// 2·exp(−s²/(2L²)) + 2N·c₁·e^{−c₂d}, written as an ACoM tuple with σ = √2.
    pub fn composite(n_steps: usize, c1: f64, c2: f64, d: usize, lipschitz: f64) -> Result<Self> {
        Self::new(2.0, 2.0 * n_steps as f64 * c1, c2, d, std::f64::consts::SQRT_2, lipschitz)
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0) {
            return Err(Error::InvalidConfig(format!("need L > 0, got {lipschitz}")));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    /// Bound for a source pushed through a map that is L_f-Lipschitz except
    /// with probability c̃·e^{−ĉd}.
    pub fn pushforward(&self, l_f: f64, c_tilde: f64, c_hat: f64) -> Result<Self> {
        Self::new(self.big_c, self.c + c_tilde, self.c_prime.min(c_hat), self.d, l_f * self.sigma, self.lipschitz)
    }

    /// Bound for (x, y) drawn from the product of two sources.
    pub fn product(&self, other: &Self) -> Result<Self> {
        Self::new(
            self.big_c + other.big_c,
            self.c + other.c,
            self.c_prime.min(other.c_prime),
            self.d,
            self.sigma.max(other.sigma),
            self.lipschitz,
        )
    }

    /// C·e^{−(s/(Lσ))²} + c·e^{−c'd}.
    pub fn value(&self, s: f64) -> f64 {
        let r = s / (self.lipschitz * self.sigma);
        self.big_c * (-r * r).exp() + self.c * (-self.c_prime * self.d as f64).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFamily {
    LinearUnit,
    Norm,
    SoftReluProjection,
    Custom,
}

type ProbeFn = Arc<dyn Fn(DVectorView<'_, f64>) -> f64 + Send + Sync>;

/// A scalar function of a sample with a declared Lipschitz constant.
#[derive(Clone)]
pub struct LipschitzProbe {
    family: ProbeFamily,
    name: String,
    direction: Option<DVector<f64>>,
    scale: f64,
    base_lipschitz: f64,
    custom: Option<ProbeFn>,
}

impl fmt::Debug for LipschitzProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzProbe")
            .field("family", &self.family)
            .field("name", &self.name)
            .field("scale", &self.scale)
            .field("lipschitz", &self.lipschitz())
            .finish()
    }
}

fn unit(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidConfig("probe direction must be a nonzero finite vector".into()));
    }
    Ok(v / n)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LipschitzProbe {
    /// x ↦ vᵀx / ‖v‖.
    pub fn linear_unit(v: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            family: ProbeFamily::LinearUnit,
            name: "linear_unit".into(),
            direction: Some(unit(v)?),
            scale: 1.0,
            base_lipschitz: 1.0,
            custom: None,
        })
    }

    /// Linear probe along a uniformly random unit direction.
    pub fn random_linear_unit(d: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        loop {
            let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Ok(p) = Self::linear_unit(&v) {
                return p;
            }
        }
    }

    /// x ↦ ‖x‖₂.
    pub fn norm() -> Self {
        Self {
            family: ProbeFamily::Norm,
            name: "norm".into(),
            direction: None,
            scale: 1.0,
            base_lipschitz: 1.0,
            custom: None,
        }
    }

    /// x ↦ softplus(vᵀx / ‖v‖).
    pub fn soft_relu_projection(v: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            family: ProbeFamily::SoftReluProjection,
            name: "soft_relu_projection".into(),
            direction: Some(unit(v)?),
            scale: 1.0,
            base_lipschitz: 1.0,
            custom: None,
        })
    }

    /// A user function with a declared, uncertified Lipschitz constant.
    pub fn custom<F>(name: &str, lipschitz: f64, f: F) -> Result<Self>
    where
        F: Fn(DVectorView<'_, f64>) -> f64 + Send + Sync + 'static,
    {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidConfig(format!("declared Lipschitz constant must be > 0, got {lipschitz}")));
        }
        Ok(Self {
            family: ProbeFamily::Custom,
            name: name.into(),
            direction: None,
            scale: 1.0,
            base_lipschitz: lipschitz,
            custom: Some(Arc::new(f)),
        })
    }

    /// c·f, with L scaled by |c|.
    pub fn scaled(mut self, c: f64) -> Result<Self> {
        if !(c != 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!("probe scale must be finite and nonzero, got {c}")));
        }
        self.scale *= c;
        Ok(self)
    }

    pub fn family(&self) -> ProbeFamily {
        self.family
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz(&self) -> f64 {
        self.scale.abs() * self.base_lipschitz
    }

    pub fn certified(&self) -> bool {
        self.family != ProbeFamily::Custom
    }

    pub fn direction(&self) -> Option<&DVector<f64>> {
        self.direction.as_ref()
    }

    pub fn eval(&self, x: DVectorView<'_, f64>) -> f64 {
        let raw = match self.family {
            ProbeFamily::LinearUnit => self.direction.as_ref().map_or(f64::NAN, |v| v.dot(&x)),
            ProbeFamily::Norm => x.norm(),
            ProbeFamily::SoftReluProjection => self.direction.as_ref().map_or(f64::NAN, |v| softplus(v.dot(&x))),
            ProbeFamily::Custom => self.custom.as_ref().map_or(f64::NAN, |f| f(x)),
        };
        self.scale * raw
    }
}

/// Wilson score interval for k successes out of n.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub probe: String,
    pub family: ProbeFamily,
    pub certified: bool,
    pub lipschitz: f64,
    pub n: usize,
    /// Sample mean standing in for E f.
    pub mean: f64,
    pub s_grid: Vec<f64>,
    /// Empirical P(|f − mean| > s).
    pub survival: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub bound: Vec<f64>,
    /// bound − survival.
    pub margin: Vec<f64>,
    /// Lower CI above the bound.
    pub violations: Vec<bool>,
    pub bound_params: ConcentrationBound,
}

impl TailReport {
    pub fn violation_count(&self) -> usize {
        self.violations.iter().filter(|&&v| v).count()
    }
}

/// `count` evenly spaced thresholds on [lo, hi].
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

fn probe_values(samples: &DMatrix<f64>, probe: &LipschitzProbe) -> Result<Vec<f64>> {
    let xt = samples.transpose();
    let values: Vec<f64> = xt.column_iter().map(|c| probe.eval(c)).collect();
    if let Some(row) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::ProbeFailure { row });
    }
    Ok(values)
}

/// Empirical tails of `probe` over the rows of `samples` against `bound`.
///
/// `bound.lipschitz` is replaced by the probe's constant.
pub fn tail_check(
    samples: &DMatrix<f64>,
    probe: &LipschitzProbe,
    bound: &ConcentrationBound,
    s_grid: &[f64],
) -> Result<TailReport> {
    let n = samples.nrows();
    if n < MIN_TAIL_DRAWS {
        return Err(Error::InsufficientSamples { needed: MIN_TAIL_DRAWS, got: n });
    }
    if s_grid.is_empty() || s_grid.iter().any(|&s| !(s > 0.0)) || s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidRange("s grid must be positive and strictly increasing".into()));
    }
    if let Some(v) = probe.direction() {
        if v.len() != samples.ncols() {
            return Err(Error::DimensionMismatch { expected: samples.ncols(), got: v.len() });
        }
    }
    let bound = bound.with_lipschitz(probe.lipschitz())?;
    let values = probe_values(samples, probe)?;
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean).abs()).collect();
    dev.sort_by(f64::total_cmp);

    let mut survival = Vec::with_capacity(s_grid.len());
    let mut ci_lo = Vec::with_capacity(s_grid.len());
    let mut ci_hi = Vec::with_capacity(s_grid.len());
    let mut bounds = Vec::with_capacity(s_grid.len());
    let mut margin = Vec::with_capacity(s_grid.len());
    let mut violations = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let exceed = n - dev.partition_point(|&v| v <= s);
        let p = exceed as f64 / n as f64;
        let (lo, hi) = wilson_interval(exceed, n);
        let b = bound.value(s);
        survival.push(p);
        ci_lo.push(lo);
        ci_hi.push(hi);
        bounds.push(b);
        margin.push(b - p);
        violations.push(lo > b);
    }
    Ok(TailReport {
        probe: probe.name().to_string(),
        family: probe.family(),
        certified: probe.certified(),
        lipschitz: probe.lipschitz(),
        n,
        mean,
        s_grid: s_grid.to_vec(),
        survival,
        ci_lo,
        ci_hi,
        bound: bounds,
        margin,
        violations,
        bound_params: bound,
    })
}

/// Tails of sampler output against 2·exp(−s²/(2L_f²)) + 2N·c₁·e^{−c₂d}.
pub fn composite_tail_check(
    samples: &DMatrix<f64>,
    probes: &[LipschitzProbe],
    n_steps: usize,
    c1: f64,
    c2: f64,
    s_grid: &[f64],
) -> Result<Vec<TailReport>> {
    let bound = ConcentrationBound::composite(n_steps, c1, c2, samples.ncols(), 1.0)?;
    probes.par_iter().map(|p| tail_check(samples, p, &bound, s_grid)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub step: usize,
    /// Max over base points.
    pub max: f64,
    pub per_probe: Vec<f64>,
}

/// Upper estimate of ‖∇R^{(i)}‖_op with the injected noise frozen.
///
/// Base points are drawn from the step-`i` marginal of the sampler. At each,
/// the full Jacobian is built from central differences with spacing
/// `epsilon` (default 1e-5·t_i) and its largest singular value is taken.
pub fn estimate_step_lipschitz(
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    step: usize,
    n_probes: usize,
    epsilon: Option<f64>,
) -> Result<LipschitzEstimate> {
    let n = cfg.schedule.len();
    if step >= n {
        return Err(Error::InvalidRange(format!("step {step} outside 0..{n}")));
    }
    if n_probes == 0 {
        return Err(Error::InvalidConfig("n_probes must be ≥ 1".into()));
    }
    let d = denoiser.dimension();
    let eps = epsilon.unwrap_or(1e-5 * cfg.schedule.t(step));
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference spacing must be > 0, got {eps}")));
    }
    let streams: Vec<TrajectoryStreams> = (0..n_probes as u64).map(TrajectoryStreams::independent).collect();
    let mut base_cfg = cfg.clone();
    base_cfg.record_trajectory = false;
    let bases = run_batch(&base_cfg, denoiser, &streams, &[step])?.snapshots.remove(0).1;

    let per_probe = (0..n_probes)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(derive_seed(cfg.seed, &["lipschitz".into(), step.into()]), j as u64);
            let noise = DVector::from_fn(d, |_, _| cfg.s_noise * rng.sample::<f64, _>(StandardNormal));
            let x = bases.column(j);
            let mut pts = DMatrix::zeros(d, 2 * d);
            let mut eps_cols = DMatrix::zeros(d, 2 * d);
            for k in 0..d {
                let mut plus = x.into_owned();
                plus[k] += eps;
                let mut minus = x.into_owned();
                minus[k] -= eps;
                pts.set_column(2 * k, &plus);
                pts.set_column(2 * k + 1, &minus);
                eps_cols.set_column(2 * k, &noise);
                eps_cols.set_column(2 * k + 1, &noise);
            }
            let out = apply_step_columns(&pts, step, cfg, denoiser, &eps_cols)?;
            let jac = DMatrix::from_fn(d, d, |r, k| (out[(r, 2 * k)] - out[(r, 2 * k + 1)]) / (2.0 * eps));
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure { step, what: "non-finite Jacobian difference".into() });
            }
            let top = sym_eigenvalues_desc(&(jac.transpose() * &jac))[0].max(0.0);
            Ok(top.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = per_probe.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzEstimate { step, max, per_probe })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContraction {
    pub class_id: usize,
    pub trajectories: usize,
    pub mean_decrease: Vec<f64>,
    pub var_decrease: Vec<f64>,
    pub fraction_decreasing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub trajectories: usize,
    pub steps: usize,
    /// Mean over trajectories of ‖x^{(i)}‖ − ‖x^{(i+1)}‖, per step.
    pub mean_decrease: Vec<f64>,
    pub var_decrease: Vec<f64>,
    /// Fraction of all (trajectory, step) pairs with ‖x^{(i+1)}‖ ≤ ‖x^{(i)}‖.
    pub fraction_decreasing: f64,
    /// Same, excluding the first step.
    pub fraction_decreasing_after_first: f64,
    pub per_class: Vec<ClassContraction>,
}

fn decrease_stats(records: &[&TrajectoryRecord], steps: usize) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let m = records.len() as f64;
    let mut mean = vec![0.0; steps];
    let mut var = vec![0.0; steps];
    let mut dec_all = 0;
    let mut dec_after = 0;
    for i in 0..steps {
        let diffs: Vec<f64> = records.iter().map(|r| r.step_norms[i] - r.step_norms[i + 1]).collect();
        let mu = diffs.iter().sum::<f64>() / m;
        mean[i] = mu;
        var[i] = diffs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
        let dec = diffs.iter().filter(|&&v| v >= 0.0).count();
        dec_all += dec;
        if i > 0 {
            dec_after += dec;
        }
    }
    (mean, var, dec_all, dec_after)
}

/// Per-step norm decrease statistics. `classes`, if given, labels each record.
pub fn contraction_report(records: &[TrajectoryRecord], classes: Option<&[usize]>) -> Result<ContractionReport> {
    let first = records.first().ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    let steps = first.step_norms.len().saturating_sub(1);
    if steps == 0 || records.iter().any(|r| r.step_norms.len() != steps + 1) {
        return Err(Error::Malformed("trajectory records have inconsistent or empty step norms".into()));
    }
    if let Some(c) = classes {
        if c.len() != records.len() {
            return Err(Error::DimensionMismatch { expected: records.len(), got: c.len() });
        }
    }
    let all: Vec<&TrajectoryRecord> = records.iter().collect();
    let (mean_decrease, var_decrease, dec_all, dec_after) = decrease_stats(&all, steps);
    let m = records.len();
    let mut per_class = Vec::new();
    if let Some(labels) = classes {
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let members: Vec<&TrajectoryRecord> =
                records.iter().zip(labels).filter(|(_, &c)| c == id).map(|(r, _)| r).collect();
            let (mean, var, dec, _) = decrease_stats(&members, steps);
            per_class.push(ClassContraction {
                class_id: id,
                trajectories: members.len(),
                mean_decrease: mean,
                var_decrease: var,
                fraction_decreasing: dec as f64 / (members.len() * steps) as f64,
            });
        }
    }
    Ok(ContractionReport {
        trajectories: m,
        steps,
        mean_decrease,
        var_decrease,
        fraction_decreasing: dec_all as f64 / (m * steps) as f64,
        fraction_decreasing_after_first: if steps > 1 {
            dec_after as f64 / (m * (steps - 1)) as f64
        } else {
            1.0
        },
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiagnostics {
    pub class_id: usize,
    pub n: usize,
    pub d: usize,
    /// ‖μ̂‖₂.
    pub mean_norm: f64,
    /// (q, K̂_q) with K̂_q = max_v E|(x−μ)ᵀv|^q · d^{q/2} over unit v.
    pub moment_constants: Vec<(u32, f64)>,
    /// Empirical Var(xᵀx).
    pub var_quadratic_identity: f64,
    /// Empirical Var(xᵀCx) for random projections C of unit operator norm.
    pub var_quadratic_projections: Vec<f64>,
    pub gram_s_min: f64,
    pub gram_s_max: f64,
    pub gram_condition_ratio: f64,
    /// s_min/s_max ≤ 1e-10.
    pub gram_singular: bool,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Moment, quadratic-form and conditioning diagnostics per class.
pub fn assumption_diagnostics(
    data: &LabeledDataset,
    n_directions: usize,
    q_max: u32,
    seed: u64,
) -> Result<Vec<ClassDiagnostics>> {
    let d = data.d();
    if n_directions == 0 {
        return Err(Error::InvalidConfig("n_directions must be ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let directions: Vec<DVector<f64>> = (0..n_directions)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            v / n
        })
        .collect();
    let projections: Vec<DMatrix<f64>> = (0..n_directions.min(8))
        .map(|_| {
            let q = random_orthogonal(d, &mut rng);
            let p = q.columns(0, d.div_ceil(2)).into_owned();
            &p * p.transpose()
        })
        .collect();

    Ok((0..data.k())
        .into_par_iter()
        .map(|c| {
            let x = data.class_rows(c);
            let n = x.nrows();
            let mu = column_means(&x);
            let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
            let moment_constants = (1..=q_max)
                .map(|q| {
                    let k = directions
                        .iter()
                        .map(|v| {
                            let proj = &xc * v;
                            proj.iter().map(|p| p.abs().powi(q as i32)).sum::<f64>() / n as f64
                        })
                        .fold(0.0, f64::max);
                    (q, k * (d as f64).powf(q as f64 / 2.0))
                })
                .collect();
            let quad: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
            let var_quadratic_projections = projections
                .iter()
                .map(|p| {
                    let xp = &x * p;
                    let vals: Vec<f64> = xp.row_iter().zip(x.row_iter()).map(|(a, r)| a.dot(&r)).collect();
                    variance(&vals)
                })
                .collect();
            let gram = if n <= d {
                sym_eigenvalues_desc(&(&x * x.transpose()))
            } else {
                // rank ≤ d < n, so the n×n Gram has zero eigenvalues
                let mut ev = sym_eigenvalues_desc(&(x.transpose() * &x));
                ev.push(0.0);
                ev
            };
            let s_max = gram[0].max(0.0);
            let s_min = gram.last().copied().unwrap_or(0.0).max(0.0);
            let ratio = if s_max > 0.0 { s_min / s_max } else { 0.0 };
            ClassDiagnostics {
                class_id: c,
                n,
                d,
                mean_norm: mu.norm(),
                moment_constants,
                var_quadratic_identity: variance(&quad),
                var_quadratic_projections,
                gram_s_min: s_min,
                gram_s_max: s_max,
                gram_condition_ratio: ratio,
                gram_singular: ratio <= 1e-10,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub class_id: usize,
    pub p: f64,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// Quantiles at 5, 25, 50, 75, 95 percent.
    pub quantiles: [f64; 5],
    pub histogram: Vec<HistogramBin>,
}

fn lp_norm(x: DVectorView<'_, f64>, p: f64) -> f64 {
    let m = x.amax();
    if m == 0.0 {
        return 0.0;
    }
    m * x.iter().map(|v| (v.abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-class ℓ_p norm summaries with `bins`-bin histograms.
pub fn norm_distributions(data: &LabeledDataset, p_list: &[f64], bins: usize) -> Result<Vec<NormSummary>> {
    if p_list.iter().any(|&p| !(p >= 1.0)) {
        return Err(Error::InvalidConfig("p must be ≥ 1".into()));
    }
    let bins = bins.max(1);
    let mut out = Vec::new();
    for c in 0..data.k() {
        let x = data.class_rows(c).transpose();
        if x.ncols() == 0 {
            continue;
        }
        for &p in p_list {
            let mut norms: Vec<f64> = x.column_iter().map(|col| lp_norm(col.as_view(), p)).collect();
            norms.sort_by(f64::total_cmp);
            let (min, max) = (norms[0], norms[norms.len() - 1]);
            let n = norms.len() as f64;
            let (mean, sd) = if min == max {
                (min, 0.0)
            } else {
                let mean = norms.iter().sum::<f64>() / n;
                (mean, (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
            };
            let histogram = if max == min {
                vec![HistogramBin { lo: min, hi: max, count: norms.len() }]
            } else {
                let width = (max - min) / bins as f64;
                let mut counts = vec![0usize; bins];
                for v in &norms {
                    let b = (((v - min) / width) as usize).min(bins - 1);
                    counts[b] += 1;
                }
                counts
                    .into_iter()
                    .enumerate()
                    .map(|(b, count)| HistogramBin {
                        lo: min + b as f64 * width,
                        hi: if b + 1 == bins { max } else { min + (b + 1) as f64 * width },
                        count,
                    })
                    .collect()
            };
            out.push(NormSummary {
                class_id: c,
                p,
                mean,
                sd,
                min,
                max,
                quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&norms, q)),
                histogram,
            });
        }
    }
    Ok(out)
}

/// Analytic operator norm of one sampler step for the single Gaussian
/// N(μ, U diag(λ) Uᵀ) with frozen noise.
pub fn affine_step_norm(eigenvalues: &[f64], cfg: &SamplerConfig, step: usize) -> f64 {
    let t = cfg.schedule.t(step);
    let t_hat = t * (1.0 + cfg.gamma);
    let t_next = cfg.schedule.t(step + 1);
    let h = t_next - t_hat;
    eigenvalues
        .iter()
        .map(|&l| {
            let a = t_hat / (l + t_hat * t_hat);
            let euler = 1.0 + h * a;
            if t_next == 0.0 {
                euler.abs()
            } else {
                (1.0 + h / 2.0 * (a + t_next / (l + t_next * t_next) * euler)).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Eigenvalues (descending) of a covariance, for [`affine_step_norm`].
pub fn covariance_eigenvalues(cov: &DMatrix<f64>) -> Vec<f64> {
    sym_eigen_desc(cov).0.iter().map(|v| v.max(0.0)).collect()
}
