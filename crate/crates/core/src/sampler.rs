//! EDM stochastic sampler with a pluggable denoiser.
//!
//! Trajectories are run in lockstep batches stored as d×m matrices (one
//! trajectory per column). Each trajectory owns two ChaCha streams under the
//! run seed: one for its initial draw and one for the per-step injected
//! noise, so results do not depend on how trajectories are batched and two
//! trajectories can share injected noise while starting apart.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Trajectories per lockstep batch in parallel generation. Fixed so output
/// never depends on the thread count.
pub const BATCH_TRAJECTORIES: usize = 128;

/// Evaluates D(x, t). Implementations must be pure.
pub trait Denoiser: Sync {
    fn dimension(&self) -> usize;

    fn denoise(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;

    /// Denoise every column of a d×m matrix.
    fn denoise_columns(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let outs: Vec<DVector<f64>> = xs
            .column_iter()
            .map(|c| self.denoise(&c.into_owned(), t))
            .collect();
        let rows = outs.first().map_or(xs.nrows(), |o| o.len());
        if let Some(bad) = outs.iter().find(|o| o.len() != rows) {
            return DMatrix::zeros(bad.len(), xs.ncols());
        }
        DMatrix::from_fn(rows, xs.ncols(), |i, j| outs[j][i])
    }
}

/// Adapts a closure `(x, t) -> D(x, t)` into a [`Denoiser`].
pub struct FnDenoiser<F> {
    dimension: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Sync,
{
    pub fn new(dimension: usize, f: F) -> Self {
        Self { dimension, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Sync,
{
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn denoise(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(x, t)
    }
}

/// t_0 > t_1 > … > t_{N−1} with the ρ-warped spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: Vec<f64>,
    rho: f64,
    t_max: f64,
    t_min: f64,
}

impl NoiseSchedule {
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Number of noise levels N (also the number of sampler steps).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// t_i, with t_N = 0.
    pub fn t(&self, i: usize) -> f64 {
        self.steps.get(i).copied().unwrap_or(0.0)
    }
}

/// t_i = (t_max^{1/ρ} + i/(N−1)·(t_min^{1/ρ} − t_max^{1/ρ}))^ρ.
pub fn build_schedule(n: usize, t_max: f64, t_min: f64, rho: f64) -> Result<NoiseSchedule> {
    if n < 2 {
        return Err(Error::InvalidRange(format!("schedule needs N ≥ 2 steps, got {n}")));
    }
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "need t_max > t_min > 0, got t_max={t_max}, t_min={t_min}"
        )));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::InvalidRange(format!("need rho ≥ 1, got {rho}")));
    }
    let hi = t_max.powf(1.0 / rho);
    let lo = t_min.powf(1.0 / rho);
    let mut steps: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    // pin endpoints against powf round-off
    steps[0] = t_max;
    steps[n - 1] = t_min;
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidRange("schedule is not strictly decreasing".into()));
    }
    Ok(NoiseSchedule { steps, rho, t_max, t_min })
}

/// Serializable sampler hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub rho: f64,
    pub gamma: f64,
    pub s_noise: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 64, t_max: 80.0, t_min: 0.002, rho: 7.0, gamma: 0.0, s_noise: 1.0 }
    }
}

impl SamplerSettings {
    pub fn config(&self, seed: u64) -> Result<SamplerConfig> {
        let schedule = build_schedule(self.steps, self.t_max, self.t_min, self.rho)?;
        SamplerConfig::new(schedule, self.gamma, self.s_noise, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub gamma: f64,
    pub s_noise: f64,
    pub seed: u64,
    pub record_trajectory: bool,
    /// Coordinates whose magnitudes are recorded at every step.
    pub record_pixels: Option<Vec<usize>>,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, gamma: f64, s_noise: f64, seed: u64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be ≥ 0, got {gamma}")));
        }
        if !(s_noise > 0.0 && s_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!("s_noise must be > 0, got {s_noise}")));
        }
        Ok(Self { schedule, gamma, s_noise, seed, record_trajectory: false, record_pixels: None })
    }

    pub fn with_recording(mut self, on: bool) -> Self {
        self.record_trajectory = on;
        self
    }

    pub fn with_pixels(mut self, coords: Vec<usize>) -> Self {
        self.record_pixels = Some(coords);
        self
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }
}

/// Per-step instrumentation of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// ‖x^{(i)}‖₂ for i = 0..=N.
    pub step_norms: Vec<f64>,
    /// ‖x̂^{(i)}‖₂ for i = 0..N.
    pub post_injection_norms: Vec<f64>,
    /// |x^{(i)}_j| for the recorded coordinates, one row per step 0..=N.
    pub coordinate_norms: Option<Vec<Vec<f64>>>,
    pub final_state: DVector<f64>,
}

/// Which streams a trajectory draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryStreams {
    pub init: u64,
    pub noise: u64,
}

impl TrajectoryStreams {
    /// Independent streams for trajectory `index`.
    pub fn independent(index: u64) -> Self {
        Self { init: 2 * index, noise: 2 * index + 1 }
    }
}

/// Result of a lockstep batch.
#[derive(Debug, Clone)]
pub struct BatchRun {
    /// d×m final states.
    pub finals: DMatrix<f64>,
    /// Present when the config records trajectories.
    pub records: Option<Vec<TrajectoryRecord>>,
    /// (step, d×m states x^{(step)}) for each requested snapshot.
    pub snapshots: Vec<(usize, DMatrix<f64>)>,
}

fn ensure_finite(xs: &DMatrix<f64>, step: usize, what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure { step, what: format!("non-finite {what}") })
    }
}

fn checked_denoise(d: &dyn Denoiser, xs: &DMatrix<f64>, t: f64, step: usize) -> Result<DMatrix<f64>> {
    let out = d.denoise_columns(xs, t);
    if out.nrows() != xs.nrows() || out.ncols() != xs.ncols() {
        return Err(Error::DimensionMismatch { expected: xs.nrows(), got: out.nrows() });
    }
    ensure_finite(&out, step, "denoiser output")?;
    Ok(out)
}

/// One loop body of the sampler applied to every column of `xs` in place.
///
/// `eps` is the injected noise ε ~ N(0, S_noise²I), already scaled. Returns
/// the post-injection states x̂.
fn step_columns(
    xs: &mut DMatrix<f64>,
    i: usize,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    eps: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let n = cfg.schedule.len();
    if i >= n {
        return Err(Error::InvalidRange(format!("step {i} outside 0..{n}")));
    }
    if xs.nrows() != denoiser.dimension() {
        return Err(Error::DimensionMismatch { expected: denoiser.dimension(), got: xs.nrows() });
    }
    let t_i = cfg.schedule.t(i);
    let t_next = cfg.schedule.t(i + 1);
    let gamma = cfg.gamma;
    let t_hat = t_i * (1.0 + gamma);

    if let Some(eps) = eps {
        let scale = t_i * (gamma * (2.0 + gamma)).sqrt();
        if scale != 0.0 {
            *xs += eps * scale;
        }
    }
    let x_hat = xs.clone();

    let denoised = checked_denoise(denoiser, &x_hat, t_hat, i)?;
    let d_i = (&x_hat - denoised) / t_hat;
    let h = t_next - t_hat;
    let euler = &x_hat + &d_i * h;
    if t_next != 0.0 {
        let denoised_next = checked_denoise(denoiser, &euler, t_next, i)?;
        let d_next = (&euler - denoised_next) / t_next;
        *xs = &x_hat + (d_i + d_next) * (h / 2.0);
    } else {
        *xs = euler;
    }
    ensure_finite(xs, i, "state")?;
    Ok(x_hat)
}

fn draw_normals(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// x^{(i+1)} from x^{(i)}, drawing ε from `rng`.
pub fn sample_step(
    x: &DVector<f64>,
    i: usize,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let eps = draw_normals(rng, x.len(), cfg.s_noise);
    apply_step(x, i, cfg, denoiser, &eps)
}

/// x^{(i+1)} from x^{(i)} with the injected noise ε frozen.
pub fn apply_step(
    x: &DVector<f64>,
    i: usize,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    if eps.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: eps.len() });
    }
    let mut xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let eps = DMatrix::from_column_slice(x.len(), 1, eps.as_slice());
    step_columns(&mut xs, i, cfg, denoiser, Some(&eps))?;
    Ok(xs.column(0).into_owned())
}

/// Apply step `i` with frozen noise to every column of `xs` (d×m).
pub fn apply_step_columns(
    xs: &DMatrix<f64>,
    i: usize,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    eps: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut out = xs.clone();
    step_columns(&mut out, i, cfg, denoiser, Some(eps))?;
    Ok(out)
}

/// Run trajectories with the given streams in lockstep.
pub fn run_batch(
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    streams: &[TrajectoryStreams],
    snapshot_steps: &[usize],
) -> Result<BatchRun> {
    let d = denoiser.dimension();
    let m = streams.len();
    let n_steps = cfg.schedule.len();
    if let Some(&bad) = snapshot_steps.iter().find(|&&s| s > n_steps) {
        return Err(Error::InvalidRange(format!("snapshot step {bad} beyond N = {n_steps}")));
    }
    let t0 = cfg.schedule.t(0);
    let mut noise_rngs: Vec<ChaCha8Rng> = Vec::with_capacity(m);
    let mut xs = DMatrix::zeros(d, m);
    for (j, s) in streams.iter().enumerate() {
        let mut init = stream_rng(cfg.seed, s.init);
        xs.set_column(j, &draw_normals(&mut init, d, t0));
        noise_rngs.push(stream_rng(cfg.seed, s.noise));
    }

    let pixels = cfg.record_pixels.as_deref().unwrap_or(&[]);
    if let Some(&bad) = pixels.iter().find(|&&p| p >= d) {
        return Err(Error::InvalidRange(format!("recorded coordinate {bad} ≥ d = {d}")));
    }
    let record = cfg.record_trajectory;
    let mut step_norms = vec![Vec::with_capacity(n_steps + 1); if record { m } else { 0 }];
    let mut post_norms = vec![Vec::with_capacity(n_steps); if record { m } else { 0 }];
    let mut coords: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(n_steps + 1); if record && !pixels.is_empty() { m } else { 0 }];
    let mut snapshots = Vec::new();

    let observe = |xs: &DMatrix<f64>,
                   step_norms: &mut Vec<Vec<f64>>,
                   coords: &mut Vec<Vec<Vec<f64>>>| {
        for (j, col) in xs.column_iter().enumerate() {
            if record {
                step_norms[j].push(col.norm());
                if !pixels.is_empty() {
                    coords[j].push(pixels.iter().map(|&p| col[p].abs()).collect());
                }
            }
        }
    };

    observe(&xs, &mut step_norms, &mut coords);
    if snapshot_steps.contains(&0) {
        snapshots.push((0, xs.clone()));
    }
    let mut eps = DMatrix::zeros(d, m);
    for i in 0..n_steps {
        for (j, rng) in noise_rngs.iter_mut().enumerate() {
            eps.set_column(j, &draw_normals(rng, d, cfg.s_noise));
        }
        let x_hat = step_columns(&mut xs, i, cfg, denoiser, Some(&eps))?;
        if record {
            for (j, col) in x_hat.column_iter().enumerate() {
                post_norms[j].push(col.norm());
            }
        }
        observe(&xs, &mut step_norms, &mut coords);
        if snapshot_steps.contains(&(i + 1)) {
            snapshots.push((i + 1, xs.clone()));
        }
    }

    let records = record.then(|| {
        let mut coords = coords.into_iter();
        step_norms
            .into_iter()
            .zip(post_norms)
            .enumerate()
            .map(|(j, (s, p))| TrajectoryRecord {
                step_norms: s,
                post_injection_norms: p,
                coordinate_norms: if pixels.is_empty() { None } else { coords.next() },
                final_state: xs.column(j).into_owned(),
            })
            .collect()
    });
    Ok(BatchRun { finals: xs, records, snapshots })
}

/// One trajectory: x^{(0)} ~ N(0, t_0²I) then N steps.
pub fn run_sampler(cfg: &SamplerConfig, denoiser: &dyn Denoiser) -> Result<(DVector<f64>, TrajectoryRecord)> {
    let cfg = cfg.clone().with_recording(true);
    let run = run_batch(&cfg, denoiser, &[TrajectoryStreams::independent(0)], &[])?;
    let record = run.records.and_then(|r| r.into_iter().next()).expect("recording enabled");
    Ok((record.final_state.clone(), record))
}

/// Many independent trajectories, batched and run in parallel.
#[derive(Debug, Clone)]
pub struct Generated {
    /// n×d final states, row j from trajectory j.
    pub samples: DMatrix<f64>,
    pub records: Option<Vec<TrajectoryRecord>>,
    /// (step, n×d states) for each requested snapshot.
    pub snapshots: Vec<(usize, DMatrix<f64>)>,
}

/// Trajectories `0..n` under `cfg.seed`.
pub fn generate(
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    n: usize,
    snapshot_steps: &[usize],
) -> Result<Generated> {
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(BATCH_TRAJECTORIES)
        .map(|start| (start, (start + BATCH_TRAJECTORIES).min(n)))
        .collect();
    let runs: Vec<BatchRun> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let streams: Vec<TrajectoryStreams> =
                (lo..hi).map(|j| TrajectoryStreams::independent(j as u64)).collect();
            run_batch(cfg, denoiser, &streams, snapshot_steps)
        })
        .collect::<Result<_>>()?;

    let d = denoiser.dimension();
    let mut samples = DMatrix::zeros(n, d);
    let mut records = cfg.record_trajectory.then(|| Vec::with_capacity(n));
    let mut snaps: Vec<(usize, DMatrix<f64>)> = Vec::new();
    let mut snap_steps: Vec<usize> = snapshot_steps.to_vec();
    snap_steps.sort_unstable();
    snap_steps.dedup();
    for &s in &snap_steps {
        snaps.push((s, DMatrix::zeros(n, d)));
    }
    for (run, &(lo, hi)) in runs.into_iter().zip(&chunks) {
        samples.rows_mut(lo, hi - lo).copy_from(&run.finals.transpose());
        if let (Some(all), Some(r)) = (records.as_mut(), run.records) {
            all.extend(r);
        }
        for (step, states) in run.snapshots {
            if let Some((_, dst)) = snaps.iter_mut().find(|(s, _)| *s == step) {
                dst.rows_mut(lo, hi - lo).copy_from(&states.transpose());
            }
        }
    }
    Ok(Generated { samples, records, snapshots: snaps })
}

/// For each pair, ‖x^{(i)} − x̃^{(i)}‖ / ‖x^{(0)} − x̃^{(0)}‖ at steps 0..=N
/// for two trajectories with independent starts and shared injected noise.
pub fn paired_trajectories(
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    n_pairs: usize,
) -> Result<Vec<Vec<f64>>> {
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be ≥ 1".into()));
    }
    let steps: Vec<usize> = (0..=cfg.schedule.len()).collect();
    let cfg = cfg.clone().with_recording(false);
    let chunk = BATCH_TRAJECTORIES / 2;
    let starts: Vec<usize> = (0..n_pairs).step_by(chunk).collect();
    let parts: Vec<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + chunk).min(n_pairs);
            let mut streams = Vec::with_capacity(2 * (hi - lo));
            for p in lo..hi {
                let p = p as u64;
                streams.push(TrajectoryStreams { init: 4 * p, noise: 4 * p + 1 });
                streams.push(TrajectoryStreams { init: 4 * p + 2, noise: 4 * p + 1 });
            }
            let run = run_batch(&cfg, denoiser, &streams, &steps)?;
            let ratios = (0..hi - lo)
                .map(|q| {
                    let dist = |states: &DMatrix<f64>| {
                        (states.column(2 * q) - states.column(2 * q + 1)).norm()
                    };
                    let base = dist(&run.snapshots[0].1);
                    run.snapshots.iter().map(|(_, s)| dist(s) / base).collect()
                })
                .collect();
            Ok(ratios)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}
