//! Generalized linear classifiers trained by minibatch SGD, the closed-form
//! minimum-norm interpolator, and test-error evaluation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::sym_eigenvalues_desc;
use crate::mixtures::ClassConditionalModel;
use crate::seed::stream_rng;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// ‖y − softmax(Wᵀx)‖² per sample.
    SoftmaxMse,
    /// (y − σ(z))² on a single logit z; binary only.
    SigmoidMse,
    CrossEntropy,
    /// ‖Wᵀx − y‖² per sample; the least-squares objective whose SGD limit
    /// is the minimum-norm interpolator.
    Interpolation,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::SoftmaxMse => "softmax_mse",
            Objective::SigmoidMse => "sigmoid_mse",
            Objective::CrossEntropy => "cross_entropy",
            Objective::Interpolation => "interpolation",
        }
    }
}

/// W (d×k) together with its initialization.
///
/// Sigmoid-MSE classifiers are stored as d×2 with column 0 fixed at zero, so
/// column 1 is the single logit and argmax picks class 1 iff the logit is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    w: DMatrix<f64>,
    w0: DMatrix<f64>,
    objective: Objective,
}

impl LinearClassifier {
    pub fn new(w: DMatrix<f64>, w0: DMatrix<f64>, objective: Objective) -> Result<Self> {
        if w.shape() != w0.shape() {
            return Err(Error::DimensionMismatch { expected: w0.len(), got: w.len() });
        }
        if w.iter().chain(w0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure { step: 0, what: "non-finite classifier weights".into() });
        }
        Ok(Self { w, w0, objective })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn init(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn dimension(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w.ncols()
    }

    /// n×k scores XW.
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.w.nrows() {
            return Err(Error::DimensionMismatch { expected: self.w.nrows(), got: x.ncols() });
        }
        Ok(x * &self.w)
    }

    /// argmax per row, ties to the smallest index.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let z = self.scores(x)?;
        Ok(z.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Cosine-anneal the rate to zero over the run; otherwise constant.
    pub cosine: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stop after this many epochs without held-out improvement.
    pub patience: usize,
    pub min_delta: f64,
    /// Stop once ‖XW − Y‖_F ≤ tol·‖Y‖_F (interpolation objective only).
    pub train_tolerance: Option<f64>,
    /// Entries of a random W0 are N(0, init_scale²/d).
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            cosine: true,
            batch_size: 32,
            epochs: 200,
            patience: 20,
            min_delta: 1e-6,
            train_tolerance: None,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: LinearClassifier,
    pub curves: Vec<EpochStats>,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_train_loss(&self) -> f64 {
        self.curves.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean per-sample loss and, if asked, dL/dZ (n×k, not yet divided by n).
fn loss_and_grad(
    objective: Objective,
    z: &DMatrix<f64>,
    labels: &[usize],
    want_grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let (n, k) = z.shape();
    let mut g = want_grad.then(|| DMatrix::zeros(n, k));
    let mut total = 0.0;
    for r in 0..n {
        let row: Vec<f64> = z.row(r).iter().copied().collect();
        let y = labels[r];
        match objective {
            Objective::SoftmaxMse => {
                let p = softmax_row(&row);
                let resid: Vec<f64> =
                    p.iter().enumerate().map(|(j, &pj)| pj - if j == y { 1.0 } else { 0.0 }).collect();
                total += resid.iter().map(|v| v * v).sum::<f64>();
                if let Some(g) = g.as_mut() {
                    let pg: f64 = p.iter().zip(&resid).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        g[(r, j)] = 2.0 * p[j] * (resid[j] - pg);
                    }
                }
            }
            Objective::SigmoidMse => {
                let p = sigmoid(row[1]);
                let target = if y == 1 { 1.0 } else { 0.0 };
                total += (p - target).powi(2);
                if let Some(g) = g.as_mut() {
                    g[(r, 1)] = 2.0 * (p - target) * p * (1.0 - p);
                }
            }
            Objective::CrossEntropy => {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
                if let Some(g) = g.as_mut() {
                    for j in 0..k {
                        g[(r, j)] = (row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
                    }
                }
            }
            Objective::Interpolation => {
                for j in 0..k {
                    let resid = row[j] - if j == y { 1.0 } else { 0.0 };
                    total += resid * resid;
                    if let Some(g) = g.as_mut() {
                        g[(r, j)] = 2.0 * resid;
                    }
                }
            }
        }
    }
    (total / n as f64, g)
}

/// Mean per-sample loss of `w` on `data`.
pub fn objective_loss(objective: Objective, w: &DMatrix<f64>, data: &LabeledDataset) -> Result<f64> {
    if data.d() != w.nrows() {
        return Err(Error::DimensionMismatch { expected: w.nrows(), got: data.d() });
    }
    Ok(loss_and_grad(objective, &(data.x() * w), data.labels(), false).0)
}

fn check_objective(objective: Objective, data: &LabeledDataset) -> Result<()> {
    if objective == Objective::SigmoidMse && data.k() != 2 {
        return Err(Error::InvalidConfig(format!("sigmoid_mse needs k = 2, got k = {}", data.k())));
    }
    if objective == Objective::Interpolation && data.d() < data.n() {
        return Err(Error::InvalidConfig(format!(
            "interpolation needs d ≥ n, got d = {}, n = {}",
            data.d(),
            data.n()
        )));
    }
    Ok(())
}

/// Random W0 with N(0, init_scale²/d) entries from `cfg.seed`.
pub fn random_init(d: usize, k: usize, cfg: &TrainConfig, objective: Objective) -> DMatrix<f64> {
    let mut rng = stream_rng(cfg.seed, 1);
    let scale = cfg.init_scale / (d as f64).sqrt();
    let mut w0 = DMatrix::from_fn(d, k, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    if objective == Objective::SigmoidMse {
        w0.column_mut(0).fill(0.0);
    }
    w0
}

/// SGD from a random W0 drawn from `cfg.seed`.
pub fn train_sgd(
    train: &LabeledDataset,
    held_out: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    let w0 = random_init(train.d(), train.k(), cfg, objective);
    train_sgd_from(w0, train, held_out, cfg, objective)
}

/// SGD from an explicit W0.
pub fn train_sgd_from(
    w0: DMatrix<f64>,
    train: &LabeledDataset,
    held_out: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_objective(objective, train)?;
    let (d, k) = (train.d(), train.k());
    if w0.shape() != (d, k) {
        return Err(Error::DimensionMismatch { expected: d * k, got: w0.len() });
    }
    if let Some(h) = held_out {
        if h.d() != d || h.k() != k {
            return Err(Error::DimensionMismatch { expected: d, got: h.d() });
        }
    }
    let mut w = w0.clone();
    if objective == Objective::SigmoidMse {
        w.column_mut(0).fill(0.0);
    }
    let n = train.n();
    let batch = cfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let y_norm = (n as f64).sqrt();

    let mut rng = stream_rng(cfg.seed, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    let mut xb = DMatrix::zeros(batch, d);
    let mut yb = vec![0usize; batch];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            if xb.nrows() != b {
                xb = DMatrix::zeros(b, d);
                yb.resize(b, 0);
            }
            for (r, &idx) in chunk.iter().enumerate() {
                xb.row_mut(r).copy_from(&train.x().row(idx));
                yb[r] = train.labels()[idx];
            }
            let z = &xb * &w;
            let (_, g) = loss_and_grad(objective, &z, &yb, true);
            let grad = xb.transpose() * g.expect("gradient requested") / b as f64;
            let lr = if cfg.cosine {
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.learning_rate
            };
            w -= grad * lr;
            step += 1;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { steps: step });
            }
        }

        let z = train.x() * &w;
        let (train_loss, _) = loss_and_grad(objective, &z, train.labels(), false);
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged { steps: step });
        }
        let (test_loss, test_accuracy) = match held_out {
            Some(h) => {
                let zt = h.x() * &w;
                let (l, _) = loss_and_grad(objective, &zt, h.labels(), false);
                let correct = zt
                    .row_iter()
                    .zip(h.labels())
                    .filter(|(r, &y)| argmax(r.iter().copied()) == y)
                    .count();
                (Some(l), Some(correct as f64 / h.n() as f64))
            }
            None => (None, None),
        };
        curves.push(EpochStats { epoch, train_loss, test_loss, test_accuracy });

        if objective == Objective::Interpolation {
            if let Some(tol) = cfg.train_tolerance {
                // train_loss is ‖XW − Y‖²_F / n and ‖Y‖_F = √n for one-hot Y
                if (train_loss * n as f64).sqrt() <= tol * y_norm {
                    break;
                }
            }
        }
        if let Some(l) = test_loss {
            if l < best - cfg.min_delta {
                best = l;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome { classifier: LinearClassifier::new(w, w0, objective)?, curves, steps: step, stopped_early })
}

/// W = W0 + Xᵀ(XXᵀ)⁻¹(Y − XW0).
pub fn min_norm_interpolator(data: &LabeledDataset, w0: &DMatrix<f64>) -> Result<LinearClassifier> {
    let x = data.x();
    let y = data.one_hot();
    if w0.shape() != (data.d(), data.k()) {
        return Err(Error::DimensionMismatch { expected: data.d() * data.k(), got: w0.len() });
    }
    let gram = x * x.transpose();
    let eig = sym_eigenvalues_desc(&gram);
    let s_max = eig[0];
    let s_min = *eig.last().expect("n ≥ 1");
    let ratio = if s_max > 0.0 { s_min.max(0.0) / s_max } else { 0.0 };
    if ratio <= 1e-10 {
        return Err(Error::SingularSystem { ratio });
    }
    let rhs = &y - x * w0;
    let chol = gram.cholesky().ok_or(Error::SingularSystem { ratio })?;
    let w = w0 + x.transpose() * chol.solve(&rhs);
    let resid = (x * &w - &y).norm();
    if resid > 1e-8 * y.norm() {
        return Err(Error::NumericalFailure {
            step: 0,
            what: format!("interpolation residual {resid:e} exceeds 1e-8·‖Y‖"),
        });
    }
    LinearClassifier::new(w, w0.clone(), Objective::Interpolation)
}

/// Fraction of rows whose argmax prediction differs from the label.
pub fn test_error(w: &LinearClassifier, test: &LabeledDataset) -> Result<f64> {
    let pred = w.predict(test.x())?;
    let wrong = pred.iter().zip(test.labels()).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / test.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianError {
    /// Σ θ_i · (class-i error).
    pub error: f64,
    pub per_class: Vec<f64>,
    /// Zero for the closed form.
    pub stderr: f64,
    /// Draws per class; zero for the closed form.
    pub n_draws: usize,
}

/// Population error of `w` under a model with one Gaussian per class.
///
/// Closed form for k = 2; Monte Carlo with `n_draws` per class otherwise.
pub fn gaussian_error(
    w: &LinearClassifier,
    model: &ClassConditionalModel,
    n_draws: usize,
    seed: u64,
) -> Result<GaussianError> {
    let k = model.num_classes();
    if w.num_classes() != k {
        return Err(Error::DimensionMismatch { expected: k, got: w.num_classes() });
    }
    if w.dimension() != model.dimension() {
        return Err(Error::DimensionMismatch { expected: model.dimension(), got: w.dimension() });
    }
    for (id, m) in model.classes() {
        if m.components().len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "class {id} has {} components; need a single Gaussian",
                m.components().len()
            )));
        }
    }
    if k == 2 {
        let std = Normal::standard();
        let mut per_class = Vec::with_capacity(2);
        for i in 0..2 {
            let j = 1 - i;
            let comp = &model.mixture(i).components()[0];
            let delta: DVector<f64> = w.weights().column(i) - w.weights().column(j);
            if delta.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateClassifier("w_1 − w_2 = 0; every score ties".into()));
            }
            let margin = comp.mean().dot(&delta);
            let var = (comp.covariance() * &delta).dot(&delta).max(0.0);
            let err = if var > 0.0 {
                std.cdf(-margin / var.sqrt())
            } else if margin != 0.0 {
                if margin < 0.0 { 1.0 } else { 0.0 }
            } else if j < i {
                1.0
            } else {
                0.0
            };
            per_class.push(err);
        }
        let error = per_class.iter().zip(model.priors()).map(|(e, p)| e * p).sum();
        return Ok(GaussianError { error, per_class, stderr: 0.0, n_draws: 0 });
    }
    if n_draws == 0 {
        return Err(Error::InvalidConfig("Monte-Carlo error needs n_draws ≥ 1".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut var = 0.0;
    for (i, theta) in model.priors().iter().enumerate() {
        let x = model.mixture(i).sample(n_draws, crate::seed::derive_seed(seed, &["gaussian_error".into(), i.into()]));
        let wrong = w.predict(&x)?.iter().filter(|&&p| p != i).count();
        let p = wrong as f64 / n_draws as f64;
        var += theta * theta * p * (1.0 - p) / n_draws as f64;
        per_class.push(p);
    }
    let error = per_class.iter().zip(model.priors()).map(|(e, p)| e * p).sum();
    Ok(GaussianError { error, per_class, stderr: var.sqrt(), n_draws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::mixtures::GaussianMixture;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn dataset(x: DMatrix<f64>, labels: Vec<usize>, k: usize) -> LabeledDataset {
        LabeledDataset::new(x, labels, k, Provenance::Synthetic).unwrap()
    }

    fn random_dataset(n: usize, d: usize, k: usize, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, 5);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels = (0..n).map(|i| i % k).collect();
        dataset(x, labels, k)
    }

    fn two_gaussians(mu: DVector<f64>, cov: DMatrix<f64>) -> ClassConditionalModel {
        ClassConditionalModel::balanced(vec![
            GaussianMixture::single(mu.clone(), cov.clone()).unwrap(),
            GaussianMixture::single(-mu, cov).unwrap(),
        ])
        .unwrap()
    }

    /// Solve the dual system (XXᵀ)α = Y − XW0 by LU, independent of the Cholesky path.
    fn dual_oracle(data: &LabeledDataset, w0: &DMatrix<f64>) -> DMatrix<f64> {
        let x = data.x();
        let alpha = (x * x.transpose()).lu().solve(&(data.one_hot() - x * w0)).unwrap();
        w0 + x.transpose() * alpha
    }

    #[test]
    fn interpolation_identity_design_hits_labels() {
        let k = 4;
        let data = dataset(DMatrix::identity(k, k), (0..k).collect(), k);
        let clf = min_norm_interpolator(&data, &DMatrix::zeros(k, k)).unwrap();
        assert_eq!(clf.weights(), &data.one_hot());
        // one full-batch step at lr = k/2 lands on Y
        let cfg = TrainConfig {
            learning_rate: k as f64 / 2.0,
            cosine: false,
            batch_size: k,
            epochs: 1,
            init_scale: 0.0,
            ..Default::default()
        };
        let out = train_sgd(&data, None, &cfg, Objective::Interpolation).unwrap();
        assert_eq!(out.classifier.weights(), &data.one_hot());
    }

    #[test]
    fn sigmoid_separates_one_dimensional_data() {
        let xs = [-2.0, -1.5, -0.7, -0.2, 0.3, 0.8, 1.1, 2.5];
        let x = DMatrix::from_column_slice(8, 1, &xs);
        let labels = xs.iter().map(|&v| usize::from(v > 0.0)).collect();
        let data = dataset(x, labels, 2);
        let cfg = TrainConfig { learning_rate: 0.5, batch_size: 4, epochs: 200, init_scale: 0.0, ..Default::default() };
        let out = train_sgd(&data, None, &cfg, Objective::SigmoidMse).unwrap();
        assert_eq!(test_error(&out.classifier, &data).unwrap(), 0.0);
        assert!(out.classifier.weights().column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_requires_binary() {
        let data = random_dataset(12, 3, 3, 1);
        assert!(matches!(
            train_sgd(&data, None, &TrainConfig::default(), Objective::SigmoidMse),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn interpolation_requires_wide_design() {
        let data = random_dataset(12, 3, 2, 1);
        assert!(matches!(
            train_sgd(&data, None, &TrainConfig::default(), Objective::Interpolation),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = random_dataset(8, 16, 2, 3);
        let cfg = TrainConfig { learning_rate: 1e6, cosine: false, epochs: 500, ..Default::default() };
        assert!(matches!(
            train_sgd(&data, None, &cfg, Objective::Interpolation),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn sgd_reaches_min_norm_solution() {
        let data = random_dataset(16, 32, 2, 11);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            cosine: false,
            batch_size: 4,
            epochs: 20_000,
            train_tolerance: Some(1e-10),
            init_scale: 1.0,
            seed: 4,
            ..Default::default()
        };
        let out = train_sgd(&data, None, &cfg, Objective::Interpolation).unwrap();
        let exact = min_norm_interpolator(&data, out.classifier.init()).unwrap();
        let rel = (out.classifier.weights() - exact.weights()).norm() / exact.weights().norm();
        assert!(rel <= 1e-4, "relative error {rel:e}");
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let data = random_dataset(10, 5, 3, 8);
        let mut rng = stream_rng(2, 2);
        let w = DMatrix::from_fn(5, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        for objective in [Objective::SoftmaxMse, Objective::CrossEntropy, Objective::Interpolation] {
            let (_, g) = loss_and_grad(objective, &(data.x() * &w), data.labels(), true);
            let grad = data.x().transpose() * g.unwrap() / data.n() as f64;
            for a in 0..5 {
                for b in 0..3 {
                    let h = 1e-6;
                    let mut wp = w.clone();
                    wp[(a, b)] += h;
                    let mut wm = w.clone();
                    wm[(a, b)] -= h;
                    let fd = (objective_loss(objective, &wp, &data).unwrap()
                        - objective_loss(objective, &wm, &data).unwrap())
                        / (2.0 * h);
                    assert!((fd - grad[(a, b)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{objective:?}");
                }
            }
        }
    }

    #[test]
    fn min_norm_keeps_interpolating_init() {
        let data = dataset(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), vec![0, 1], 2);
        let w0 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 5.0, -3.0]);
        let clf = min_norm_interpolator(&data, &w0).unwrap();
        assert!((clf.weights() - &w0).amax() <= 1e-15);
    }

    #[test]
    fn min_norm_single_sample() {
        let data = dataset(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), vec![0], 1);
        let clf = min_norm_interpolator(&data, &DMatrix::zeros(3, 1)).unwrap();
        assert_eq!(clf.weights().as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_norm_matches_dual_solve_and_row_space() {
        let data = random_dataset(16, 32, 2, 21);
        let mut rng = stream_rng(3, 3);
        let w0 = DMatrix::from_fn(32, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let clf = min_norm_interpolator(&data, &w0).unwrap();
        let oracle = dual_oracle(&data, &w0);
        assert!((clf.weights() - &oracle).amax() <= 1e-10);
        let x = data.x();
        let proj = x.transpose() * (x * x.transpose()).try_inverse().unwrap() * x;
        let off = (DMatrix::identity(32, 32) - proj) * (clf.weights() - &w0);
        assert!(off.norm() <= 1e-8);
    }

    #[test]
    fn min_norm_rejects_duplicate_rows() {
        let x = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 0.0, 1.0, 1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let data = dataset(x, vec![0, 1, 0], 2);
        assert!(matches!(
            min_norm_interpolator(&data, &DMatrix::zeros(4, 2)),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn test_error_perfect_and_tied() {
        let data = dataset(DMatrix::identity(3, 3), vec![0, 1, 2], 3);
        let perfect = LinearClassifier::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), Objective::Interpolation).unwrap();
        assert_eq!(test_error(&perfect, &data).unwrap(), 0.0);

        let data = random_dataset(40, 4, 4, 2);
        let zero = LinearClassifier::new(DMatrix::zeros(4, 4), DMatrix::zeros(4, 4), Objective::SoftmaxMse).unwrap();
        let theta1 = data.class_counts()[0] as f64 / data.n() as f64;
        assert_eq!(test_error(&zero, &data).unwrap(), 1.0 - theta1);
    }

    #[test]
    fn gaussian_error_standard_case() {
        let mut e1 = DVector::zeros(3);
        e1[0] = 1.0;
        let model = two_gaussians(e1.clone(), DMatrix::identity(3, 3));
        let w = DMatrix::from_columns(&[e1.clone(), -e1]);
        let clf = LinearClassifier::new(w, DMatrix::zeros(3, 2), Objective::SoftmaxMse).unwrap();
        let out = gaussian_error(&clf, &model, 0, 0).unwrap();
        for e in &out.per_class {
            assert!((e - 0.15865525393145707).abs() < 1e-9, "{e}");
        }
    }

    #[test]
    fn gaussian_error_orthogonal_direction_is_half() {
        let mut e1 = DVector::zeros(3);
        e1[0] = 1.0;
        let mut e2 = DVector::zeros(3);
        e2[1] = 1.0;
        let model = two_gaussians(e1, DMatrix::identity(3, 3) * 0.7);
        let clf = LinearClassifier::new(DMatrix::from_columns(&[e2, DVector::zeros(3)]), DMatrix::zeros(3, 2), Objective::SoftmaxMse).unwrap();
        let out = gaussian_error(&clf, &model, 0, 0).unwrap();
        assert_eq!(out.per_class, vec![0.5, 0.5]);
    }

    #[test]
    fn gaussian_error_degenerate() {
        let model = two_gaussians(DVector::from_element(2, 1.0), DMatrix::zeros(2, 2));
        let clf = LinearClassifier::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), Objective::SoftmaxMse).unwrap();
        assert!(matches!(gaussian_error(&clf, &model, 0, 0), Err(Error::DegenerateClassifier(_))));
    }

    #[test]
    fn empirical_error_matches_closed_form() {
        let mu = DVector::from_vec(vec![0.6, -0.2, 0.3]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.8]);
        let model = two_gaussians(mu, cov);
        let w = DMatrix::from_row_slice(3, 2, &[0.7, -0.1, 0.2, 0.4, 0.5, 0.0]);
        let clf = LinearClassifier::new(w, DMatrix::zeros(3, 2), Objective::SoftmaxMse).unwrap();
        let exact = gaussian_error(&clf, &model, 0, 0).unwrap().error;
        let test = model.sample_dataset(50_000, 9, Provenance::Gmm).unwrap();
        let emp = test_error(&clf, &test).unwrap();
        let tol = 3.0 * (exact * (1.0 - exact) / test.n() as f64).sqrt();
        assert!((emp - exact).abs() <= tol, "{emp} vs {exact}");
    }

    #[test]
    fn monte_carlo_matches_quadrature_for_three_classes() {
        let means = [[1.0, 0.0], [-0.5, 0.8], [-0.5, -0.8]];
        let covs = [[0.5, 0.1, 0.1, 0.4], [0.3, 0.0, 0.0, 0.6], [0.4, -0.1, -0.1, 0.4]];
        let mixtures = means
            .iter()
            .zip(&covs)
            .map(|(m, c)| GaussianMixture::single(DVector::from_row_slice(m), DMatrix::from_row_slice(2, 2, c)).unwrap())
            .collect();
        let model = ClassConditionalModel::balanced(mixtures).unwrap();
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, -0.5, 0.0, 0.9, -0.9]);
        let clf = LinearClassifier::new(w.clone(), DMatrix::zeros(2, 3), Objective::SoftmaxMse).unwrap();
        let mc = gaussian_error(&clf, &model, 200_000, 5).unwrap();

        // midpoint rule over [-6, 6]² with the bivariate normal density
        let h = 0.01;
        let steps = (12.0 / h) as usize;
        let mut quad = 0.0;
        for c in 0..3 {
            let cov = DMatrix::from_row_slice(2, 2, &covs[c]);
            let inv = cov.clone().try_inverse().unwrap();
            let norm = 1.0 / (2.0 * std::f64::consts::PI * cov.determinant().sqrt());
            let mut err = 0.0;
            for a in 0..steps {
                for b in 0..steps {
                    let x = DVector::from_vec(vec![-6.0 + (a as f64 + 0.5) * h, -6.0 + (b as f64 + 0.5) * h]);
                    let z = w.transpose() * &x;
                    if argmax(z.iter().copied()) != c {
                        let dx = &x - DVector::from_row_slice(&means[c]);
                        err += norm * (-0.5 * (inv.clone() * &dx).dot(&dx)).exp() * h * h;
                    }
                }
            }
            quad += err / 3.0;
        }
        assert!((mc.error - quad).abs() <= 3.0 * mc.stderr, "{} vs {quad} (se {})", mc.error, mc.stderr);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn positive_scaling_keeps_predictions(seed in 0u64..1000, c in 0.01f64..100.0) {
            let data = random_dataset(30, 4, 3, seed);
            let mut rng = stream_rng(seed, 9);
            let w = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = LinearClassifier::new(w.clone(), w.clone(), Objective::SoftmaxMse).unwrap();
            let b = LinearClassifier::new(w.clone() * c, w, Objective::SoftmaxMse).unwrap();
            prop_assert_eq!(test_error(&a, &data).unwrap(), test_error(&b, &data).unwrap());
        }
    }
}
