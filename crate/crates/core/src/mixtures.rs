//! Gaussian mixtures: fitting, sampling, and the exact posterior-mean
//! denoiser for mixture targets.
//!
//! Covariances are held in eigen-form ([`PsdFactor`]) because fitted
//! covariances of generated data are numerically rank deficient; a Cholesky
//! factor would fail on them. The same factor drives sampling and the
//! denoiser, which only ever needs `(λ + t²)⁻¹` in the eigenbasis.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{center_rows, column_means, relative_asymmetry, sym_eigen_desc};
use crate::sampler::Denoiser;
use crate::seed::{derive_seed, stream_rng};

const SYMMETRY_TOL: f64 = 1e-12;
const NEGATIVE_EIG_TOL: f64 = 1e-10;
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Normalisation of the empirical covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceEstimator {
    /// Divide by n.
    #[default]
    Biased,
    /// Divide by n − 1.
    Unbiased,
}

/// Eigen-factorisation Σ = U·diag(λ)·Uᵀ with λ descending and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    clamp_count: usize,
}

impl PsdFactor {
    /// Factor a symmetric PSD matrix. Eigenvalues at or below zero (within
    /// `1e-10·max|λ|`) are floored to zero and counted.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::InvalidCovariance(format!(
                "covariance is {}×{}, not square",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let asym = relative_asymmetry(cov);
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidCovariance(format!(
                "not symmetric (relative asymmetry {asym:e})"
            )));
        }
        let (values, vectors) = sym_eigen_desc(cov);
        Self::clamped(values, vectors)
    }

    /// Build from an explicit eigen-form. Columns of `eigenvectors` must be
    /// orthonormal; the pair is re-sorted to descending order if needed.
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        if eigenvectors.nrows() != d || eigenvectors.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: eigenvectors.nrows() });
        }
        let ortho = (eigenvectors.tr_mul(&eigenvectors) - DMatrix::identity(d, d)).amax();
        if ortho > 1e-8 {
            return Err(Error::InvalidCovariance(format!(
                "eigenvectors not orthonormal (deviation {ortho:e})"
            )));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let values = DVector::from_iterator(d, order.iter().map(|&i| eigenvalues[i]));
        let vectors = eigenvectors.select_columns(order.iter());
        Self::clamped(values, vectors)
    }

    fn clamped(mut values: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let scale = values.amax();
        let floor = -NEGATIVE_EIG_TOL * scale;
        let mut clamp_count = 0;
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidCovariance("non-finite eigenvalue".into()));
            }
            if *v < floor {
                return Err(Error::InvalidCovariance(format!(
                    "eigenvalue {v:e} is negative beyond tolerance (λ_max = {scale:e})"
                )));
            }
            if *v <= 0.0 {
                *v = 0.0;
                clamp_count += 1;
            }
        }
        Ok(Self { eigenvectors, eigenvalues: values, clamp_count })
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Number of eigenvalues floored at zero.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    /// U·diag(λ)·Uᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.eigenvalues[j];
        }
        let m = scaled * self.eigenvectors.transpose();
        (&m + m.transpose()) * 0.5
    }

    /// U·diag(√λ), a square root of Σ.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let mut l = self.eigenvectors.clone();
        for (j, mut col) in l.column_iter_mut().enumerate() {
            col *= self.eigenvalues[j].sqrt();
        }
        l
    }
}

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: PsdFactor,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: covariance.nrows() });
        }
        let factor = PsdFactor::from_covariance(&covariance)?;
        Self::from_factor(weight, mean, factor)
    }

    pub fn from_factor(weight: f64, mean: DVector<f64>, factor: PsdFactor) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidConfig(format!("component weight {weight} outside [0, 1]")));
        }
        if factor.dimension() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: factor.dimension() });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite mean".into()));
        }
        let covariance = factor.reconstruct();
        Ok(Self { weight, mean, covariance, factor })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn factor(&self) -> &PsdFactor {
        &self.factor
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidConfig(format!("component weight {weight} outside [0, 1]")));
        }
        self.weight = weight;
        Ok(self)
    }
}

/// Σ θ_k N(μ_k, Σ_k) over a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dimension: usize,
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidConfig("mixture needs at least one component".into()))?;
        let dimension = first.dimension();
        if dimension == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        for c in &components {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch { expected: dimension, got: c.dimension() });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidConfig(format!("component weights sum to {total}, not 1")));
        }
        Ok(Self { dimension, components })
    }

    /// Build from unnormalised weights, rescaling them to sum to one.
    pub fn normalized(components: Vec<GaussianComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidConfig("component weights must have positive sum".into()));
        }
        let comps = components
            .into_iter()
            .map(|c| {
                let w = c.weight / total;
                c.with_weight(w.min(1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, covariance)?])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Mixture mean Σ w_k μ_k.
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dimension), |acc, c| acc + &c.mean * c.weight)
    }

    /// Law-of-total-variance covariance Σ w_k(Σ_k + μ_kμ_kᵀ) − μ̄μ̄ᵀ.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut second = DMatrix::zeros(self.dimension, self.dimension);
        for c in &self.components {
            second += (&c.covariance + &c.mean * c.mean.transpose()) * c.weight;
        }
        let cov = second - &mu * mu.transpose();
        (&cov + cov.transpose()) * 0.5
    }

    /// Draw `n` rows; see [`sample_mixture`].
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        self.sample_with_components(n, seed).0
    }

    /// Draw `n` rows together with the component index of each row.
    pub fn sample_with_components(&self, n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let d = self.dimension;
        let mut rng = stream_rng(seed, 0);
        let cumulative: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        let last_live = self.components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0);
        let assignment: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(last_live)
            })
            .collect();

        // Normals are drawn in row order; rows are then transformed per component.
        let mut z = DMatrix::<f64>::zeros(d, n);
        for mut col in z.column_iter_mut() {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }

        let mut out = DMatrix::zeros(n, d);
        for (k, comp) in self.components.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let zk = z.select_columns(rows.iter());
            let xk = comp.factor.sqrt_factor() * zk;
            for (col, &i) in rows.iter().enumerate() {
                for j in 0..d {
                    out[(i, j)] = comp.mean[j] + xk[(j, col)];
                }
            }
        }
        (out, assignment)
    }

    /// Per-component log N(x; μ_k, Σ_k + t²I) + log w_k for each column of
    /// `xs` (d×m), plus the posterior mean of each component.
    fn component_terms(&self, xs: &DMatrix<f64>, t2: f64) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let d = self.dimension;
        let m = xs.ncols();
        let log_2pi = (2.0 * PI).ln();
        let mut logw = DMatrix::from_element(self.components.len(), m, f64::NEG_INFINITY);
        let mut posts = Vec::with_capacity(self.components.len());
        for (k, comp) in self.components.iter().enumerate() {
            let lam = comp.factor.eigenvalues();
            // per-(component, t) terms, computed once per batch
            let inv: DVector<f64> = lam.map(|l| 1.0 / (l + t2));
            let shrink: DVector<f64> = lam.zip_map(&inv, |l, i| l * i);
            let logdet: f64 = lam.iter().map(|l| (l + t2).ln()).sum();

            let mut centered = xs.clone();
            for mut col in centered.column_iter_mut() {
                col -= &comp.mean;
            }
            let u = comp.factor.eigenvectors();
            let mut y = u.tr_mul(&centered);
            if comp.weight > 0.0 {
                let lw = comp.weight.ln();
                for (col, yc) in y.column_iter().enumerate() {
                    let q: f64 = yc.iter().zip(inv.iter()).map(|(a, b)| a * a * b).sum();
                    logw[(k, col)] = lw - 0.5 * (q + logdet + d as f64 * log_2pi);
                }
            }
            for mut col in y.column_iter_mut() {
                col.component_mul_assign(&shrink);
            }
            let mut post = u * y;
            for mut col in post.column_iter_mut() {
                col += &comp.mean;
            }
            posts.push(post);
        }
        (logw, posts)
    }

    /// Posterior responsibilities of each component for a noised point.
    pub fn responsibilities(&self, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        check_scale(t)?;
        self.check_dim(x.len())?;
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let (logw, _) = self.component_terms(&xs, t * t);
        Ok(softmax_column(logw.column(0).iter().copied()))
    }

    /// log p_t(x), the density of x0 + t·z with x0 from the mixture.
    pub fn log_density_noised(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        check_scale(t)?;
        self.check_dim(x.len())?;
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let (logw, _) = self.component_terms(&xs, t * t);
        Ok(log_sum_exp(logw.column(0).iter().copied()))
    }

    /// D(x; t) for every column of a d×m matrix.
    pub fn denoise_columns(&self, xs: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        check_scale(t)?;
        self.check_dim(xs.nrows())?;
        let (logw, posts) = self.component_terms(xs, t * t);
        if posts.len() == 1 {
            return Ok(posts.into_iter().next().unwrap());
        }
        let mut out = DMatrix::zeros(xs.nrows(), xs.ncols());
        for col in 0..xs.ncols() {
            let r = softmax_column(logw.column(col).iter().copied());
            let mut acc = out.column_mut(col);
            for (k, rk) in r.iter().enumerate() {
                if *rk > 0.0 {
                    acc.axpy(*rk, &posts[k].column(col), 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Score ∇ log p_t(x) = (D(x; t) − x)/t².
    pub fn score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let dx = ideal_denoiser(self, x, t)?;
        Ok((dx - x) / (t * t))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, got });
        }
        Ok(())
    }
}

impl Denoiser for GaussianMixture {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn denoise(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        match self.denoise_columns(&xs, t) {
            Ok(out) => out.column(0).into_owned(),
            Err(_) => DVector::from_element(x.len(), f64::NAN),
        }
    }

    fn denoise_columns(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        GaussianMixture::denoise_columns(self, xs, t)
            .unwrap_or_else(|_| DMatrix::from_element(xs.nrows(), xs.ncols(), f64::NAN))
    }
}

fn check_scale(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(t))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_column(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class-conditional target: one mixture per class with class priors θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalModel {
    classes: Vec<(usize, GaussianMixture)>,
    priors: Vec<f64>,
}

impl ClassConditionalModel {
    pub fn new(classes: Vec<(usize, GaussianMixture)>, priors: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one class".into()));
        }
        if priors.len() != classes.len() {
            return Err(Error::DimensionMismatch { expected: classes.len(), got: priors.len() });
        }
        if priors.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidConfig("class priors must lie in [0, 1]".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("class priors sum to {total}, not 1")));
        }
        let d = classes[0].1.dimension();
        let mut ids: Vec<usize> = classes.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != classes.len() {
            return Err(Error::InvalidConfig("class ids must be distinct".into()));
        }
        for (_, m) in &classes {
            if m.dimension() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.dimension() });
            }
        }
        Ok(Self { classes, priors })
    }

    /// Equal priors over the given mixtures, ids 0..k.
    pub fn balanced(mixtures: Vec<GaussianMixture>) -> Result<Self> {
        let k = mixtures.len();
        let priors = vec![1.0 / k as f64; k];
        Self::new(mixtures.into_iter().enumerate().collect(), priors)
    }

    pub fn classes(&self) -> &[(usize, GaussianMixture)] {
        &self.classes
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dimension(&self) -> usize {
        self.classes[0].1.dimension()
    }

    pub fn mixture(&self, class_index: usize) -> &GaussianMixture {
        &self.classes[class_index].1
    }

    /// `n_per_class` rows from every class; labels are class positions 0..k.
    pub fn sample_dataset(
        &self,
        n_per_class: usize,
        seed: u64,
        provenance: Provenance,
    ) -> Result<LabeledDataset> {
        let parts = self
            .classes
            .iter()
            .enumerate()
            .map(|(pos, (id, m))| {
                let x = m.sample(n_per_class, derive_seed(seed, &["class".into(), (*id).into()]));
                LabeledDataset::new(x, vec![pos; n_per_class], self.num_classes(), provenance)
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::concat(&parts)
    }
}

/// Empirical mean and covariance of the rows of `samples`, weight 1.
pub fn fit_gaussian(samples: &DMatrix<f64>, estimator: CovarianceEstimator) -> Result<GaussianComponent> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = column_means(samples);
    let xc = center_rows(samples, &mean);
    let denom = match estimator {
        CovarianceEstimator::Biased => n as f64,
        CovarianceEstimator::Unbiased => (n - 1) as f64,
    };
    let cov = xc.tr_mul(&xc) / denom;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianComponent::new(1.0, mean, cov)
}

/// `n` rows from `model`: a categorical draw over weights, then
/// μ + U·diag(√λ)·z. Bit-identical for a fixed seed.
pub fn sample_mixture(model: &GaussianMixture, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok(model.sample(n, seed))
}

/// Posterior mean E[x0 | x0 + t·z = x] for a mixture target.
pub fn ideal_denoiser(model: &GaussianMixture, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    Ok(model.denoise_columns(&xs, t)?.column(0).into_owned())
}

/// One Gaussian per class fitted to that class's rows; priors are the
/// empirical class frequencies.
pub fn match_moments(data: &LabeledDataset, estimator: CovarianceEstimator) -> Result<ClassConditionalModel> {
    let counts = data.class_counts();
    let n = data.n() as f64;
    let mut classes = Vec::with_capacity(data.k());
    for (c, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: count });
        }
        let comp = fit_gaussian(&data.class_rows(c), estimator)?;
        classes.push((c, GaussianMixture::new(vec![comp])?));
    }
    let mut priors: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let total: f64 = priors.iter().sum();
    priors.iter_mut().for_each(|p| *p /= total);
    ClassConditionalModel::new(classes, priors)
}

// ---------------------------------------------------------------------------
// JSON documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDocument {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance_eigvals: Vec<f64>,
    /// Row-major d×d; column j is the eigenvector of `covariance_eigvals[j]`.
    pub covariance_eigvecs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDocument {
    pub dimension: usize,
    pub components: Vec<ComponentDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDocument {
    pub id: usize,
    pub mixture: MixtureDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub class_priors: Vec<f64>,
    pub classes: Vec<ClassDocument>,
}

impl From<&GaussianMixture> for MixtureDocument {
    fn from(m: &GaussianMixture) -> Self {
        let components = m
            .components
            .iter()
            .map(|c| {
                let u = c.factor.eigenvectors();
                let d = u.nrows();
                let mut row_major = Vec::with_capacity(d * d);
                for i in 0..d {
                    for j in 0..d {
                        row_major.push(u[(i, j)]);
                    }
                }
                ComponentDocument {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    covariance_eigvals: c.factor.eigenvalues().iter().copied().collect(),
                    covariance_eigvecs: row_major,
                }
            })
            .collect();
        Self { dimension: m.dimension, components }
    }
}

impl TryFrom<&MixtureDocument> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: &MixtureDocument) -> Result<Self> {
        let d = doc.dimension;
        let comps = doc
            .components
            .iter()
            .map(|c| {
                if c.mean.len() != d || c.covariance_eigvals.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: c.mean.len() });
                }
                if c.covariance_eigvecs.len() != d * d {
                    return Err(Error::DimensionMismatch { expected: d * d, got: c.covariance_eigvecs.len() });
                }
                let u = DMatrix::from_row_slice(d, d, &c.covariance_eigvecs);
                let factor = PsdFactor::from_parts(DVector::from_vec(c.covariance_eigvals.clone()), u)?;
                GaussianComponent::from_factor(c.weight, DVector::from_vec(c.mean.clone()), factor)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = GaussianMixture::new(comps)?;
        if m.dimension != d {
            return Err(Error::DimensionMismatch { expected: d, got: m.dimension });
        }
        Ok(m)
    }
}

impl From<&ClassConditionalModel> for ModelDocument {
    fn from(m: &ClassConditionalModel) -> Self {
        Self {
            class_priors: m.priors.clone(),
            classes: m
                .classes
                .iter()
                .map(|(id, mix)| ClassDocument { id: *id, mixture: mix.into() })
                .collect(),
        }
    }
}

impl TryFrom<&ModelDocument> for ClassConditionalModel {
    type Error = Error;

    fn try_from(doc: &ModelDocument) -> Result<Self> {
        let classes = doc
            .classes
            .iter()
            .map(|c| Ok((c.id, GaussianMixture::try_from(&c.mixture)?)))
            .collect::<Result<Vec<_>>>()?;
        ClassConditionalModel::new(classes, doc.class_priors.clone())
    }
}

impl ClassConditionalModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::try_from(&doc)
    }
}

impl GaussianMixture {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MixtureDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MixtureDocument = serde_json::from_str(text)?;
        Self::try_from(&doc)
    }
}
