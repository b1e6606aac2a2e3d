//! Covariance and Gram spectra, power-law fits, and spectrum comparison.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_rows, column_means, sym_eigenvalues_desc};

/// Eigenvalues below this are floored before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSource {
    Covariance,
    Gram,
}

impl SpectrumSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectrumSource::Covariance => "covariance",
            SpectrumSource::Gram => "gram",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    pub source: SpectrumSource,
    pub n: usize,
    pub d: usize,
    pub class_id: Option<usize>,
    pub step: Option<usize>,
}

impl SpectrumReport {
    fn new(mut eigenvalues: Vec<f64>, source: SpectrumSource, n: usize, d: usize) -> Self {
        for v in &mut eigenvalues {
            *v = v.max(0.0);
        }
        Self { eigenvalues, source, n, d, class_id: None, step: None }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Eigenvalues floored at [`LOG_FLOOR`] for log-scale use.
    pub fn floored(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v.max(LOG_FLOOR)).collect()
    }
}

/// Spectrum of the biased empirical covariance, or of XᵀX/n when
/// `centered` is false.
pub fn covariance_spectrum(samples: &DMatrix<f64>, centered: bool) -> Result<SpectrumReport> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let xc = if centered { center_rows(samples, &column_means(samples)) } else { samples.clone() };
    let cov = xc.transpose() * &xc / n as f64;
    Ok(SpectrumReport::new(sym_eigenvalues_desc(&cov), SpectrumSource::Covariance, n, d))
}

/// Eigenvalues of XXᵀ (uncentered), length min(n, d).
pub fn gram_spectrum(samples: &DMatrix<f64>) -> Result<SpectrumReport> {
    gram_spectrum_with(samples, false)
}

/// Eigenvalues of XXᵀ, optionally after subtracting the column means.
pub fn gram_spectrum_with(samples: &DMatrix<f64>, centered: bool) -> Result<SpectrumReport> {
    let (n, d) = samples.shape();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let owned;
    let x = if centered {
        owned = center_rows(samples, &column_means(samples));
        &owned
    } else {
        samples
    };
    // XXᵀ and XᵀX share their nonzero eigenvalues; solve the smaller one
    let m = if n <= d { x * x.transpose() } else { x.transpose() * x };
    Ok(SpectrumReport::new(sym_eigenvalues_desc(&m), SpectrumSource::Gram, n, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// a in λ_i ≈ C̃ i^a.
    pub exponent: f64,
    /// log C̃.
    pub log_prefactor: f64,
    /// 1-based inclusive index range.
    pub i_lo: usize,
    pub i_hi: usize,
    /// RMS of the log-log residuals.
    pub residual: f64,
}

/// Indices 10..min(1000, len), or the whole spectrum if it is shorter than 11.
pub fn default_fit_range(len: usize) -> (usize, usize) {
    if len >= 11 {
        (10, len.min(1000))
    } else {
        (1, len)
    }
}

/// OLS of log λ_i on log i over the 1-based inclusive `range`.
pub fn fit_power_law(report: &SpectrumReport, range: Option<(usize, usize)>) -> Result<PowerLawFit> {
    let (lo, hi) = range.unwrap_or_else(|| default_fit_range(report.len()));
    if lo < 1 || hi > report.len() || hi <= lo {
        return Err(Error::InvalidRange(format!(
            "fit range [{lo}, {hi}] invalid for a spectrum of length {}",
            report.len()
        )));
    }
    let mut xs = Vec::with_capacity(hi - lo + 1);
    let mut ys = Vec::with_capacity(hi - lo + 1);
    for i in lo..=hi {
        let v = report.eigenvalues[i - 1];
        if !(v > 0.0) {
            return Err(Error::InvalidRange(format!("eigenvalue {i} is {v}; need > 0 to fit")));
        }
        xs.push((i as f64).ln());
        ys.push(v.ln());
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    let log_prefactor = my - exponent * mx;
    let residual =
        (xs.iter().zip(&ys).map(|(x, y)| (y - log_prefactor - exponent * x).powi(2)).sum::<f64>() / m).sqrt();
    Ok(PowerLawFit { exponent, log_prefactor, i_lo: lo, i_hi: hi, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDivergence {
    /// max_i |a_i − b_i| / |a_i| over the top K.
    pub max_relative_gap: f64,
    /// Two-sample Kolmogorov–Smirnov distance of the eigenvalue sets.
    pub ks_distance: f64,
    pub top_k: usize,
    /// Both spectra are truncated to this length before comparing.
    pub compared_len: usize,
    pub len_a: usize,
    pub len_b: usize,
}

/// Two-sample KS statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Compare two spectra of the same kind over the top `top_k` eigenvalues.
pub fn compare_spectra(a: &SpectrumReport, b: &SpectrumReport, top_k: usize) -> Result<SpectrumDivergence> {
    if a.source != b.source {
        return Err(Error::InvalidConfig(format!(
            "cannot compare a {} spectrum with a {} spectrum",
            a.source.as_str(),
            b.source.as_str()
        )));
    }
    let len = a.len().min(b.len());
    let k = top_k.min(len);
    let max_relative_gap = a.eigenvalues[..k]
        .iter()
        .zip(&b.eigenvalues[..k])
        .map(|(x, y)| {
            let gap = (x - y).abs();
            if gap == 0.0 {
                0.0
            } else {
                gap / x.abs()
            }
        })
        .fold(0.0, f64::max);
    Ok(SpectrumDivergence {
        max_relative_gap,
        ks_distance: ks_distance(&a.eigenvalues[..len], &b.eigenvalues[..len]),
        top_k: k,
        compared_len: len,
        len_a: a.len(),
        len_b: b.len(),
    })
}

/// Gram spectrum of each (step, n×d) snapshot.
pub fn spectrum_through_sampling(snapshots: &[(usize, DMatrix<f64>)]) -> Result<Vec<SpectrumReport>> {
    if let Some((_, first)) = snapshots.first() {
        if let Some((_, bad)) = snapshots.iter().find(|(_, s)| s.shape() != first.shape()) {
            return Err(Error::DimensionMismatch { expected: first.len(), got: bad.len() });
        }
    }
    snapshots
        .par_iter()
        .map(|(step, x)| gram_spectrum(x).map(|r| r.with_step(*step)))
        .collect()
}
