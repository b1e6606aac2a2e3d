use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the rows of a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Diffusion,
    Gmm,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Diffusion => "diffusion",
            Provenance::Gmm => "gmm",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// An n×d sample matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        x: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "dataset must have n, d, k > 0 (got {}×{}, k={num_classes})",
                x.nrows(),
                x.ncols()
            )));
        }
        if labels.len() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for k={num_classes}")));
        }
        Ok(Self { x, labels, num_classes, provenance })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// n×k one-hot label matrix.
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n(), self.k());
        for (i, &l) in self.labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        y
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices belonging to class `c`, in order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect()
    }

    /// Rows of class `c` as a matrix.
    pub fn class_rows(&self, c: usize) -> DMatrix<f64> {
        self.x.select_rows(self.class_indices(c).iter())
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows.iter()),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// Stack datasets with the same d and k.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
        let d = first.d();
        let n: usize = parts.iter().map(|p| p.n()).sum();
        let mut x = DMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for p in parts {
            if p.d() != d {
                return Err(Error::DimensionMismatch { expected: d, got: p.d() });
            }
            if p.k() != first.k() {
                return Err(Error::DimensionMismatch { expected: first.k(), got: p.k() });
            }
            x.rows_mut(row, p.n()).copy_from(&p.x);
            labels.extend_from_slice(&p.labels);
            row += p.n();
        }
        Self::new(x, labels, first.k(), first.provenance)
    }
}
