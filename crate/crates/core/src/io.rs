//! On-disk formats: datasets and classifier checkpoints as a JSON header plus
//! raw little-endian f64, and the CSV tables consumed by plotting scripts.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::concentration::NormSummary;
use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::glm::{EpochStats, LinearClassifier, Objective};
use crate::sampler::{NoiseSchedule, TrajectoryRecord};
use crate::spectra::SpectrumReport;

pub const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    pub num_classes: usize,
    /// One label per row.
    pub class_labels: Vec<usize>,
    pub provenance: Provenance,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub d: usize,
    pub k: usize,
    pub dtype: String,
    pub objective: Objective,
    /// The binary holds W then W0, each d×k row-major.
    pub layout: String,
    pub config_hash: String,
}

fn row_major_bytes(m: &DMatrix<f64>, out: &mut Vec<u8>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn matrix_from_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Malformed(format!(
            "expected {} bytes for a {rows}×{cols} f64 matrix, found {}",
            rows * cols * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn check_dtype(dtype: &str) -> Result<()> {
    if dtype != DTYPE {
        return Err(Error::Malformed(format!("unsupported dtype {dtype:?}")));
    }
    Ok(())
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the header path.
pub fn write_dataset(dir: &Path, stem: &str, data: &LabeledDataset, config_hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        n: data.n(),
        d: data.d(),
        dtype: DTYPE.into(),
        num_classes: data.k(),
        class_labels: data.labels().to_vec(),
        provenance: data.provenance(),
        config_hash: config_hash.into(),
    };
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = Vec::with_capacity(data.n() * data.d() * 8);
    row_major_bytes(data.x(), &mut bytes);
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    write_json(&json, &header)?;
    Ok(json)
}

/// Reads a dataset from its header path; the binary sits next to it.
pub fn read_dataset(header_path: &Path) -> Result<(LabeledDataset, DatasetHeader)> {
    let header: DatasetHeader = read_json(header_path)?;
    check_dtype(&header.dtype)?;
    if header.class_labels.len() != header.n {
        return Err(Error::Malformed(format!(
            "header lists {} labels for n = {}",
            header.class_labels.len(),
            header.n
        )));
    }
    let bytes = fs::read(header_path.with_extension("bin"))?;
    let x = matrix_from_bytes(&bytes, header.n, header.d)?;
    let data = LabeledDataset::new(x, header.class_labels.clone(), header.num_classes, header.provenance)?;
    Ok((data, header))
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn write_checkpoint(dir: &Path, stem: &str, clf: &LinearClassifier, config_hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let header = CheckpointHeader {
        d: clf.dimension(),
        k: clf.num_classes(),
        dtype: DTYPE.into(),
        objective: clf.objective(),
        layout: "w,w0 row-major".into(),
        config_hash: config_hash.into(),
    };
    let mut bytes = Vec::with_capacity(2 * header.d * header.k * 8);
    row_major_bytes(clf.weights(), &mut bytes);
    row_major_bytes(clf.init(), &mut bytes);
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, &header)?;
    Ok(json)
}

pub fn read_checkpoint(header_path: &Path) -> Result<LinearClassifier> {
    let header: CheckpointHeader = read_json(header_path)?;
    check_dtype(&header.dtype)?;
    let bytes = fs::read(header_path.with_extension("bin"))?;
    let half = header.d * header.k * 8;
    if bytes.len() != 2 * half {
        return Err(Error::Malformed(format!("checkpoint binary has {} bytes, expected {}", bytes.len(), 2 * half)));
    }
    let w = matrix_from_bytes(&bytes[..half], header.d, header.k)?;
    let w0 = matrix_from_bytes(&bytes[half..], header.d, header.k)?;
    LinearClassifier::new(w, w0, header.objective)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes rows with a header line; an empty slice still writes the header.
pub fn write_csv<T: Serialize + CsvHeader>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Column names of a CSV row type.
pub trait CsvHeader {
    const HEADER: &'static [&'static str];
}

macro_rules! csv_row {
    ($(#[$m:meta])* $name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: $ty),*
        }

        impl CsvHeader for $name {
            const HEADER: &'static [&'static str] = &[$(stringify!($field)),*];
        }
    };
}

csv_row!(
    /// The last step of a trajectory has no injection and leaves
    /// `post_injection_norm` empty.
    TrajectoryRow {
        trajectory_id: usize,
        step: usize,
        t_i: f64,
        norm: f64,
        post_injection_norm: Option<f64>,
    }
);

csv_row!(PixelRow { trajectory_id: usize, step: usize, coordinate: usize, magnitude: f64 });

csv_row!(TrainingRow {
    run_id: String,
    epoch: usize,
    train_loss: f64,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
});

csv_row!(SpectrumRow {
    index: usize,
    eigenvalue: f64,
    source: String,
    class_id: Option<usize>,
    step: Option<usize>,
});

csv_row!(HistogramRow { class_id: usize, p: f64, bin_lo: f64, bin_hi: f64, count: usize });

/// Rows for `records`, numbering trajectories from `first_id`.
pub fn trajectory_rows(records: &[TrajectoryRecord], schedule: &NoiseSchedule, first_id: usize) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for (j, rec) in records.iter().enumerate() {
        for (i, &norm) in rec.step_norms.iter().enumerate() {
            rows.push(TrajectoryRow {
                trajectory_id: first_id + j,
                step: i,
                t_i: schedule.t(i),
                norm,
                post_injection_norm: rec.post_injection_norms.get(i).copied(),
            });
        }
    }
    rows
}

pub fn pixel_rows(records: &[TrajectoryRecord], coordinates: &[usize], first_id: usize) -> Vec<PixelRow> {
    let mut rows = Vec::new();
    for (j, rec) in records.iter().enumerate() {
        let Some(per_step) = &rec.coordinate_norms else { continue };
        for (step, mags) in per_step.iter().enumerate() {
            for (&coordinate, &magnitude) in coordinates.iter().zip(mags) {
                rows.push(PixelRow { trajectory_id: first_id + j, step, coordinate, magnitude });
            }
        }
    }
    rows
}

pub fn training_rows(run_id: &str, curves: &[EpochStats]) -> Vec<TrainingRow> {
    curves
        .iter()
        .map(|e| TrainingRow {
            run_id: run_id.into(),
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            test_accuracy: e.test_accuracy,
        })
        .collect()
}

/// Eigenvalues are indexed from 1 in descending order.
pub fn spectrum_rows(report: &SpectrumReport) -> Vec<SpectrumRow> {
    report
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &eigenvalue)| SpectrumRow {
            index: i + 1,
            eigenvalue,
            source: report.source.as_str().into(),
            class_id: report.class_id,
            step: report.step,
        })
        .collect()
}

pub fn histogram_rows(summaries: &[NormSummary]) -> Vec<HistogramRow> {
    summaries
        .iter()
        .flat_map(|s| {
            s.histogram.iter().map(move |b| HistogramRow {
                class_id: s.class_id,
                p: s.p,
                bin_lo: b.lo,
                bin_hi: b.hi,
                count: b.count,
            })
        })
        .collect()
}
