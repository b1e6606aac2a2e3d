use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_classes, ExperimentManifest, RunDir};
use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::glm::{test_error, train_sgd};
use crate::io::{training_rows, CsvHeader, TrainingRow};
use crate::mixtures::match_moments;
use crate::seed::{derive_seed, stream_rng};

pub const UNIVERSALITY_CSV: &str = "universality.csv";
pub const TRAINING_CSV: &str = "training_curves.csv";
pub const UNIVERSALITY_JSON: &str = "universality.json";

/// One trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityRow {
    pub split: usize,
    pub repetition: usize,
    /// "diffusion" or "gmm".
    pub source: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub epochs: usize,
    pub stopped_early: bool,
    /// Accuracy on the diffusion test set, when cross-evaluating.
    pub diffusion_test_accuracy: Option<f64>,
}

impl CsvHeader for UniversalityRow {
    const HEADER: &'static [&'static str] = &[
        "split",
        "repetition",
        "source",
        "seed",
        "test_accuracy",
        "train_loss",
        "epochs",
        "stopped_early",
        "diffusion_test_accuracy",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub count: usize,
}

impl SourceStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, count: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAggregate {
    pub split: usize,
    pub diffusion: SourceStats,
    pub gmm: SourceStats,
    /// Mean diffusion accuracy minus mean GMM accuracy.
    pub gap: f64,
    pub abs_gap: f64,
    /// √((sd_diffusion² + sd_gmm²)/2).
    pub run_spread: f64,
    /// |gap| ≤ 2·run_spread.
    pub within_two_sigma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityResult {
    pub rows: Vec<UniversalityRow>,
    pub aggregates: Vec<SplitAggregate>,
    pub max_abs_gap: f64,
    pub all_within_two_sigma: bool,
}

impl UniversalityResult {
    pub fn from_rows(rows: Vec<UniversalityRow>) -> Self {
        let aggregates = aggregate(&rows);
        let max_abs_gap = aggregates.iter().map(|a| a.abs_gap).fold(0.0, f64::max);
        let all_within_two_sigma = aggregates.iter().all(|a| a.within_two_sigma);
        Self { rows, aggregates, max_abs_gap, all_within_two_sigma }
    }
}

/// Per-split statistics from raw rows, in increasing split order.
pub fn aggregate(rows: &[UniversalityRow]) -> Vec<SplitAggregate> {
    let mut by_split: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_split.entry(r.split).or_default();
        match r.source.as_str() {
            "diffusion" => e.0.push(r.test_accuracy),
            _ => e.1.push(r.test_accuracy),
        }
    }
    by_split
        .into_iter()
        .map(|(split, (d, g))| {
            let diffusion = SourceStats::of(&d);
            let gmm = SourceStats::of(&g);
            let gap = diffusion.mean - gmm.mean;
            let run_spread = ((diffusion.sd.powi(2) + gmm.sd.powi(2)) / 2.0).sqrt();
            SplitAggregate {
                split,
                abs_gap: gap.abs(),
                within_two_sigma: gap.abs() <= 2.0 * run_spread,
                gap,
                run_spread,
                diffusion,
                gmm,
            }
        })
        .collect()
}

/// Row positions of the per-class train pools and test reserves.
///
/// The last `n_test` rows of every class form its test reserve; training
/// rows are drawn from the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLayout {
    class_rows: Vec<Vec<usize>>,
    pool: usize,
    n_test: usize,
}

impl SplitLayout {
    pub fn new(data: &LabeledDataset, n_test: usize) -> Result<Self> {
        let class_rows: Vec<Vec<usize>> = (0..data.k()).map(|c| data.class_indices(c)).collect();
        let smallest = class_rows.iter().map(Vec::len).min().unwrap_or(0);
        if smallest <= n_test {
            return Err(Error::InsufficientSamples { needed: n_test + 1, got: smallest });
        }
        Ok(Self { class_rows, pool: smallest - n_test, n_test })
    }

    /// Rows available for training in each class.
    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.class_rows.iter().flat_map(|rows| rows[rows.len() - self.n_test..].to_vec()).collect()
    }

    /// `split` pool rows per class chosen by `seed`, sorted.
    pub fn train_rows(&self, split: usize, seed: u64) -> Result<Vec<usize>> {
        if split > self.pool {
            return Err(Error::InsufficientSamples { needed: split, got: self.pool });
        }
        let mut rng = stream_rng(seed, 2);
        let mut out = Vec::with_capacity(split * self.class_rows.len());
        for rows in &self.class_rows {
            let mut idx: Vec<usize> = sample(&mut rng, self.pool, split).into_iter().map(|i| rows[i]).collect();
            idx.sort_unstable();
            out.extend(idx);
        }
        Ok(out)
    }
}

fn assert_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let mut t = test.to_vec();
    t.sort_unstable();
    if let Some(&row) = train.iter().find(|r| t.binary_search(r).is_ok()) {
        return Err(Error::InvalidConfig(format!("row {row} is in both the train and test sets")));
    }
    Ok(())
}

struct Job {
    split: usize,
    repetition: usize,
}

type JobOutput = (Vec<UniversalityRow>, Vec<TrainingRow>);

fn run_job(
    job: &Job,
    sources: [(&str, &LabeledDataset, &SplitLayout); 2],
    manifest: &ExperimentManifest,
) -> Result<JobOutput> {
    let seed = derive_seed(
        manifest.base_seed,
        &[manifest.kind.as_str().into(), job.split.into(), job.repetition.into()],
    );
    let mut cfg = manifest.train.clone();
    cfg.seed = seed;
    let (_, diffusion, diffusion_layout) = sources[0];
    let diffusion_test = diffusion.select(&diffusion_layout.test_rows());
    let mut rows = Vec::with_capacity(2);
    let mut curves = Vec::new();
    for (name, data, layout) in sources {
        let train_idx = layout.train_rows(job.split, seed)?;
        let test_idx = layout.test_rows();
        assert_disjoint(&train_idx, &test_idx)?;
        let train = data.select(&train_idx);
        let test = data.select(&test_idx);
        let out = train_sgd(&train, Some(&test), &cfg, manifest.objective)?;
        let test_accuracy = 1.0 - test_error(&out.classifier, &test)?;
        let diffusion_test_accuracy = if manifest.cross_evaluate {
            Some(1.0 - test_error(&out.classifier, &diffusion_test)?)
        } else {
            None
        };
        curves.extend(training_rows(&format!("{name}-s{}-r{}", job.split, job.repetition), &out.curves));
        rows.push(UniversalityRow {
            split: job.split,
            repetition: job.repetition,
            source: name.into(),
            seed,
            test_accuracy,
            train_loss: out.final_train_loss(),
            epochs: out.curves.len(),
            stopped_early: out.stopped_early,
            diffusion_test_accuracy,
        });
    }
    Ok((rows, curves))
}

/// Trains on both sources for every split and repetition.
///
/// Both sources of a run share its seed, hence the same row positions, W0
/// and minibatch order. Completed runs are written even if another fails.
pub fn universality_sweep(
    diffusion: &LabeledDataset,
    gmm: &LabeledDataset,
    manifest: &ExperimentManifest,
    out: &RunDir,
) -> Result<Vec<UniversalityRow>> {
    manifest.validate()?;
    if diffusion.d() != gmm.d() || diffusion.k() != gmm.k() {
        return Err(Error::DimensionMismatch { expected: diffusion.d(), got: gmm.d() });
    }
    let dl = SplitLayout::new(diffusion, manifest.n_test)?;
    let gl = SplitLayout::new(gmm, manifest.n_test)?;
    let jobs: Vec<Job> = manifest
        .splits
        .iter()
        .flat_map(|&split| (0..manifest.repetitions).map(move |repetition| Job { split, repetition }))
        .collect();
    let results: Vec<Result<JobOutput>> = jobs
        .par_iter()
        .map(|job| {
            let r = run_job(job, [("diffusion", diffusion, &dl), ("gmm", gmm, &gl)], manifest);
            if let Err(e) = &r {
                out.log(&format!("split {} rep {} failed: {e}", job.split, job.repetition));
            }
            r
        })
        .collect();

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok((r, c)) => {
                rows.extend(r);
                curves.extend(c);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    out.write_csv(UNIVERSALITY_CSV, &rows)?;
    out.write_csv(TRAINING_CSV, &curves)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

/// Diffusion data, its moment-matched GMM, and the train/evaluate sweep.
pub fn run_universality(manifest: &ExperimentManifest) -> Result<UniversalityResult> {
    manifest.validate()?;
    let model = manifest.load_target()?;
    let largest = manifest.splits.iter().max().copied().unwrap_or(0);
    let n_per_class = manifest.rows_per_class((largest + manifest.n_test).max(2048));
    let out = RunDir::open(manifest.output_dir.as_deref())?;
    let hash = manifest.config_hash()?;
    out.write_manifest(manifest)?;
    out.log(&format!("universality: k={} d={} n_per_class={n_per_class}", model.num_classes(), model.dimension()));

    let generation = generate_classes(&model, &manifest.sampler, manifest.base_seed, n_per_class, &[], |c| c)?;
    let diffusion = generation.data;
    out.log("diffusion dataset generated");
    let gmm_model = match_moments(&diffusion, manifest.covariance_estimator)?;
    let gmm = gmm_model.sample_dataset(n_per_class, derive_seed(manifest.base_seed, &["gmm".into()]), Provenance::Gmm)?;
    out.write_model("target_model", &model)?;
    out.write_model("gmm_model", &gmm_model)?;
    out.write_dataset("diffusion", &diffusion, &hash)?;
    out.write_dataset("gmm", &gmm, &hash)?;

    let rows = universality_sweep(&diffusion, &gmm, manifest, &out)?;
    let result = UniversalityResult::from_rows(rows);
    out.write_aggregate(
        UNIVERSALITY_JSON,
        &serde_json::json!({
            "aggregates": result.aggregates,
            "max_abs_gap": result.max_abs_gap,
            "all_within_two_sigma": result.all_within_two_sigma,
        }),
    )?;
    out.log(&format!("universality done: max |gap| = {:.4}", result.max_abs_gap));
    Ok(result)
}
