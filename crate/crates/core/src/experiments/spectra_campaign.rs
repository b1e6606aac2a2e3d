use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_classes, ExperimentManifest, RunDir};
use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::io::spectrum_rows;
use crate::mixtures::match_moments;
use crate::seed::derive_seed;
use crate::spectra::{
    compare_spectra, covariance_spectrum, fit_power_law, gram_spectrum_with, PowerLawFit, SpectrumDivergence,
    SpectrumReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraOptions {
    /// Steps at which the whole batch is snapshotted; default 0 plus
    /// log-spaced steps up to N.
    pub snapshot_steps: Option<Vec<usize>>,
    /// 1-based inclusive index range for power-law fits.
    pub fit_range: Option<(usize, usize)>,
    /// Fits outside this exponent band are flagged, not rejected.
    pub expected_band: (f64, f64),
    pub top_k: usize,
    pub centered_gram: bool,
    pub centered_covariance: bool,
}

impl Default for SpectraOptions {
    fn default() -> Self {
        Self {
            snapshot_steps: None,
            fit_range: None,
            expected_band: (-1.4, -1.0),
            top_k: 50,
            centered_gram: false,
            centered_covariance: true,
        }
    }
}

/// Step 0 and seven log-spaced steps in [1, N], deduplicated.
pub fn default_snapshot_steps(n: usize) -> Vec<usize> {
    let mut steps = vec![0];
    if n > 0 {
        steps.extend((0..7).map(|j| ((n as f64).powf(j as f64 / 6.0)).round() as usize));
    }
    steps.sort_unstable();
    steps.dedup();
    steps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// "diffusion" or "gmm".
    pub dataset: String,
    /// "covariance" or "gram".
    pub source: String,
    pub class_id: Option<usize>,
    #[serde(flatten)]
    pub fit: PowerLawFit,
    pub band: (f64, f64),
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraBundle {
    pub covariance_diffusion: Vec<SpectrumReport>,
    pub covariance_gmm: Vec<SpectrumReport>,
    pub gram_diffusion: SpectrumReport,
    pub gram_gmm: SpectrumReport,
    /// Gram spectra of the full diffusion batch at each snapshot step.
    pub snapshots: Vec<SpectrumReport>,
    pub fits: Vec<FitRecord>,
    pub gram_comparison: SpectrumDivergence,
    pub covariance_comparison: Vec<SpectrumDivergence>,
}

fn fit_record(dataset: &str, report: &SpectrumReport, opts: &SpectraOptions) -> Result<Option<FitRecord>> {
    match fit_power_law(report, opts.fit_range) {
        Ok(fit) => Ok(Some(FitRecord {
            dataset: dataset.into(),
            source: report.source.as_str().into(),
            class_id: report.class_id,
            in_band: fit.exponent >= opts.expected_band.0 && fit.exponent <= opts.expected_band.1,
            band: opts.expected_band,
            fit,
        })),
        // too short or rank deficient: nothing to fit unless a range was asked for
        Err(Error::InvalidRange(_)) if opts.fit_range.is_none() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Spectra, fits and comparisons of two datasets with the same classes.
/// `snapshots` holds (step, n×d) states of the diffusion batch.
pub fn spectra_from_datasets(
    diffusion: &LabeledDataset,
    gmm: &LabeledDataset,
    snapshots: &[(usize, DMatrix<f64>)],
    opts: &SpectraOptions,
) -> Result<SpectraBundle> {
    if diffusion.k() != gmm.k() || diffusion.d() != gmm.d() {
        return Err(Error::DimensionMismatch { expected: diffusion.d(), got: gmm.d() });
    }
    let per_class = |data: &LabeledDataset| -> Result<Vec<SpectrumReport>> {
        (0..data.k())
            .into_par_iter()
            .map(|c| covariance_spectrum(&data.class_rows(c), opts.centered_covariance).map(|r| r.with_class(c)))
            .collect()
    };
    let covariance_diffusion = per_class(diffusion)?;
    let covariance_gmm = per_class(gmm)?;
    let gram_diffusion = gram_spectrum_with(diffusion.x(), opts.centered_gram)?;
    let gram_gmm = gram_spectrum_with(gmm.x(), opts.centered_gram)?;
    let snapshot_reports = snapshots
        .par_iter()
        .map(|(step, x)| gram_spectrum_with(x, opts.centered_gram).map(|r| r.with_step(*step)))
        .collect::<Result<Vec<_>>>()?;

    let mut fits = Vec::new();
    for (name, reports, gram) in
        [("diffusion", &covariance_diffusion, &gram_diffusion), ("gmm", &covariance_gmm, &gram_gmm)]
    {
        for r in reports.iter().chain(std::iter::once(gram)) {
            fits.extend(fit_record(name, r, opts)?);
        }
    }
    let gram_comparison = compare_spectra(&gram_diffusion, &gram_gmm, opts.top_k)?;
    let covariance_comparison = covariance_diffusion
        .iter()
        .zip(&covariance_gmm)
        .map(|(a, b)| compare_spectra(a, b, opts.top_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectraBundle {
        covariance_diffusion,
        covariance_gmm,
        gram_diffusion,
        gram_gmm,
        snapshots: snapshot_reports,
        fits,
        gram_comparison,
        covariance_comparison,
    })
}

/// Diffusion data with snapshots, its moment-matched GMM, and every spectrum.
pub fn run_spectra_campaign(manifest: &ExperimentManifest) -> Result<SpectraBundle> {
    manifest.validate()?;
    let opts = &manifest.spectra;
    let model = manifest.load_target()?;
    let n_per_class = manifest.rows_per_class(2048);
    let out = RunDir::open(manifest.output_dir.as_deref())?;
    let hash = manifest.config_hash()?;
    out.write_manifest(manifest)?;
    out.log(&format!("spectra: k={} d={} n_per_class={n_per_class}", model.num_classes(), model.dimension()));

    let steps = opts.snapshot_steps.clone().unwrap_or_else(|| default_snapshot_steps(manifest.sampler.steps));
    if let Some(&bad) = steps.iter().find(|&&s| s > manifest.sampler.steps) {
        return Err(Error::InvalidRange(format!("snapshot step {bad} exceeds N = {}", manifest.sampler.steps)));
    }
    let generation = generate_classes(&model, &manifest.sampler, manifest.base_seed, n_per_class, &steps, |c| c)?;
    let diffusion = generation.data;
    let d = diffusion.d();
    let snapshots: Vec<(usize, DMatrix<f64>)> = generation.per_class[0]
        .snapshots
        .iter()
        .enumerate()
        .map(|(j, (step, _))| {
            let mut x = DMatrix::zeros(diffusion.n(), d);
            for (c, g) in generation.per_class.iter().enumerate() {
                x.rows_mut(c * n_per_class, n_per_class).copy_from(&g.snapshots[j].1);
            }
            (*step, x)
        })
        .collect();
    out.log("diffusion dataset generated");

    let gmm_model = match_moments(&diffusion, manifest.covariance_estimator)?;
    let gmm = gmm_model.sample_dataset(n_per_class, derive_seed(manifest.base_seed, &["gmm".into()]), Provenance::Gmm)?;
    out.write_model("target_model", &model)?;
    out.write_model("gmm_model", &gmm_model)?;
    out.write_dataset("diffusion", &diffusion, &hash)?;
    out.write_dataset("gmm", &gmm, &hash)?;

    let bundle = spectra_from_datasets(&diffusion, &gmm, &snapshots, opts)?;
    for (name, cov, gram) in [
        ("spectra_diffusion.csv", &bundle.covariance_diffusion, &bundle.gram_diffusion),
        ("spectra_gmm.csv", &bundle.covariance_gmm, &bundle.gram_gmm),
    ] {
        let rows: Vec<_> = cov.iter().chain(std::iter::once(gram)).flat_map(spectrum_rows).collect();
        out.write_csv(name, &rows)?;
    }
    let snap_rows: Vec<_> = bundle.snapshots.iter().flat_map(spectrum_rows).collect();
    out.write_csv("spectra_snapshots.csv", &snap_rows)?;
    out.write_aggregate("power_law_fits.json", &bundle.fits)?;
    out.write_aggregate(
        "spectra_comparison.json",
        &serde_json::json!({
            "gram": bundle.gram_comparison,
            "covariance": bundle.covariance_comparison,
        }),
    )?;
    out.log(&format!("spectra done: top-{} Gram gap = {:.4}", opts.top_k, bundle.gram_comparison.max_relative_gap));
    Ok(bundle)
}
