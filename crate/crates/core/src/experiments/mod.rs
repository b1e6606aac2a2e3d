//! Experiment orchestration: manifests, synthetic targets, the universality
//! sweep and the spectra and concentration campaigns.

mod concentration_campaign;
mod spectra_campaign;
mod universality;

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use concentration_campaign::{
    run_concentration_campaign, ClassBundle, ConcentrationBundle, ConcentrationOptions, PairedSummary,
    ProbeKind, Sensitivity,
};
pub use spectra_campaign::{
    default_snapshot_steps, run_spectra_campaign, spectra_from_datasets, FitRecord, SpectraBundle, SpectraOptions,
};
pub use universality::{
    aggregate, run_universality, universality_sweep, SourceStats, SplitAggregate, SplitLayout,
    UniversalityResult, UniversalityRow, TRAINING_CSV, UNIVERSALITY_CSV, UNIVERSALITY_JSON,
};

use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::glm::{Objective, TrainConfig};
use crate::linalg::random_orthogonal;
use crate::mixtures::{
    ClassConditionalModel, CovarianceEstimator, GaussianComponent, GaussianMixture, ModelDocument, PsdFactor,
};
use crate::sampler::{generate, Generated, SamplerConfig, SamplerSettings};
use crate::seed::{derive_seed, short_hash, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Universality,
    Spectra,
    Concentration,
}

impl ExperimentKind {
    pub const ALL: [&'static str; 3] = ["universality", "spectra", "concentration"];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Universality => "universality",
            ExperimentKind::Spectra => "spectra",
            ExperimentKind::Concentration => "concentration",
        }
    }
}

/// Where the class-conditional target comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// A model JSON file.
    Path(PathBuf),
    Inline(ModelDocument),
    Synthetic(SyntheticTarget),
}

/// Balanced classes, each a mixture of Gaussians with a power-law spectrum
/// under an independent random rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTarget {
    pub num_classes: usize,
    pub dimension: usize,
    pub components_per_class: usize,
    /// α in λ_i ∝ i^{−α}.
    pub spectrum_exponent: f64,
    /// Trace of every component covariance.
    pub component_trace: f64,
    /// Norm of each class centre.
    pub class_separation: f64,
    /// Norm of each component's offset from its class centre.
    pub component_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticTarget {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dimension: 64,
            components_per_class: 3,
            spectrum_exponent: 1.2,
            component_trace: 1.0,
            class_separation: 0.2,
            component_spread: 0.2,
            seed: 0,
        }
    }
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = v.norm();
    v / n
}

/// λ_i = i^{−α} rescaled to sum to `trace`.
pub fn power_law_eigenvalues(d: usize, alpha: f64, trace: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=d).map(|i| (i as f64).powf(-alpha)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v * trace / s).collect()
}

impl SyntheticTarget {
    pub fn build(&self) -> Result<ClassConditionalModel> {
        let d = self.dimension;
        if d == 0 || self.num_classes == 0 || self.components_per_class == 0 {
            return Err(Error::InvalidConfig("synthetic target needs d, classes and components ≥ 1".into()));
        }
        if !(self.component_trace > 0.0 && self.spectrum_exponent.is_finite()) {
            return Err(Error::InvalidConfig("component_trace must be > 0 and the exponent finite".into()));
        }
        if !(self.class_separation >= 0.0 && self.component_spread >= 0.0) {
            return Err(Error::InvalidConfig("separation and spread must be ≥ 0".into()));
        }
        let mut rng = stream_rng(self.seed, 0);
        let eig = DVector::from_vec(power_law_eigenvalues(d, self.spectrum_exponent, self.component_trace));
        let mut mixtures = Vec::with_capacity(self.num_classes);
        for _ in 0..self.num_classes {
            let centre = random_unit(d, &mut rng) * self.class_separation;
            let mut comps = Vec::with_capacity(self.components_per_class);
            for _ in 0..self.components_per_class {
                let mean = &centre + random_unit(d, &mut rng) * self.component_spread;
                let q = random_orthogonal(d, &mut rng);
                let weight = 0.25 + 0.5 * rng.random::<f64>();
                comps.push(GaussianComponent::from_factor(weight, mean, PsdFactor::from_parts(eig.clone(), q)?)?);
            }
            mixtures.push(GaussianMixture::normalized(comps)?);
        }
        ClassConditionalModel::balanced(mixtures)
    }
}

fn default_objective() -> Objective {
    Objective::SoftmaxMse
}

fn default_splits() -> Vec<usize> {
    vec![32, 64, 128, 256, 512]
}

fn default_n_test() -> usize {
    1024
}

fn default_repetitions() -> usize {
    10
}

/// A complete, self-describing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub kind: ExperimentKind,
    pub target: TargetSpec,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Training rows per class, one sweep point each.
    #[serde(default = "default_splits")]
    pub splits: Vec<usize>,
    /// Held-out rows per class.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Generated rows per class; the default depends on the experiment.
    #[serde(default)]
    pub n_per_class: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    /// Also evaluate GMM-trained classifiers on the diffusion test set.
    #[serde(default)]
    pub cross_evaluate: bool,
    #[serde(default)]
    pub covariance_estimator: CovarianceEstimator,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub spectra: SpectraOptions,
    #[serde(default)]
    pub concentration: ConcentrationOptions,
}

impl ExperimentManifest {
    /// A manifest with every optional field at its default.
    pub fn new(kind: ExperimentKind, target: TargetSpec) -> Self {
        Self {
            kind,
            target,
            sampler: SamplerSettings::default(),
            train: TrainConfig::default(),
            objective: default_objective(),
            splits: default_splits(),
            n_test: default_n_test(),
            repetitions: default_repetitions(),
            n_per_class: None,
            base_seed: 0,
            cross_evaluate: false,
            covariance_estimator: CovarianceEstimator::default(),
            output_dir: None,
            spectra: SpectraOptions::default(),
            concentration: ConcentrationOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The manifest without its output location.
    pub fn portable(&self) -> Self {
        Self { output_dir: None, ..self.clone() }
    }

    /// Stable digest of the manifest contents, output location excluded.
    pub fn config_hash(&self) -> Result<String> {
        Ok(short_hash(&serde_json::to_vec(&self.portable())?))
    }

    /// Makes relative file references relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let TargetSpec::Path(p) = &mut self.target {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut self.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be ≥ 1".into()));
        }
        if self.kind == ExperimentKind::Universality {
            if self.splits.is_empty() || self.splits.contains(&0) {
                return Err(Error::InvalidConfig("splits must be a non-empty list of positive sizes".into()));
            }
            if self.n_test == 0 {
                return Err(Error::InvalidConfig("n_test must be ≥ 1".into()));
            }
            let needed = self.splits.iter().max().copied().unwrap_or(0) + self.n_test;
            if let Some(n) = self.n_per_class {
                if n < needed {
                    return Err(Error::InsufficientSamples { needed, got: n });
                }
            }
        }
        if self.n_per_class == Some(0) {
            return Err(Error::InvalidConfig("n_per_class must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn load_target(&self) -> Result<ClassConditionalModel> {
        match &self.target {
            TargetSpec::Path(p) => ClassConditionalModel::from_json(&fs::read_to_string(p)?),
            TargetSpec::Inline(doc) => ClassConditionalModel::try_from(doc),
            TargetSpec::Synthetic(s) => s.build(),
        }
    }

    fn rows_per_class(&self, fallback: usize) -> usize {
        self.n_per_class.unwrap_or(fallback)
    }
}

/// Output tree of one experiment. Without a root nothing is written.
#[derive(Debug)]
pub struct RunDir {
    root: Option<PathBuf>,
    log: Option<Mutex<File>>,
}

impl RunDir {
    pub fn open(root: Option<&Path>) -> Result<Self> {
        let Some(root) = root else {
            return Ok(Self { root: None, log: None });
        };
        for sub in ["datasets", "results", "aggregates", "logs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(root.join("logs").join("run.log"))?;
        Ok(Self { root: Some(root.to_path_buf()), log: Some(Mutex::new(log)) })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// `<root>/<sub>/<name>` if writing is enabled.
    pub fn path(&self, sub: &str, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(sub).join(name))
    }

    pub fn log(&self, msg: &str) {
        if let Some(log) = &self.log {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            if let Ok(mut f) = log.lock() {
                let _ = writeln!(f, "[{ts:.3}] {msg}");
            }
        }
    }

    pub fn write_manifest(&self, manifest: &ExperimentManifest) -> Result<()> {
        if let Some(root) = &self.root {
            crate::io::write_json(&root.join("manifest.json"), &manifest.portable())?;
        }
        Ok(())
    }

    pub fn write_dataset(&self, stem: &str, data: &LabeledDataset, hash: &str) -> Result<()> {
        if let Some(root) = &self.root {
            crate::io::write_dataset(&root.join("datasets"), stem, data, hash)?;
        }
        Ok(())
    }

    pub fn write_model(&self, stem: &str, model: &ClassConditionalModel) -> Result<()> {
        if let Some(root) = &self.root {
            let mut text = model.to_json()?;
            text.push('\n');
            fs::write(root.join("datasets").join(format!("{stem}.json")), text)?;
        }
        Ok(())
    }

    pub fn write_csv<T: Serialize + crate::io::CsvHeader>(&self, name: &str, rows: &[T]) -> Result<()> {
        if let Some(p) = self.path("results", name) {
            crate::io::write_csv(&p, rows)?;
        }
        Ok(())
    }

    pub fn write_aggregate<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        if let Some(p) = self.path("aggregates", name) {
            crate::io::write_json(&p, value)?;
        }
        Ok(())
    }
}

/// Per-class diffusion output, rows grouped by class in class order.
pub struct ClassGeneration {
    pub data: LabeledDataset,
    pub per_class: Vec<Generated>,
}

/// Runs the sampler once per class with the class mixture as denoiser.
pub fn generate_classes(
    model: &ClassConditionalModel,
    settings: &SamplerSettings,
    base_seed: u64,
    n_per_class: usize,
    snapshot_steps: &[usize],
    configure: impl Fn(SamplerConfig) -> SamplerConfig,
) -> Result<ClassGeneration> {
    if n_per_class == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let k = model.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut parts = Vec::with_capacity(k);
    for (pos, (id, mixture)) in model.classes().iter().enumerate() {
        let cfg = configure(settings.config(derive_seed(base_seed, &["diffusion".into(), (*id).into()]))?);
        let g = generate(&cfg, mixture, n_per_class, snapshot_steps)?;
        parts.push(LabeledDataset::new(g.samples.clone(), vec![pos; n_per_class], k, Provenance::Diffusion)?);
        per_class.push(g);
    }
    Ok(ClassGeneration { data: LabeledDataset::concat(&parts)?, per_class })
}
