use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dul_core::concentration::{affine_step_norm, covariance_eigenvalues};
use dul_core::experiments::*;
use dul_core::io::read_csv;
use dul_core::linalg::random_orthogonal;
use dul_core::mixtures::{ClassConditionalModel, GaussianMixture, ModelDocument};
use dul_core::sampler::generate;
use dul_core::seed::{derive_seed, stream_rng};
use dul_core::spectra::{covariance_spectrum, gram_spectrum};
use dul_core::{LabeledDataset, Provenance};
use nalgebra::{DMatrix, DVector};

fn gaussian_classes(d: usize, k: usize, seed: u64) -> ClassConditionalModel {
    let mut rng = stream_rng(seed, 0);
    let mixtures = (0..k)
        .map(|c| {
            let q = random_orthogonal(d, &mut rng);
            let eig = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 0.5 / (i + 1) as f64));
            let cov = &q * eig * q.transpose();
            let mean = DVector::from_fn(d, |i, _| if i == c { 0.6 } else { 0.0 });
            GaussianMixture::single(mean, cov).unwrap()
        })
        .collect();
    ClassConditionalModel::balanced(mixtures).unwrap()
}

fn small_universality(model: &ClassConditionalModel) -> ExperimentManifest {
    let mut m = ExperimentManifest::new(
        ExperimentKind::Universality,
        TargetSpec::Inline(ModelDocument::from(model)),
    );
    m.sampler.steps = 24;
    m.splits = vec![8, 16, 32];
    m.n_test = 256;
    m.repetitions = 6;
    m.n_per_class = Some(512);
    m.train.learning_rate = 0.3;
    m.train.epochs = 60;
    m.base_seed = 11;
    m
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["datasets", "results", "aggregates"] {
        for entry in fs::read_dir(root.join(sub)).unwrap() {
            let p = entry.unwrap().path();
            out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap());
        }
    }
    out.insert("manifest.json".into(), fs::read(root.join("manifest.json")).unwrap());
    out
}

#[test]
fn manifest_defaults_and_rejections() {
    let m = ExperimentManifest::from_json(r#"{"kind": "universality", "target": {"synthetic": {}}}"#).unwrap();
    assert_eq!(m.splits, vec![32, 64, 128, 256, 512]);
    assert_eq!(m.n_test, 1024);
    assert_eq!(m.repetitions, 10);
    assert_eq!(m.sampler.steps, 64);
    assert!(!m.cross_evaluate);
    assert!(ExperimentManifest::from_json(r#"{"kind": "sweep", "target": {"synthetic": {}}}"#).is_err());
    assert!(ExperimentManifest::from_json(r#"{"kind": "spectra", "target": {"synthetic": {}}, "colour": 1}"#).is_err());

    let mut bad = m.clone();
    bad.repetitions = 0;
    assert!(bad.validate().is_err());
    let mut small = m.clone();
    small.n_per_class = Some(1000);
    assert!(small.validate().is_err());

    let back = ExperimentManifest::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn config_hash_ignores_output_location() {
    let mut a = ExperimentManifest::new(ExperimentKind::Spectra, TargetSpec::Synthetic(SyntheticTarget::default()));
    let h = a.config_hash().unwrap();
    a.output_dir = Some("/somewhere".into());
    assert_eq!(a.config_hash().unwrap(), h);
    a.base_seed = 1;
    assert_ne!(a.config_hash().unwrap(), h);
}

#[test]
fn synthetic_target_shape() {
    let t = SyntheticTarget { dimension: 12, num_classes: 3, ..Default::default() };
    let model = t.build().unwrap();
    assert_eq!(model.num_classes(), 3);
    assert_eq!(model.dimension(), 12);
    for c in 0..3 {
        let mix = model.mixture(c);
        assert_eq!(mix.components().len(), 3);
        let w: f64 = mix.components().iter().map(|c| c.weight()).sum();
        assert!((w - 1.0).abs() < 1e-12);
        for comp in mix.components() {
            assert!((comp.covariance().trace() - 1.0).abs() < 1e-10);
        }
    }
    assert_eq!(t.build().unwrap().mixture(1).components()[0].mean(), model.mixture(1).components()[0].mean());
}

#[test]
fn split_layout_keeps_test_reserve_disjoint() {
    let model = gaussian_classes(4, 3, 1);
    let ds = model.sample_dataset(40, 5, Provenance::Gmm).unwrap();
    let layout = SplitLayout::new(&ds, 10).unwrap();
    assert_eq!(layout.pool(), 30);
    let test = layout.test_rows();
    assert_eq!(test.len(), 30);
    for seed in 0..20 {
        let train = layout.train_rows(12, seed).unwrap();
        assert_eq!(train.len(), 36);
        assert!(train.iter().all(|r| !test.contains(r)));
        for c in 0..3 {
            assert_eq!(train.iter().filter(|&&r| ds.labels()[r] == c).count(), 12);
        }
    }
    assert_ne!(layout.train_rows(12, 0).unwrap(), layout.train_rows(12, 1).unwrap());
    assert!(layout.train_rows(31, 0).is_err());
    assert!(SplitLayout::new(&ds, 40).is_err());
}

#[test]
fn identical_sources_have_zero_gap() {
    let model = gaussian_classes(6, 2, 2);
    let ds = model.sample_dataset(200, 3, Provenance::Diffusion).unwrap();
    let twin = LabeledDataset::new(ds.x().clone(), ds.labels().to_vec(), ds.k(), Provenance::Gmm).unwrap();
    let mut m = small_universality(&model);
    m.n_test = 100;
    m.repetitions = 3;
    let rows = universality_sweep(&ds, &twin, &m, &RunDir::open(None).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 3);
    let result = UniversalityResult::from_rows(rows);
    for a in &result.aggregates {
        assert_eq!(a.gap, 0.0);
        assert_eq!(a.diffusion.count, 3);
        assert_eq!(a.gmm.count, 3);
    }
    assert!(result.all_within_two_sigma);
}

#[test]
fn single_gaussian_target_gap_within_run_spread() {
    let model = gaussian_classes(8, 2, 3);
    let m = small_universality(&model);
    let result = run_universality(&m).unwrap();
    assert_eq!(result.rows.len(), 2 * 3 * 6);
    for a in &result.aggregates {
        assert!((0.0..=1.0).contains(&a.diffusion.mean) && (0.0..=1.0).contains(&a.gmm.mean));
        assert!(a.abs_gap <= 2.0 * a.run_spread, "split {}: gap {} spread {}", a.split, a.gap, a.run_spread);
    }
}

#[test]
fn universality_results_are_reproducible_and_recomputable() {
    let model = gaussian_classes(5, 2, 4);
    let mut m = small_universality(&model);
    m.splits = vec![8, 16];
    m.repetitions = 2;
    m.n_test = 64;
    m.n_per_class = Some(100);
    m.cross_evaluate = true;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    m.output_dir = Some(a.path().to_path_buf());
    let ra = run_universality(&m).unwrap();
    m.output_dir = Some(b.path().to_path_buf());
    let rb = run_universality(&m).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(files_under(a.path()), files_under(b.path()));
    assert!(a.path().join("logs/run.log").exists());
    assert!(a.path().join("datasets/diffusion.bin").exists());

    let rows: Vec<UniversalityRow> = read_csv(&a.path().join("results/universality.csv")).unwrap();
    assert_eq!(rows, ra.rows);
    assert!(rows.iter().all(|r| r.diffusion_test_accuracy.is_some()));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("aggregates/universality.json")).unwrap()).unwrap();
    let stored: Vec<SplitAggregate> = serde_json::from_value(json["aggregates"].clone()).unwrap();
    assert_eq!(stored, aggregate(&rows));
}

#[test]
fn one_class_spectra_campaign_matches_direct_calls() {
    let target = SyntheticTarget { num_classes: 1, dimension: 10, ..Default::default() };
    let mut m = ExperimentManifest::new(ExperimentKind::Spectra, TargetSpec::Synthetic(target.clone()));
    m.sampler.steps = 16;
    m.n_per_class = Some(300);
    m.base_seed = 9;
    let bundle = run_spectra_campaign(&m).unwrap();

    let model = target.build().unwrap();
    let cfg = m.sampler.config(derive_seed(9, &["diffusion".into(), 0usize.into()])).unwrap();
    let x = generate(&cfg, model.mixture(0), 300, &[]).unwrap().samples;
    let direct = covariance_spectrum(&x, true).unwrap().with_class(0);
    assert_eq!(bundle.covariance_diffusion, vec![direct]);
    assert_eq!(bundle.gram_diffusion, gram_spectrum(&x).unwrap());
    let last = bundle.snapshots.last().unwrap();
    assert_eq!(last.step, Some(16));
    assert_eq!(last.eigenvalues, bundle.gram_diffusion.eigenvalues);
}

#[test]
fn step_zero_snapshot_is_scaled_wishart() {
    let target = SyntheticTarget { num_classes: 2, dimension: 32, ..Default::default() };
    let mut m = ExperimentManifest::new(ExperimentKind::Spectra, TargetSpec::Synthetic(target));
    m.sampler.steps = 8;
    m.n_per_class = Some(1024);
    let bundle = run_spectra_campaign(&m).unwrap();
    assert_eq!(default_snapshot_steps(8), vec![0, 1, 2, 3, 4, 6, 8]);
    let snap = &bundle.snapshots[0];
    assert_eq!(snap.step, Some(0));
    // n = 2048, d = 32: XᵀX/(t0²n) has Marchenko–Pastur edges (1 ± √(d/n))²
    let (n, d, t0) = (2048.0, 32.0, 80.0);
    let scaled: Vec<f64> = snap.eigenvalues.iter().map(|v| v / (t0 * t0 * n)).collect();
    let ratio: f64 = d / n;
    let (lo, hi) = ((1.0 - ratio.sqrt()).powi(2), (1.0 + ratio.sqrt()).powi(2));
    assert!(scaled[0] < hi * 1.05 && scaled[0] > hi * 0.9, "top {}", scaled[0]);
    assert!(scaled[31] > lo * 0.95 && scaled[31] < lo * 1.15, "bottom {}", scaled[31]);
    let mean = scaled.iter().sum::<f64>() / d;
    assert!((mean - 1.0).abs() < 0.02);
}

#[test]
fn deterministic_single_gaussian_passes_analytic_bounds() {
    let d = 8;
    let mut rng = stream_rng(21, 0);
    let q = random_orthogonal(d, &mut rng);
    let eig = DVector::from_fn(d, |i, _| 0.4 / (i + 1) as f64);
    let cov = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let model = ClassConditionalModel::balanced(vec![GaussianMixture::single(DVector::zeros(d), cov.clone()).unwrap()])
        .unwrap();
    let mut m = ExperimentManifest::new(ExperimentKind::Concentration, TargetSpec::Inline(ModelDocument::from(&model)));
    m.sampler.steps = 32;
    m.n_per_class = Some(1500);
    m.concentration.lipschitz_steps = vec![0, 8, 20, 31];
    m.concentration.paired_trajectories = 40;
    let bundle = run_concentration_campaign(&m).unwrap();
    let class = &bundle.classes[0];

    assert_eq!(class.contraction.fraction_decreasing, 1.0);
    assert!(!class.tails.is_empty());
    for t in &class.tails {
        assert_eq!(t.violation_count(), 0, "{}", t.probe);
    }
    assert!(class.sensitivity.iter().all(|s| s.violations == 0));
    let cfg = m.sampler.config(0).unwrap();
    let ev = covariance_eigenvalues(&cov);
    for est in &class.lipschitz {
        let exact = affine_step_norm(&ev, &cfg, est.step);
        assert!((est.max - exact).abs() <= 1e-4 * exact.max(1.0), "step {}: {} vs {exact}", est.step, est.max);
    }
    let paired = class.paired.as_ref().unwrap();
    assert_eq!(paired.median_ratio.len(), 33);
    assert!(paired.median_final_ratio < 0.05);
    assert_eq!(class.norms.len(), 2);
}

#[test]
fn empty_probe_list_leaves_contraction_and_diagnostics() {
    let target = SyntheticTarget { num_classes: 2, dimension: 6, ..Default::default() };
    let mut m = ExperimentManifest::new(ExperimentKind::Concentration, TargetSpec::Synthetic(target));
    m.sampler.steps = 12;
    m.n_per_class = Some(64);
    m.concentration.probes.clear();
    let bundle = run_concentration_campaign(&m).unwrap();
    assert_eq!(bundle.classes.len(), 2);
    assert_eq!(bundle.overall.trajectories, 128);
    assert_eq!(bundle.overall.per_class.len(), 2);
    for c in &bundle.classes {
        let v = serde_json::to_value(c).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["class_id", "contraction", "diagnostics"]);
    }
}

#[test]
fn concentration_campaign_writes_documented_tables() {
    let target = SyntheticTarget { num_classes: 2, dimension: 6, ..Default::default() };
    let mut m = ExperimentManifest::new(ExperimentKind::Concentration, TargetSpec::Synthetic(target));
    m.sampler.steps = 10;
    m.n_per_class = Some(1000);
    m.concentration.pixel_count = 2;
    let dir = tempfile::tempdir().unwrap();
    m.output_dir = Some(dir.path().to_path_buf());
    let bundle = run_concentration_campaign(&m).unwrap();
    let traj = fs::read_to_string(dir.path().join("results/trajectories.csv")).unwrap();
    assert!(traj.starts_with("trajectory_id,step,t_i,norm,post_injection_norm\n"));
    assert_eq!(traj.lines().count(), 1 + 2000 * 11);
    let hist = fs::read_to_string(dir.path().join("results/norm_histograms.csv")).unwrap();
    assert!(hist.starts_with("class_id,p,bin_lo,bin_hi,count\n"));
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 2000 * 2);
    let pixels = fs::read_to_string(dir.path().join("results/pixel_norms.csv")).unwrap();
    assert_eq!(pixels.lines().count(), 1 + 2000 * 11 * 2);
    let stored: ConcentrationBundle =
        serde_json::from_str(&fs::read_to_string(dir.path().join("aggregates/concentration.json")).unwrap()).unwrap();
    assert_eq!(stored, bundle);
}
