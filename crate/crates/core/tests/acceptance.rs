//! Acceptance suite: every headline criterion at its stated tolerance and
//! runtime budget, one line per criterion. Exits non-zero on any failure.

use std::time::{Duration, Instant};

use dul_core::concentration::{
    assumption_diagnostics, contraction_report, linear_grid, tail_check, ConcentrationBound, LipschitzProbe,
};
use dul_core::experiments::{
    power_law_eigenvalues, run_spectra_campaign, run_universality, ExperimentKind, ExperimentManifest,
    SyntheticTarget, TargetSpec,
};
use dul_core::glm::{min_norm_interpolator, random_init, train_sgd_from, Objective, TrainConfig};
use dul_core::linalg::{random_orthogonal, sym_eigenvalues_desc};
use dul_core::mixtures::{ClassConditionalModel, GaussianComponent, GaussianMixture};
use dul_core::sampler::{apply_step_columns, build_schedule, generate, paired_trajectories, SamplerSettings};
use dul_core::seed::{derive_seed, stream_rng};
use dul_core::spectra::{fit_power_law, SpectrumReport, SpectrumSource};
use dul_core::{LabeledDataset, Provenance};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> (bool, String),
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn schedule_exactness() -> (bool, String) {
    let s = build_schedule(256, 80.0, 0.002, 7.0).unwrap();
    let e0 = (s.t(0) - 80.0).abs() / 80.0;
    let e1 = (s.t(255) - 0.002).abs() / 0.002;
    let decreasing = s.steps().windows(2).all(|w| w[0] > w[1]);
    (
        e0 <= 1e-12 && e1 <= 1e-12 && decreasing,
        format!("rel err t0 {e0:.1e}, t255 {e1:.1e}, strictly decreasing {decreasing} (tol 1e-12)"),
    )
}

fn score_consistency() -> (bool, String) {
    let d = 4;
    let mut rng = stream_rng(1, 0);
    let comps = (0..3)
        .map(|k| {
            let q = random_orthogonal(d, &mut rng);
            let eig = DVector::from_fn(d, |i, _| 0.2 + (i + k) as f64 * 0.3);
            let mean = DVector::from_fn(d, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            GaussianComponent::new([0.2, 0.3, 0.5][k], mean, &q * DMatrix::from_diagonal(&eig) * q.transpose())
                .unwrap()
        })
        .collect();
    let m = GaussianMixture::new(comps).unwrap();
    let mut worst: f64 = 0.0;
    for (j, &t) in [0.05, 0.3, 1.0, 4.0, 20.0].iter().enumerate() {
        let base = m.sample(20, 100 + j as u64);
        let noise = gaussian_matrix(20, d, 200 + j as u64);
        for p in 0..20 {
            let x: DVector<f64> = (base.row(p) + noise.row(p) * t).transpose();
            let score = m.score(&x, t).unwrap();
            let h = 1e-4 * t;
            let fd = DVector::from_fn(d, |i, _| {
                let mut e = DVector::zeros(d);
                e[i] = h;
                (m.log_density_noised(&(&x + &e), t).unwrap() - m.log_density_noised(&(&x - &e), t).unwrap())
                    / (2.0 * h)
            });
            worst = worst.max((fd - &score).norm() / score.norm());
        }
    }
    (worst <= 1e-5, format!("max relative error {worst:.2e} over 100 points (tol 1e-5)"))
}

fn convergence_target() -> (GaussianMixture, DVector<f64>, DMatrix<f64>) {
    let d = 8;
    let mut rng = stream_rng(2, 0);
    let q = random_orthogonal(d, &mut rng);
    let eig = DVector::from_fn(d, |i, _| 2.0 / (1.0 + i as f64));
    let cov = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let mu = DVector::from_fn(d, |i, _| (i as f64 - 3.5) * 0.5);
    (GaussianMixture::single(mu.clone(), cov.clone()).unwrap(), mu, cov)
}

fn sampler_convergence() -> (bool, String) {
    let (m, mu, cov) = convergence_target();
    let d = mu.len();
    let settings = SamplerSettings { steps: 64, gamma: 0.0, ..Default::default() };
    let n = 20_000;
    let x = generate(&settings.config(5).unwrap(), &m, n, &[]).unwrap().samples;
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let worst_z = (0..d).map(|j| (mean[j] - mu[j]).abs() / (cov[(j, j)] / n as f64).sqrt()).fold(0.0, f64::max);
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let emp = xc.tr_mul(&xc) / (n - 1) as f64;
    let frob = (&emp - &cov).norm() / cov.norm();
    (
        worst_z <= 3.0 && frob <= 0.05,
        format!("max |mean err|/SE {worst_z:.2} (tol 3), covariance rel Frobenius {frob:.4} (tol 0.05)"),
    )
}

fn implicit_bias() -> (bool, String) {
    let (n, d, k) = (16, 32, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let x = gaussian_matrix(n, d, 1000 + seed) / (d as f64).sqrt();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % k).collect();
        let data = LabeledDataset::new(x, labels, k, Provenance::Synthetic).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.02,
            cosine: false,
            batch_size: 4,
            epochs: 200_000,
            patience: usize::MAX,
            train_tolerance: Some(1e-10),
            init_scale: 1.0,
            seed,
            ..Default::default()
        };
        let w0 = random_init(d, k, &cfg, Objective::Interpolation);
        let sgd = train_sgd_from(w0.clone(), &data, None, &cfg, Objective::Interpolation).unwrap();
        let exact = min_norm_interpolator(&data, &w0).unwrap();
        worst = worst.max((sgd.classifier.weights() - exact.weights()).norm() / exact.weights().norm());
    }
    (worst <= 1e-4, format!("max relative Frobenius error {worst:.2e} over 10 seeds (tol 1e-4)"))
}

fn universality_gap() -> (bool, String) {
    let mut m = ExperimentManifest::new(ExperimentKind::Universality, TargetSpec::Synthetic(SyntheticTarget::default()));
    m.train.learning_rate = 0.3;
    let r = run_universality(&m).unwrap();
    let table: Vec<String> = r
        .aggregates
        .iter()
        .map(|a| format!("{}:{:+.4}/{:.4}", a.split, a.gap, 2.0 * a.run_spread))
        .collect();
    (
        r.max_abs_gap <= 0.03 && r.all_within_two_sigma,
        format!(
            "max |gap| {:.4} (tol 0.03), all within 2 sigma {} [split:gap/2sigma {}]",
            r.max_abs_gap,
            r.all_within_two_sigma,
            table.join(" ")
        ),
    )
}

fn compact_target() -> ClassConditionalModel {
    SyntheticTarget { dimension: 16, seed: 3, ..Default::default() }.build().unwrap()
}

fn contraction_at(gamma: f64) -> (f64, f64) {
    let model = compact_target();
    let settings = SamplerSettings { steps: 64, gamma, ..Default::default() };
    let mut records = Vec::new();
    let mut finals = Vec::new();
    for (id, mix) in model.classes() {
        let cfg = settings.config(derive_seed(0, &["diffusion".into(), (*id).into()])).unwrap().with_recording(true);
        records.extend(generate(&cfg, mix, 250, &[]).unwrap().records.unwrap());
        finals.extend(paired_trajectories(&cfg, mix, 250).unwrap().into_iter().map(|r| *r.last().unwrap()));
    }
    let rep = contraction_report(&records, None).unwrap();
    finals.sort_by(f64::total_cmp);
    let median = 0.5 * (finals[finals.len() / 2 - 1] + finals[finals.len() / 2]);
    (rep.fraction_decreasing, median)
}

fn contraction() -> (bool, String) {
    let (frac, median) = contraction_at(0.0);
    (
        frac >= 0.99 && median <= 0.05,
        format!("gamma 0: decreasing fraction {frac:.5} (tol 0.99), median paired final ratio {median:.2e} (tol 0.05)"),
    )
}

fn acom_tails() -> (bool, String) {
    let n = 100_000;
    let mut violations = 0;
    let mut checks = 0;
    let mut tightest = f64::INFINITY;
    let mut relaxed = 0;
    for d in [8usize, 32, 128] {
        for r in 0..20u64 {
            let a = gaussian_matrix(d, d, derive_seed(7, &[d.into(), r.into()]));
            let cov = &a * a.transpose() / d as f64;
            let m = GaussianMixture::single(DVector::zeros(d), cov.clone()).unwrap();
            let x = m.sample(n, derive_seed(8, &[d.into(), r.into()]));
            let bound = ConcentrationBound::gaussian(&cov).unwrap();
            let grid = linear_grid(0.05 * bound.sigma, 5.0 * bound.sigma, 100);
            for p in [LipschitzProbe::random_linear_unit(d, derive_seed(9, &[d.into(), r.into()])), LipschitzProbe::norm()]
            {
                let rep = tail_check(&x, &p, &bound, &grid).unwrap();
                violations += rep.violation_count();
                relaxed += rep
                    .s_grid
                    .iter()
                    .zip(&rep.ci_lo)
                    .filter(|(&s, &lo)| lo > 2.0 * (-s * s / (2.0 * bound.sigma * bound.sigma)).exp())
                    .count();
                checks += grid.len();
                tightest = rep.margin.iter().copied().fold(tightest, f64::min);
            }
        }
    }
    (
        violations == 0,
        format!("{violations} violations in {checks} grid checks (60 covariances x 2 probes), smallest bound-minus-survival {tightest:.3}; against 2exp(-s^2/(2 sigma^2)) {relaxed} violations"),
    )
}

fn assumption_counterexample() -> (bool, String) {
    let d = 256;
    let n = 100_000;
    let eig = power_law_eigenvalues(d, 1.2, 1.0);
    let mut rng = stream_rng(11, 0);
    let q = random_orthogonal(d, &mut rng);
    let cov = &q * DMatrix::from_diagonal(&DVector::from_vec(eig.clone())) * q.transpose();
    let analytic = 2.0 * eig.iter().map(|l| l * l).sum::<f64>();
    let power = GaussianMixture::single(DVector::zeros(d), cov).unwrap().sample(n, 12);
    let iso = GaussianMixture::single(DVector::zeros(d), DMatrix::identity(d, d) / d as f64).unwrap().sample(n, 13);
    let labels = vec![0; 2 * n];
    let mut x = DMatrix::zeros(2 * n, d);
    x.rows_mut(0, n).copy_from(&power);
    x.rows_mut(n, n).copy_from(&iso);
    let mut labels = labels;
    labels[n..].iter_mut().for_each(|l| *l = 1);
    let data = LabeledDataset::new(x, labels, 2, Provenance::Synthetic).unwrap();
    let diag = assumption_diagnostics(&data, 1, 1, 14).unwrap();
    let rel = (diag[0].var_quadratic_identity - analytic).abs() / analytic;
    let iso_var = diag[1].var_quadratic_identity;
    (
        rel <= 0.10 && iso_var <= 3.0 / d as f64,
        format!(
            "power law Var(x'x) {:.4} vs 2Tr(S^2) {analytic:.4}, rel err {rel:.4} (tol 0.10); isotropic Var {iso_var:.5} (tol 3/d = {:.5})",
            diag[0].var_quadratic_identity,
            3.0 / d as f64
        ),
    )
}

fn power_law_fit() -> (bool, String) {
    let len = 1000;
    let report = |ev: Vec<f64>| SpectrumReport {
        eigenvalues: ev,
        source: SpectrumSource::Covariance,
        n: len,
        d: len,
        class_id: None,
        step: None,
    };
    let exact = (1..=len).map(|i| (i as f64).powf(-1.2)).collect();
    let exact_err = (fit_power_law(&report(exact), None).unwrap().exponent + 1.2).abs();
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = stream_rng(derive_seed(15, &[trial.into()]), 0);
        let mut ev: Vec<f64> = (1..=len)
            .map(|i| (i as f64).powf(-1.2) * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        worst = worst.max((fit_power_law(&report(ev), None).unwrap().exponent + 1.2).abs());
    }
    (
        exact_err <= 1e-9 && worst <= 0.05,
        format!("exact |a + 1.2| {exact_err:.1e} (tol 1e-9); noisy max |a + 1.2| {worst:.4} over 100 trials (tol 0.05)"),
    )
}

fn gram_match() -> (bool, String) {
    let mut m = ExperimentManifest::new(ExperimentKind::Spectra, TargetSpec::Synthetic(SyntheticTarget::default()));
    m.n_per_class = Some(512);
    let b = run_spectra_campaign(&m).unwrap();
    let gap = b.gram_comparison.max_relative_gap;
    (
        gap <= 0.1,
        format!("top-{} Gram max relative gap {gap:.4} (tol 0.1), KS {:.4}", b.gram_comparison.top_k, b.gram_comparison.ks_distance),
    )
}

fn informational() {
    // with gamma = 0 the sampler is affine, so the exact output mean is the image of x0 = 0
    let (m, mu, cov) = convergence_target();
    let d = mu.len();
    let settings = SamplerSettings { steps: 64, gamma: 0.0, ..Default::default() };
    let cfg = settings.config(5).unwrap();
    let mut x0 = DMatrix::zeros(d, 1);
    for i in 0..64 {
        x0 = apply_step_columns(&x0, i, &cfg, &m, &DMatrix::zeros(d, 1)).unwrap();
    }
    let n = 20_000;
    let x = generate(&cfg, &m, n, &[]).unwrap().samples;
    let se = |j: usize| (cov[(j, j)] / n as f64).sqrt();
    let bias = (0..d).map(|j| (x0[(j, 0)] - mu[j]).abs() / se(j)).fold(0.0, f64::max);
    let resid = (0..d).map(|j| (x.column(j).mean() - x0[(j, 0)]).abs() / se(j)).fold(0.0, f64::max);
    println!(
        "[INFO] sampler mean: exact finite-t0 bias up to {bias:.2} SE, Monte-Carlo residual about the exact mean up to {resid:.2} SE"
    );

    let (frac, median) = contraction_at(0.05);
    println!("[INFO] contraction with gamma 0.05: decreasing fraction {frac:.5}, median paired final ratio {median:.2e}");

    let d = 32;
    let eig = DVector::from_fn(d, |i, _| 1.0 / (1.0 + i as f64));
    let cov = DMatrix::from_diagonal(&eig);
    let x = GaussianMixture::single(DVector::zeros(d), cov.clone()).unwrap().sample(100_000, 21);
    let mut top = DVector::zeros(d);
    top[0] = 1.0;
    let bound = ConcentrationBound::gaussian(&cov).unwrap();
    let rep = tail_check(&x, &LipschitzProbe::linear_unit(&top).unwrap(), &bound, &linear_grid(0.1, 4.0, 40)).unwrap();
    println!(
        "[INFO] probe along the top eigenvector against 2exp(-s^2/sigma^2): {} of 40 grid points violated",
        rep.violation_count()
    );

    let mut m = ExperimentManifest::new(ExperimentKind::Spectra, TargetSpec::Synthetic(SyntheticTarget::default()));
    m.n_per_class = Some(512);
    let b = run_spectra_campaign(&m).unwrap();
    for f in b.fits.iter().filter(|f| f.source == "covariance") {
        println!(
            "[INFO] {} class {} covariance exponent {:.3}, reference band [{}, {}] in band {}",
            f.dataset,
            f.class_id.unwrap_or(0),
            f.fit.exponent,
            f.band.0,
            f.band.1,
            f.in_band
        );
    }
    let ev = sym_eigenvalues_desc(&cov);
    println!("[INFO] largest eigenvalue of the probe covariance {:.3}", ev[0]);
}

fn main() {
    let criteria = [
        Criterion { name: "schedule exactness", budget: Duration::from_millis(1), run: schedule_exactness },
        Criterion { name: "score consistency", budget: Duration::from_secs(1), run: score_consistency },
        Criterion { name: "sampler convergence", budget: Duration::from_secs(30), run: sampler_convergence },
        Criterion { name: "implicit bias", budget: Duration::from_secs(10), run: implicit_bias },
        Criterion { name: "universality gap", budget: Duration::from_secs(300), run: universality_gap },
        Criterion { name: "contraction", budget: Duration::from_secs(60), run: contraction },
        Criterion { name: "ACoM tails", budget: Duration::from_secs(120), run: acom_tails },
        Criterion { name: "assumption counterexample", budget: Duration::from_secs(30), run: assumption_counterexample },
        Criterion { name: "power-law fit", budget: Duration::from_secs(5), run: power_law_fit },
        Criterion { name: "Gram match", budget: Duration::from_secs(60), run: gram_match },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let (ok, detail) = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = ok && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {}: {detail}; runtime {:.3}s (budget {}s{})",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs_f64(),
            if in_budget { "" } else { ", exceeded" }
        );
    }
    informational();
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
