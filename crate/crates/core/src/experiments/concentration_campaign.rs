use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_classes, ExperimentManifest, RunDir};
use crate::concentration::{
    assumption_diagnostics, composite_tail_check, contraction_report, estimate_step_lipschitz, linear_grid,
    norm_distributions, ClassDiagnostics, ConcentrationBound, ContractionReport, LipschitzEstimate,
    LipschitzProbe, NormSummary, TailReport,
};
use crate::error::{Error, Result};
use crate::io::{histogram_rows, pixel_rows, trajectory_rows};
use crate::sampler::paired_trajectories;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LinearUnit,
    Norm,
    SoftReluProjection,
}

impl ProbeKind {
    fn as_str(self) -> &'static str {
        match self {
            ProbeKind::LinearUnit => "linear_unit",
            ProbeKind::Norm => "norm",
            ProbeKind::SoftReluProjection => "soft_relu_projection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcentrationOptions {
    /// An empty list skips tails and norm distributions.
    pub probes: Vec<ProbeKind>,
    /// Random directions per directional probe kind.
    pub n_directions: usize,
    pub s_grid: Option<Vec<f64>>,
    pub c1: f64,
    pub c2: f64,
    /// Extra c₁ values whose violation counts are reported.
    pub c1_sensitivity: Vec<f64>,
    pub p_list: Vec<f64>,
    pub bins: usize,
    /// Evenly spaced coordinates whose magnitudes are tracked.
    pub pixel_count: usize,
    pub lipschitz_steps: Vec<usize>,
    pub lipschitz_points: usize,
    pub paired_trajectories: usize,
    pub diagnostic_directions: usize,
    pub q_max: u32,
}

impl Default for ConcentrationOptions {
    fn default() -> Self {
        Self {
            probes: vec![ProbeKind::LinearUnit, ProbeKind::Norm, ProbeKind::SoftReluProjection],
            n_directions: 4,
            s_grid: None,
            c1: 0.0,
            c2: 1.0,
            c1_sensitivity: vec![1e-6, 1e-4, 1e-2],
            p_list: vec![1.0, 2.0],
            bins: 32,
            pixel_count: 4,
            lipschitz_steps: Vec::new(),
            lipschitz_points: 2,
            paired_trajectories: 0,
            diagnostic_directions: 16,
            q_max: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub probe: String,
    pub c1: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub pairs: usize,
    /// Median over pairs of ‖x^{(i)} − x̃^{(i)}‖/‖x^{(0)} − x̃^{(0)}‖, per step.
    pub median_ratio: Vec<f64>,
    pub median_final_ratio: f64,
    pub max_final_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBundle {
    pub class_id: usize,
    pub contraction: ContractionReport,
    pub diagnostics: ClassDiagnostics,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tails: Vec<TailReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sensitivity: Vec<Sensitivity>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub norms: Vec<NormSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lipschitz: Vec<LipschitzEstimate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub paired: Option<PairedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationBundle {
    pub classes: Vec<ClassBundle>,
    /// Contraction over every trajectory, with per-class breakdown.
    pub overall: ContractionReport,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize_pairs(ratios: &[Vec<f64>]) -> PairedSummary {
    let steps = ratios[0].len();
    let median_ratio = (0..steps)
        .map(|i| median(&mut ratios.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect();
    let mut finals: Vec<f64> = ratios.iter().map(|r| r[steps - 1]).collect();
    let max_final_ratio = finals.iter().copied().fold(0.0, f64::max);
    PairedSummary { pairs: ratios.len(), median_ratio, median_final_ratio: median(&mut finals), max_final_ratio }
}

fn build_probes(kinds: &[ProbeKind], d: usize, n_directions: usize, seed: u64) -> Result<Vec<LipschitzProbe>> {
    let mut probes = Vec::new();
    for &kind in kinds {
        match kind {
            ProbeKind::Norm => probes.push(LipschitzProbe::norm()),
            ProbeKind::LinearUnit | ProbeKind::SoftReluProjection => {
                for j in 0..n_directions {
                    let s = derive_seed(seed, &["probe".into(), kind.as_str().into(), j.into()]);
                    let lin = LipschitzProbe::random_linear_unit(d, s);
                    probes.push(match kind {
                        ProbeKind::LinearUnit => lin,
                        _ => LipschitzProbe::soft_relu_projection(lin.direction().expect("linear probe"))?,
                    });
                }
            }
        }
    }
    Ok(probes)
}

fn sensitivity(reports: &[TailReport], n_steps: usize, opts: &ConcentrationOptions, d: usize) -> Result<Vec<Sensitivity>> {
    let mut out = Vec::new();
    for r in reports {
        for &c1 in &opts.c1_sensitivity {
            let bound = ConcentrationBound::composite(n_steps, c1, opts.c2, d, r.lipschitz)?;
            let violations = r.s_grid.iter().zip(&r.ci_lo).filter(|(&s, &lo)| lo > bound.value(s)).count();
            out.push(Sensitivity { probe: r.probe.clone(), c1, violations });
        }
    }
    Ok(out)
}

/// Recorded trajectories per class, then contraction, tails, diagnostics
/// and norm distributions for each class.
pub fn run_concentration_campaign(manifest: &ExperimentManifest) -> Result<ConcentrationBundle> {
    manifest.validate()?;
    let opts = &manifest.concentration;
    let model = manifest.load_target()?;
    let d = model.dimension();
    let k = model.num_classes();
    let n_per_class = manifest.rows_per_class(2048);
    let n_steps = manifest.sampler.steps;
    if let Some(&bad) = opts.lipschitz_steps.iter().find(|&&s| s >= n_steps) {
        return Err(Error::InvalidRange(format!("Lipschitz step {bad} must be < N = {n_steps}")));
    }
    let out = RunDir::open(manifest.output_dir.as_deref())?;
    let hash = manifest.config_hash()?;
    out.write_manifest(manifest)?;
    out.log(&format!("concentration: k={k} d={d} n_per_class={n_per_class}"));

    let pixels: Vec<usize> = (0..opts.pixel_count.min(d)).map(|j| j * d / opts.pixel_count.min(d)).collect();
    let generation = generate_classes(&model, &manifest.sampler, manifest.base_seed, n_per_class, &[], |c| {
        let c = c.with_recording(true);
        if pixels.is_empty() {
            c
        } else {
            c.with_pixels(pixels.clone())
        }
    })?;
    let data = generation.data;
    out.write_dataset("diffusion", &data, &hash)?;
    out.write_model("target_model", &model)?;
    out.log("trajectories generated");

    let records: Vec<_> = generation
        .per_class
        .iter()
        .flat_map(|g| g.records.clone().expect("recording enabled"))
        .collect();
    let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, n_per_class)).collect();
    let overall = contraction_report(&records, Some(&labels))?;

    let diagnostics =
        assumption_diagnostics(&data, opts.diagnostic_directions, opts.q_max, derive_seed(manifest.base_seed, &["diagnostics".into()]))?;
    let norms = if opts.probes.is_empty() || opts.p_list.is_empty() {
        Vec::new()
    } else {
        norm_distributions(&data, &opts.p_list, opts.bins)?
    };
    let probes = build_probes(&opts.probes, d, opts.n_directions, manifest.base_seed)?;
    let s_grid = opts.s_grid.clone().unwrap_or_else(|| linear_grid(0.05, 3.0, 60));

    let classes = (0..k)
        .into_par_iter()
        .map(|c| -> Result<ClassBundle> {
            let g = &generation.per_class[c];
            let recs = g.records.as_ref().expect("recording enabled");
            let contraction = contraction_report(recs, None)?;
            let tails = if probes.is_empty() {
                Vec::new()
            } else {
                composite_tail_check(&g.samples, &probes, n_steps, opts.c1, opts.c2, &s_grid)?
            };
            let sens = sensitivity(&tails, n_steps, opts, d)?;
            let (id, mixture) = &model.classes()[c];
            let cfg = manifest.sampler.config(derive_seed(manifest.base_seed, &["diffusion".into(), (*id).into()]))?;
            let lipschitz = opts
                .lipschitz_steps
                .iter()
                .map(|&s| estimate_step_lipschitz(&cfg, mixture, s, opts.lipschitz_points, None))
                .collect::<Result<Vec<_>>>()?;
            let paired = if opts.paired_trajectories > 0 {
                Some(summarize_pairs(&paired_trajectories(&cfg, mixture, opts.paired_trajectories)?))
            } else {
                None
            };
            Ok(ClassBundle {
                class_id: c,
                contraction,
                diagnostics: diagnostics[c].clone(),
                tails,
                sensitivity: sens,
                norms: norms.iter().filter(|s| s.class_id == c).cloned().collect(),
                lipschitz,
                paired,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let schedule = &generation_schedule(manifest)?;
    out.write_csv("trajectories.csv", &trajectory_rows(&records, schedule, 0))?;
    if !pixels.is_empty() {
        out.write_csv("pixel_norms.csv", &pixel_rows(&records, &pixels, 0))?;
    }
    out.write_csv("norm_histograms.csv", &histogram_rows(&norms))?;
    let bundle = ConcentrationBundle { classes, overall };
    out.write_aggregate("concentration.json", &bundle)?;
    out.log(&format!("concentration done: fraction decreasing = {:.4}", bundle.overall.fraction_decreasing));
    Ok(bundle)
}

fn generation_schedule(manifest: &ExperimentManifest) -> Result<crate::sampler::NoiseSchedule> {
    Ok(manifest.sampler.config(0)?.schedule)
}
