//! `dul`: generate datasets with the mixture-denoiser sampler, run experiment
//! manifests and summarize their results.

mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dul_core::experiments::{
    generate_classes, run_concentration_campaign, run_spectra_campaign, run_universality, ExperimentKind,
    ExperimentManifest,
};
use dul_core::io::{trajectory_rows, write_csv, write_dataset};
use dul_core::mixtures::ClassConditionalModel;
use dul_core::sampler::SamplerSettings;
use dul_core::seed::short_hash;
use serde::Serialize;

const THREADS_ENV: &str = "DUL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dul", version, about = "Diffusion-versus-mixture universality laboratory")]
struct Cli {
    /// Worker threads; DUL_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Progress messages on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labeled dataset from a class-conditional mixture model.
    Generate(GenerateArgs),
    /// Run an experiment manifest.
    Experiment(ExperimentArgs),
    /// Summarize an experiment output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    /// Class-conditional model JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    s_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write trajectories.csv with per-step norms.
    #[arg(long)]
    record_trajectories: bool,
    /// Output directory for dataset.json and dataset.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    manifest: PathBuf,
    /// Overrides the manifest's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Experiment output directory.
    dir: PathBuf,
    /// Print only the summary JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<dul_core::Error> for CliError {
    fn from(e: dul_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

struct Progress(u8);

impl Progress {
    fn say(&self, msg: &str) {
        if self.0 > 0 {
            eprintln!("dul: {msg}");
        }
    }
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => flag,
    };
    match n {
        Some(0) => Err(CliError::Usage("thread count must be ≥ 1".into())),
        n => Ok(n),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_generate(args: &GenerateArgs, progress: &Progress) -> CliResult<()> {
    let model = ClassConditionalModel::from_json(&read_text(&args.model)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let settings = SamplerSettings { steps: args.steps, gamma: args.gamma, s_noise: args.s_noise, ..Default::default() };
    progress.say(&format!(
        "sampling {} classes x {} rows at d={}",
        model.num_classes(),
        args.n_per_class,
        model.dimension()
    ));
    let generation = generate_classes(&model, &settings, args.seed, args.n_per_class, &[], |c| {
        c.with_recording(args.record_trajectories)
    })?;

    #[derive(Serialize)]
    struct Provenance<'a> {
        model: &'a str,
        settings: &'a SamplerSettings,
        n_per_class: usize,
        seed: u64,
    }
    let model_json = model.to_json()?;
    let prov = Provenance { model: &model_json, settings: &settings, n_per_class: args.n_per_class, seed: args.seed };
    let hash = short_hash(&serde_json::to_vec(&prov).map_err(dul_core::Error::from)?);

    let header = write_dataset(&args.out, "dataset", &generation.data, &hash)?;
    if args.record_trajectories {
        let schedule = settings.config(args.seed)?.schedule;
        let mut rows = Vec::new();
        for g in &generation.per_class {
            let records = g.records.as_deref().unwrap_or(&[]);
            rows.extend(trajectory_rows(records, &schedule, rows.len() / (args.steps + 1)));
        }
        write_csv(&args.out.join("trajectories.csv"), &rows)?;
    }
    println!("{}", header.display());
    Ok(())
}

/// Parses a manifest, separating unknown kinds (usage) from malformed
/// documents (data, with line and column).
fn parse_manifest(path: &Path) -> CliResult<ExperimentManifest> {
    let text = read_text(path)?;
    let at = |e: &serde_json::Error| format!("{}:{}:{}: {e}", path.display(), e.line(), e.column());
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Data(at(&e)))?;
    if let Some(kind) = value.get("kind") {
        let known = kind.as_str().is_some_and(|k| ExperimentKind::ALL.contains(&k));
        if !known {
            return Err(CliError::Usage(format!(
                "{}: unknown experiment kind {kind}; expected one of {}",
                path.display(),
                ExperimentKind::ALL.join(", ")
            )));
        }
    }
    serde_json::from_str(&text).map_err(|e| CliError::Data(at(&e)))
}

fn cmd_experiment(args: &ExperimentArgs, progress: &Progress) -> CliResult<()> {
    let mut manifest = parse_manifest(&args.manifest)?;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.resolve_paths(&base);
    if let Some(out) = &args.out {
        manifest.output_dir = Some(out.clone());
    }
    if manifest.output_dir.is_none() {
        let hash = manifest.config_hash()?;
        manifest.output_dir = Some(base.join("runs").join(format!("{}-{hash}", manifest.kind.as_str())));
    }
    manifest.validate()?;
    let root = manifest.output_dir.clone().expect("output directory set");
    progress.say(&format!("running {} into {}", manifest.kind.as_str(), root.display()));

    match manifest.kind {
        ExperimentKind::Universality => {
            let r = run_universality(&manifest)?;
            println!(
                "universality: max |gap| {:.4}, all within 2 sigma {}",
                r.max_abs_gap, r.all_within_two_sigma
            );
        }
        ExperimentKind::Spectra => {
            let b = run_spectra_campaign(&manifest)?;
            println!(
                "spectra: top-{} Gram max relative gap {:.4}",
                b.gram_comparison.top_k, b.gram_comparison.max_relative_gap
            );
        }
        ExperimentKind::Concentration => {
            let b = run_concentration_campaign(&manifest)?;
            println!("concentration: decreasing fraction {:.5}", b.overall.fraction_decreasing);
        }
    }
    println!("{}", root.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let progress = Progress(cli.verbose);
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, &progress),
        Command::Experiment(a) => cmd_experiment(a, &progress),
        Command::Report(a) => report::cmd_report(&a.dir, a.json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dul: {e}");
            ExitCode::from(e.code())
        }
    }
}
