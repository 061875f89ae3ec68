use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drf_harness::config::ExperimentConfig;
use drf_harness::presets::{paper_scale, preset, PRESETS};
use drf_harness::{run, HarnessError, Mode};

#[derive(Parser)]
#[command(name = "drf", version, about = "Learning curves and spectra of deep random features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Theory curves over the α grid.
    Theory(RunArgs),
    /// Monte Carlo learning curves.
    Simulate(RunArgs),
    /// Simulation against theory on the same networks, with z-scores.
    Compare(RunArgs),
    /// Limiting and empirical spectra of the feature covariance.
    Spectrum(RunArgs),
    /// Effective noise and peak errors across a family of learners.
    ImplicitRegStudy(RunArgs),
    /// List the available presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Named experiment.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Experiment JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Number of independent runs.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    threads: Option<usize>,
    /// Dimensions and run counts of the original figures.
    #[arg(long)]
    paper_scale: bool,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        _ => return Err(HarnessError::Config("pass exactly one of --preset or --config".into())),
    };
    if args.paper_scale {
        paper_scale(&mut config);
    }
    if let Some(d) = args.d {
        config.d = d;
    }
    if let Some(s) = args.seeds {
        config.n_seeds = s;
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn execute(mode: Mode, args: &RunArgs) -> Result<bool, HarnessError> {
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    let config = load(args)?;
    let out_dir = config.out_dir();
    let outcome = run(mode, &config, &out_dir)?;
    if let Some(rep) = &outcome.report {
        println!(
            "{}: max |z| = {:.2}, {:.0}% of points within 3 sigma",
            rep.name,
            rep.max_abs_z,
            100.0 * rep.fraction_within_3sigma
        );
    }
    for f in &outcome.files {
        println!("wrote {}", out_dir.join(f).display());
    }
    for v in &outcome.violations {
        eprintln!("threshold violated: {v}");
    }
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.command {
        Command::Theory(a) => (Mode::Theory, a),
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Compare(a) => (Mode::Compare, a),
        Command::Spectrum(a) => (Mode::Spectrum, a),
        Command::ImplicitRegStudy(a) => (Mode::ImplicitRegStudy, a),
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            return ExitCode::SUCCESS;
        }
    };
    match execute(mode, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
