//! Experiment orchestration for deep random features: theory curves,
//! Monte Carlo learning curves, spectra and architecture studies, written
//! as CSV/JSON under an output directory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod implicit;
pub mod output;
pub mod presets;
pub mod report;
pub mod spectrum;

use std::path::{Path, PathBuf};

use drf_core::sim::Estimate;

pub use config::{ExperimentConfig, Mode};
pub use error::{HarnessError, Result};
pub use report::ComparisonReport;

use crate::experiment::{run_seed, RunRecord};
use crate::output::{write_csv, write_json, write_jsonl, Manifest, Tolerances};

/// What a run produced and whether it met its thresholds.
#[derive(Debug)]
pub struct RunOutcome {
    pub mode: Mode,
    pub out_dir: PathBuf,
    /// File names relative to `out_dir`.
    pub files: Vec<PathBuf>,
    pub violations: Vec<String>,
    pub report: Option<ComparisonReport>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(PathBuf::from(name));
        self.dir.join(name)
    }
}

fn simulation_rows(config: &ExperimentConfig, records: &[RunRecord]) -> Vec<String> {
    let mut rows = Vec::new();
    for l in &config.learners {
        let label = l.label();
        for &alpha in &config.alpha_grid {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.learner == label && r.alpha == alpha)
                .map(|r| r.test_error)
                .collect();
            let e = Estimate::from_samples(&errs);
            rows.push(format!(
                "{label},{alpha},{},{},{},{},{}",
                e.mean, e.stderr, e.count, config.d, config.lambda
            ));
        }
    }
    rows
}

/// Runs `mode` on `config`, writing into `out_dir`.
pub fn run(mode: Mode, config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    config.validate_for(mode)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut out = Outputs {
        dir: out_dir,
        files: Vec::new(),
    };
    let mut violations = Vec::new();
    let mut report = None;
    let run_count = match mode {
        Mode::Theory | Mode::ImplicitRegStudy => config.theory_networks,
        Mode::Simulate | Mode::Compare => config.n_seeds,
        Mode::Spectrum => 1,
    };

    match mode {
        Mode::Theory => {
            let curves = experiment::theory(config)?;
            let mut rows = Vec::new();
            for c in &curves {
                for i in 0..c.alphas.len() {
                    rows.push(format!(
                        "{},{},{},{},{},{:e}",
                        c.learner, c.alphas[i], c.eps[i], c.stderr[i], c.networks, c.max_residual[i]
                    ));
                }
            }
            write_csv(
                &out.path("theory.csv"),
                "learner,alpha,eps,eps_stderr,networks,max_residual",
                rows,
            )?;
        }
        Mode::Simulate | Mode::Compare => {
            let paired = mode == Mode::Compare;
            let records = experiment::simulate(config, paired)?;
            write_jsonl(&out.path("runs.jsonl"), &records)?;
            write_csv(
                &out.path("simulation.csv"),
                "learner,alpha,eps_mean,eps_stderr,n_seeds,d,lambda",
                simulation_rows(config, &records),
            )?;
            if paired {
                let rep = ComparisonReport::from_records(&config.name, &records, config.thresholds.z);
                write_csv(
                    &out.path("comparison.csv"),
                    "learner,alpha,theory,theory_stderr,sim_mean,sim_stderr,n_seeds,z",
                    rep.rows.iter().map(|r| {
                        format!(
                            "{},{},{},{},{},{},{},{}",
                            r.learner,
                            r.alpha,
                            r.theory,
                            r.theory_stderr,
                            r.sim_mean,
                            r.sim_stderr,
                            r.n_seeds,
                            r.z.map_or(String::new(), |z| z.to_string())
                        )
                    }),
                )?;
                write_json(&out.path("report.json"), &rep)?;
                for r in &rep.rows {
                    if let Some(z) = r.z.filter(|z| z.abs() > rep.z_threshold) {
                        violations.push(format!(
                            "{} at alpha = {}: |z| = {:.2} exceeds {}",
                            r.learner,
                            r.alpha,
                            z.abs(),
                            rep.z_threshold
                        ));
                    }
                }
                if rep.rows.iter().all(|r| r.z.is_none()) {
                    violations.push("no grid point has a standard error; z-scores undefined".into());
                }
                report = Some(rep);
            }
        }
        Mode::Spectrum => {
            let mut summaries = Vec::new();
            for l in &config.learners {
                for s in spectrum::layer_spectra(config, l)? {
                    let stem = format!("{}_layer{}", s.summary.learner, s.summary.layer);
                    s.density
                        .write_csv(out.path(&format!("density_{stem}.csv")))
                        .map_err(HarnessError::from)?;
                    write_csv(
                        &out.path(&format!("eigenvalues_{stem}.csv")),
                        "eigenvalue",
                        s.eigenvalues.iter().map(|e| e.to_string()),
                    )?;
                    if let Some(limit) = config.thresholds.ks.filter(|k| s.summary.ks > *k) {
                        violations.push(format!("{stem}: KS distance {:.4} exceeds {limit}", s.summary.ks));
                    }
                    summaries.push(s.summary);
                }
            }
            write_json(&out.path("spectrum.json"), &summaries)?;
        }
        Mode::ImplicitRegStudy => {
            let rows = implicit::implicit_reg_study(config)?;
            write_csv(
                &out.path("implicit_reg.csv"),
                "learner,depth,gamma,noise_level,eps_alpha_1,eps_alpha_gamma",
                rows.iter().map(|r| {
                    format!(
                        "{},{},{},{},{},{}",
                        r.learner, r.depth, r.gamma, r.noise_level, r.eps_linear_peak, r.eps_nonlinear_peak
                    )
                }),
            )?;
            if let Some(trend) = config.thresholds.noise_trend {
                if !implicit::follows_trend(&rows, trend) {
                    violations.push(format!("noise level is not {trend:?} across the learners"));
                }
            }
        }
    }

    let files = out.files.clone();
    let manifest = Manifest {
        tool: "drf",
        version: env!("CARGO_PKG_VERSION"),
        mode,
        theory_method: config.resolved_theory(),
        config,
        run_seeds: (0..run_count).map(|i| run_seed(config, i)).collect(),
        tolerances: Tolerances::default(),
        files: files.clone(),
        passed: violations.is_empty(),
        violations: &violations,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(RunOutcome {
        mode,
        out_dir: out_dir.to_path_buf(),
        files,
        violations,
        report,
    })
}
