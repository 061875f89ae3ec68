//! CSV/JSON writers and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode, TheoryMethod};
use crate::error::{HarnessError, Result};

/// Writes `header` then one line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HarnessError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for row in rows {
        writeln!(w, "{row}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let rows = items
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HarnessError::io(path, e);
    for r in rows {
        writeln!(w, "{r}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Serialize)]
pub struct Tolerances {
    pub saddle: f64,
    pub fixed_point: f64,
    pub prox: f64,
    pub ridge_residual: f64,
    pub logistic_gradient: f64,
    pub derivative_agreement: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            saddle: drf_core::saddle::SADDLE_TOL,
            fixed_point: drf_core::rmt::FIXED_POINT_TOL,
            prox: drf_core::saddle::PROX_TOL,
            ridge_residual: drf_core::sim::RIDGE_RESIDUAL_TOL,
            logistic_gradient: drf_core::sim::LOGISTIC_GRAD_TOL,
            derivative_agreement: drf_core::rmt::DERIVATIVE_AGREEMENT_TOL,
        }
    }
}

/// Everything needed to regenerate the outputs of a run.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: Mode,
    pub theory_method: TheoryMethod,
    pub config: &'a ExperimentConfig,
    /// Derived seed of each run, in run order.
    pub run_seeds: Vec<u64>,
    pub tolerances: Tolerances,
    pub files: Vec<PathBuf>,
    pub passed: bool,
    pub violations: &'a [String],
}
