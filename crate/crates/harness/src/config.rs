//! Experiment configuration: the JSON document read by `--config` and built
//! by the presets.

use std::fmt;
use std::path::{Path, PathBuf};

use drf_core::sim::Readout;
use drf_core::{ActivationKind, ArchitectureSpec};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const DEFAULT_D: usize = 300;
pub const DEFAULT_SEEDS: usize = 10;
pub const PAPER_D: usize = 1000;
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Theory,
    Simulate,
    Compare,
    Spectrum,
    ImplicitRegStudy,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Theory => "theory",
            Mode::Simulate => "simulate",
            Mode::Compare => "compare",
            Mode::Spectrum => "spectrum",
            Mode::ImplicitRegStudy => "implicit-reg-study",
        };
        f.write_str(s)
    }
}

/// A fully connected random network without its input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Name used in output files; defaults to `L<depth>`.
    #[serde(default)]
    pub label: Option<String>,
    /// `k_ℓ/d` per hidden layer; empty for a network that returns its input.
    pub gammas: Vec<f64>,
    /// One activation per layer, or a single one shared by every layer.
    pub activations: Vec<ActivationKind>,
    /// Weight variances; all ones when omitted.
    #[serde(default)]
    pub deltas: Option<Vec<f64>>,
}

impl NetworkConfig {
    pub fn uniform(depth: usize, gamma: f64, activation: ActivationKind) -> Self {
        NetworkConfig {
            label: None,
            gammas: vec![gamma; depth],
            activations: vec![activation; depth],
            deltas: None,
        }
    }

    pub fn new(gammas: Vec<f64>, activation: ActivationKind) -> Self {
        let depth = gammas.len();
        NetworkConfig {
            label: None,
            gammas,
            activations: vec![activation; depth],
            deltas: None,
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn depth(&self) -> usize {
        self.gammas.len()
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("L{}", self.depth()))
    }

    /// `γ_L`, or 1 for an empty network.
    pub fn gamma_top(&self) -> f64 {
        self.gammas.last().copied().unwrap_or(1.0)
    }

    /// Builds the architecture at input dimension `d`, centering any
    /// activation with a nonzero Gaussian mean.
    pub fn spec(&self, d: usize) -> Result<ArchitectureSpec> {
        let depth = self.depth();
        let activations = match self.activations.len() {
            1 if depth > 1 => vec![self.activations[0].clone(); depth],
            _ => self.activations.clone(),
        };
        let mut spec = ArchitectureSpec::new(d, self.gammas.clone(), activations);
        if let Some(deltas) = &self.deltas {
            spec.deltas = deltas.clone();
        }
        Ok(spec.centered()?)
    }
}

/// The function generating the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetConfig {
    /// Reads the learner's own features.
    Learner,
    /// An independent random network; no hidden layers means the raw input.
    Network(NetworkConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Square,
    Logistic,
}

/// Which features the simulation trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    True,
    /// Gaussian features with the linearized covariances of the networks.
    GaussianEquivalent,
}

/// How theory curves are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryMethod {
    /// `asymptotic` when it applies, `covariance` otherwise.
    #[default]
    Auto,
    /// Closed-form spectral ridge error; needs a matched target, square
    /// loss and isotropic inputs.
    Asymptotic,
    /// Saddle-point equations on the linearized covariances of sampled networks.
    Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    /// Inputs used for the empirical covariance.
    #[serde(default = "default_spectrum_samples")]
    pub n_samples: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Every hidden layer instead of only the last one.
    #[serde(default)]
    pub per_layer: bool,
}

fn default_spectrum_samples() -> usize {
    100_000
}

fn default_grid_points() -> usize {
    1000
}

fn default_eta() -> f64 {
    drf_core::rmt::DEFAULT_ETA
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            n_samples: default_spectrum_samples(),
            grid_points: default_grid_points(),
            eta: default_eta(),
            per_layer: false,
        }
    }
}

/// Expected monotonicity of the effective noise level across the learners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
}

/// Pass/fail limits; a violated limit makes the run exit non-zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest admissible `|z|` at any grid point in compare mode.
    #[serde(default = "default_z")]
    pub z: f64,
    /// Largest admissible KS distance in spectrum mode.
    #[serde(default)]
    pub ks: Option<f64>,
    /// Required trend of `tr C_ξ/k_L` in implicit-reg-study mode.
    #[serde(default)]
    pub noise_trend: Option<Trend>,
}

fn default_z() -> f64 {
    DEFAULT_Z_THRESHOLD
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            z: DEFAULT_Z_THRESHOLD,
            ks: None,
            noise_trend: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// One curve per learner.
    pub learners: Vec<NetworkConfig>,
    pub target: TargetConfig,
    pub readout: Readout,
    pub channel: ChannelKind,
    pub lambda: f64,
    /// Label-noise variance on training labels (square loss only).
    #[serde(default)]
    pub delta: f64,
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    /// Master seed; run `i` uses a seed derived from `(seed, i)`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureKind,
    #[serde(default)]
    pub theory: TheoryMethod,
    /// Networks averaged over in theory mode with the covariance method.
    #[serde(default = "default_theory_networks")]
    pub theory_networks: usize,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Output directory; `runs/<name>` when omitted.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_d() -> usize {
    DEFAULT_D
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}

fn default_theory_networks() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn metric(&self) -> drf_core::sim::Metric {
        match self.channel {
            ChannelKind::Square => drf_core::sim::Metric::Mse,
            ChannelKind::Logistic => drf_core::sim::Metric::Misclassification,
        }
    }

    pub fn loss_channel(&self) -> drf_core::saddle::LossChannel {
        match self.channel {
            ChannelKind::Square => drf_core::saddle::LossChannel::Square { delta: self.delta },
            ChannelKind::Logistic => drf_core::saddle::LossChannel::Logistic,
        }
    }

    /// The method theory curves are evaluated with.
    pub fn resolved_theory(&self) -> TheoryMethod {
        match self.theory {
            TheoryMethod::Auto if self.asymptotic_applies() => TheoryMethod::Asymptotic,
            TheoryMethod::Auto => TheoryMethod::Covariance,
            m => m,
        }
    }

    fn asymptotic_applies(&self) -> bool {
        self.target == TargetConfig::Learner && self.channel == ChannelKind::Square
    }

    /// Checks everything that does not depend on the mode.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.learners.is_empty() {
            return bad("at least one learner is required".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha_grid is empty".into());
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alpha_grid values must be positive".into());
        }
        if self.alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("alpha_grid must be strictly increasing".into());
        }
        match (self.channel, self.readout) {
            (ChannelKind::Square, Readout::Linear) | (ChannelKind::Logistic, Readout::Sign) => {}
            (c, r) => return bad(format!("channel {c:?} does not support a {r:?} readout")),
        }
        if self.channel == ChannelKind::Logistic && self.delta != 0.0 {
            return bad("label noise is only defined for the square channel".into());
        }
        if self.theory == TheoryMethod::Asymptotic && !self.asymptotic_applies() {
            return bad("the asymptotic theory needs a learner target and the square channel".into());
        }
        if self.theory_networks == 0 {
            return bad("theory_networks must be at least 1".into());
        }
        let mut labels: Vec<String> = self.learners.iter().map(NetworkConfig::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("learner labels must be distinct".into());
        }
        for l in &self.learners {
            l.spec(self.d)?;
        }
        if let TargetConfig::Network(t) = &self.target {
            t.spec(self.d)?;
        }
        Ok(())
    }

    /// Mode-specific checks on top of [`ExperimentConfig::validate`].
    pub fn validate_for(&self, mode: Mode) -> Result<()> {
        self.validate()?;
        if matches!(mode, Mode::Simulate | Mode::Compare) && self.n_seeds == 0 {
            return Err(HarnessError::Config("n_seeds must be at least 1".into()));
        }
        if mode == Mode::Spectrum {
            let s = &self.spectrum;
            if s.grid_points < 2 || !(s.eta > 0.0) {
                return Err(HarnessError::Config(
                    "spectrum needs at least two grid points and a positive eta".into(),
                ));
            }
        }
        Ok(())
    }
}
