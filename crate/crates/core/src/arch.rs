//! Network architectures, weight sampling and the Gaussian-equivalence
//! coefficients `(r_ℓ, κ₁^ℓ, κ★^ℓ)`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::{center_activation, ActivationKind};
use crate::error::{DrfError, Result};
use crate::matrix_io::read_matrix;
use crate::rng::{gaussian_matrix, stream_rng};

/// Residual Gaussian mean below which an activation counts as centered.
pub const CENTERING_TOL: f64 = 1e-10;

/// Input covariance `Ω₀`.
#[derive(Clone, Debug, Default)]
pub enum InputCovariance {
    #[default]
    Identity,
    Matrix {
        matrix: Arc<DMatrix<f64>>,
        source: Option<PathBuf>,
    },
}

impl InputCovariance {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        InputCovariance::Matrix {
            matrix: Arc::new(matrix),
            source: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(InputCovariance::Matrix {
            matrix: Arc::new(read_matrix(path)?),
            source: Some(path.to_path_buf()),
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, InputCovariance::Identity)
    }

    pub fn dense(&self, d: usize) -> DMatrix<f64> {
        match self {
            InputCovariance::Identity => DMatrix::identity(d, d),
            InputCovariance::Matrix { matrix, .. } => (**matrix).clone(),
        }
    }

    /// `tr(Ω₀)/d`.
    pub fn normalized_trace(&self, d: usize) -> f64 {
        match self {
            InputCovariance::Identity => 1.0,
            InputCovariance::Matrix { matrix, .. } => matrix.trace() / d as f64,
        }
    }

    /// `tr(Ω₀²)/d`.
    pub fn normalized_trace_sq(&self, d: usize) -> f64 {
        match self {
            InputCovariance::Identity => 1.0,
            InputCovariance::Matrix { matrix, .. } => matrix.norm_squared() / d as f64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    depth: usize,
    gammas: Vec<f64>,
    activations: Vec<ActivationKind>,
    deltas: Vec<f64>,
    d: usize,
    #[serde(default = "identity_tag")]
    omega0: String,
}

fn identity_tag() -> String {
    "identity".into()
}

/// Depth, widths, activations and weight variances of a random network.
#[derive(Clone, Debug)]
pub struct ArchitectureSpec {
    pub depth: usize,
    /// `γ_ℓ = k_ℓ / d` for `ℓ = 1..=L`.
    pub gammas: Vec<f64>,
    pub activations: Vec<ActivationKind>,
    /// `Δ_ℓ`, the variance of the entries of `W_ℓ`.
    pub deltas: Vec<f64>,
    pub d: usize,
    pub omega0: InputCovariance,
}

impl ArchitectureSpec {
    /// Unit weight variances, identity input covariance.
    pub fn new(d: usize, gammas: Vec<f64>, activations: Vec<ActivationKind>) -> Self {
        let depth = gammas.len();
        ArchitectureSpec {
            depth,
            deltas: vec![1.0; depth],
            gammas,
            activations,
            d,
            omega0: InputCovariance::Identity,
        }
    }

    pub fn uniform(d: usize, depth: usize, gamma: f64, activation: ActivationKind) -> Self {
        Self::new(d, vec![gamma; depth], vec![activation; depth])
    }

    pub fn with_d(&self, d: usize) -> Self {
        ArchitectureSpec { d, ..self.clone() }
    }

    /// Layer widths `k_0 = d, k_1, …, k_L`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.d)
            .chain(
                self.gammas
                    .iter()
                    .map(|g| (g * self.d as f64).round() as usize),
            )
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.depth;
        if self.gammas.len() != l || self.activations.len() != l || self.deltas.len() != l {
            return Err(DrfError::Config(format!(
                "depth {l} but {} gammas, {} activations, {} deltas",
                self.gammas.len(),
                self.activations.len(),
                self.deltas.len()
            )));
        }
        if self.d == 0 {
            return Err(DrfError::Config("input dimension d must be positive".into()));
        }
        for (i, (&g, &k)) in self.gammas.iter().zip(&self.widths()[1..]).enumerate() {
            if !(g > 0.0) || k < 1 {
                return Err(DrfError::Config(format!(
                    "layer {}: gamma {g} gives width {k}",
                    i + 1
                )));
            }
        }
        if let Some(bad) = self.deltas.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(DrfError::Config(format!("weight variance {bad} is not positive")));
        }
        if let InputCovariance::Matrix { matrix, .. } = &self.omega0 {
            if matrix.nrows() != self.d || matrix.ncols() != self.d {
                return Err(DrfError::Dimension(format!(
                    "omega0 is {}x{} but d = {}",
                    matrix.nrows(),
                    matrix.ncols(),
                    self.d
                )));
            }
        }
        let t1 = self.omega0.normalized_trace(self.d);
        let t2 = self.omega0.normalized_trace_sq(self.d);
        if !(t1 > 0.0 && t1.is_finite() && t2 > 0.0 && t2.is_finite()) {
            return Err(DrfError::Config(format!(
                "omega0 needs finite positive tr/d and tr^2/d, got {t1} and {t2}"
            )));
        }
        Ok(())
    }

    /// True when every activation is Lipschitz, i.e. the rigorous results apply.
    pub fn within_rigorous_hypotheses(&self) -> bool {
        self.activations.iter().all(ActivationKind::is_lipschitz)
    }

    /// Returns a copy whose activations are centered at their layer's `r_ℓ`.
    pub fn centered(&self) -> Result<ArchitectureSpec> {
        self.validate()?;
        let mut out = self.clone();
        let mut r = self.deltas.first().copied().unwrap_or(1.0) * self.omega0.normalized_trace(self.d);
        for l in 0..self.depth {
            out.activations[l] = center_activation(&self.activations[l], r)?;
            let second = out.activations[l].gaussian_expect(r, |s, _| s * s)?;
            r = self.deltas.get(l + 1).copied().unwrap_or(1.0) * second;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let omega0 = match &self.omega0 {
            InputCovariance::Identity => identity_tag(),
            InputCovariance::Matrix {
                source: Some(p), ..
            } => p.display().to_string(),
            InputCovariance::Matrix { source: None, .. } => {
                return Err(DrfError::Config(
                    "an in-memory omega0 has no file path to serialize".into(),
                ))
            }
        };
        let doc = SpecDocument {
            depth: self.depth,
            gammas: self.gammas.clone(),
            activations: self.activations.clone(),
            deltas: self.deltas.clone(),
            d: self.d,
            omega0,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses the JSON form; a relative `omega0` path resolves against `base_dir`.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let doc: SpecDocument = serde_json::from_str(text)?;
        let omega0 = if doc.omega0 == "identity" {
            InputCovariance::Identity
        } else {
            let p = PathBuf::from(&doc.omega0);
            let p = match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            };
            InputCovariance::load(p)?
        };
        let spec = ArchitectureSpec {
            depth: doc.depth,
            gammas: doc.gammas,
            activations: doc.activations,
            deltas: doc.deltas,
            d: doc.d,
            omega0,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-layer Gaussian-equivalence coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GECoefficients {
    /// `r_1 … r_{L+1}`; the last entry is the output second moment.
    pub r: Vec<f64>,
    pub kappa1: Vec<f64>,
    pub kappa_star: Vec<f64>,
    /// Weight variances `Δ_ℓ`, carried along for the spectral recursions.
    pub deltas: Vec<f64>,
}

impl GECoefficients {
    pub fn depth(&self) -> usize {
        self.kappa1.len()
    }

    /// Linear-network coefficients (`κ₁ = 1`, `κ★ = 0`).
    pub fn linear(depth: usize) -> Self {
        GECoefficients {
            r: vec![1.0; depth + 1],
            kappa1: vec![1.0; depth],
            kappa_star: vec![0.0; depth],
            deltas: vec![1.0; depth],
        }
    }
}

/// Runs the variance recursion and computes `κ₁^ℓ`, `κ★^ℓ` for a centered spec.
pub fn compute_coefficients(spec: &ArchitectureSpec) -> Result<GECoefficients> {
    spec.validate()?;
    let l = spec.depth;
    let mut r = Vec::with_capacity(l + 1);
    let mut kappa1 = Vec::with_capacity(l);
    let mut kappa_star = Vec::with_capacity(l);
    let first_delta = spec.deltas.first().copied().unwrap_or(1.0);
    r.push(first_delta * spec.omega0.normalized_trace(spec.d));
    for layer in 0..l {
        let act = &spec.activations[layer];
        let rl = r[layer];
        if *act == ActivationKind::Identity {
            kappa1.push(1.0);
            kappa_star.push(0.0);
            r.push(spec.deltas.get(layer + 1).copied().unwrap_or(1.0) * rl);
            continue;
        }
        let mean = act.gaussian_expect(rl, |s, _| s)?;
        if mean.abs() > CENTERING_TOL {
            return Err(DrfError::Config(format!(
                "activation {act} of layer {} has Gaussian mean {mean:e} at r = {rl}; center it first",
                layer + 1
            )));
        }
        let second = act.gaussian_expect(rl, |s, _| s * s)?;
        let cross = act.gaussian_expect(rl, |s, x| s * x)?;
        let k1 = cross / rl;
        let radicand = second - rl * k1 * k1;
        if radicand < -1e-12 {
            return Err(DrfError::Inconsistent(format!(
                "layer {}: E[σ²] − r κ₁² = {radicand:e} < 0",
                layer + 1
            )));
        }
        kappa1.push(k1);
        // Linear pieces leave only rounding noise here; treat it as exactly zero.
        let radicand = if radicand < 1e-13 * second { 0.0 } else { radicand };
        kappa_star.push(radicand.sqrt());
        r.push(spec.deltas.get(layer + 1).copied().unwrap_or(1.0) * second);
    }
    Ok(GECoefficients {
        r,
        kappa1,
        kappa_star,
        deltas: spec.deltas.clone(),
    })
}

/// A realization of the frozen weights.
#[derive(Clone, Debug)]
pub struct SampledNetwork {
    pub spec: ArchitectureSpec,
    /// `W_ℓ ∈ ℝ^{k_ℓ × k_{ℓ−1}}`.
    pub weights: Vec<DMatrix<f64>>,
    pub seed: u64,
}

/// Draws `W_ℓ` with i.i.d. `N(0, Δ_ℓ)` entries from the stream `(seed, ℓ)`.
pub fn sample_network(spec: &ArchitectureSpec, seed: u64) -> Result<SampledNetwork> {
    sample_network_in_streams(spec, seed, 0)
}

/// Like [`sample_network`] but layer `ℓ` uses stream `stream_base + ℓ`.
pub fn sample_network_in_streams(
    spec: &ArchitectureSpec,
    seed: u64,
    stream_base: u64,
) -> Result<SampledNetwork> {
    spec.validate()?;
    let widths = spec.widths();
    let weights = (1..=spec.depth)
        .map(|l| {
            let mut rng = stream_rng(seed, stream_base + l as u64);
            gaussian_matrix(&mut rng, widths[l], widths[l - 1], spec.deltas[l - 1].sqrt())
        })
        .collect();
    Ok(SampledNetwork {
        spec: spec.clone(),
        weights,
        seed,
    })
}

impl SampledNetwork {
    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn widths(&self) -> Vec<usize> {
        self.spec.widths()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Propagates the columns of `x` (d × n) and returns the last-layer features.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_all(x)?.pop().unwrap())
    }

    /// Post-activations of every layer, `X_0 = x` first.
    pub fn forward_all(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        if x.nrows() != self.spec.d {
            return Err(DrfError::Dimension(format!(
                "input has {} rows, network expects d = {}",
                x.nrows(),
                self.spec.d
            )));
        }
        let widths = self.widths();
        let mut layers = Vec::with_capacity(self.depth() + 1);
        layers.push(x.clone());
        for (l, w) in self.weights.iter().enumerate() {
            let scale = 1.0 / (widths[l] as f64).sqrt();
            let act = &self.spec.activations[l];
            let mut h = w * layers.last().unwrap();
            h.apply(|v| *v = act.eval(*v * scale));
            layers.push(h);
        }
        Ok(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn linear_network_coefficients() {
        let spec = ArchitectureSpec::uniform(50, 3, 1.0, ActivationKind::Identity);
        let c = compute_coefficients(&spec).unwrap();
        for l in 0..3 {
            assert!((c.r[l] - 1.0).abs() < 1e-14);
            assert!((c.kappa1[l] - 1.0).abs() < 1e-14);
            assert_eq!(c.kappa_star[l], 0.0);
        }
    }

    #[test]
    fn sign_coefficients_match_closed_form() {
        let spec = ArchitectureSpec::uniform(10, 1, 1.0, ActivationKind::Sign);
        let c = compute_coefficients(&spec).unwrap();
        assert!((c.kappa1[0] - (2.0 / PI).sqrt()).abs() < 1e-12);
        assert!((c.kappa_star[0].powi(2) - (1.0 - 2.0 / PI)).abs() < 1e-12);
        assert!((c.r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uncentered_activation_is_rejected() {
        let spec = ArchitectureSpec::uniform(10, 1, 1.0, ActivationKind::relu());
        assert!(compute_coefficients(&spec).is_err());
        let centered = spec.centered().unwrap();
        let c = compute_coefficients(&centered).unwrap();
        // relu: E[ξ relu ξ] = r/2, so κ₁ = 1/2
        assert!((c.kappa1[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn only_the_trace_of_omega0_matters() {
        let d = 6;
        let diag = nalgebra::DVector::from_vec(vec![0.5, 1.5, 2.0, 0.2, 1.8, 0.0]);
        let mut spec = ArchitectureSpec::uniform(d, 2, 1.0, ActivationKind::tanh());
        spec.omega0 = InputCovariance::from_matrix(DMatrix::from_diagonal(&diag));
        let a = compute_coefficients(&spec).unwrap();
        let b = compute_coefficients(&ArchitectureSpec::uniform(d, 2, 1.0, ActivationKind::tanh()))
            .unwrap();
        for (x, y) in a.kappa1.iter().zip(&b.kappa1) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ArchitectureSpec::uniform(10, 2, 1.0, ActivationKind::tanh());
        spec.gammas[1] = 0.01; // width rounds to 0
        assert!(spec.validate().is_err());
        let mut spec = ArchitectureSpec::uniform(10, 2, 1.0, ActivationKind::tanh());
        spec.deltas.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let spec = ArchitectureSpec::new(
            30,
            vec![1.0, 0.5],
            vec![ActivationKind::tanh(), ActivationKind::Erf],
        );
        let a = sample_network(&spec, 7).unwrap();
        let b = sample_network(&spec, 7).unwrap();
        let c = sample_network(&spec, 8).unwrap();
        assert_eq!(a.weights, b.weights);
        for (wa, wc) in a.weights.iter().zip(&c.weights) {
            // independent draws: ‖Wa − Wc‖_F² ≈ 2 · entries
            let ratio = (wa - wc).norm_squared() / (2.0 * wa.len() as f64);
            assert!((0.6..1.4).contains(&ratio), "ratio {ratio}");
        }
        let empty = sample_network(&ArchitectureSpec::new(5, vec![], vec![]), 1).unwrap();
        assert!(empty.weights.is_empty());
    }

    #[test]
    fn layer_streams_do_not_depend_on_depth() {
        let shallow = ArchitectureSpec::uniform(20, 1, 1.0, ActivationKind::tanh());
        let deep = ArchitectureSpec::uniform(20, 3, 1.0, ActivationKind::tanh());
        let a = sample_network(&shallow, 3).unwrap();
        let b = sample_network(&deep, 3).unwrap();
        assert_eq!(a.weights[0], b.weights[0]);
    }

    #[test]
    fn json_round_trip() {
        let spec = ArchitectureSpec::new(
            100,
            vec![1.2, 0.6],
            vec![ActivationKind::TanhScaled(2.0), ActivationKind::Sign],
        );
        let back = ArchitectureSpec::from_json(&spec.to_json().unwrap(), None).unwrap();
        assert_eq!(back.gammas, spec.gammas);
        assert_eq!(back.activations, spec.activations);
        assert!(back.omega0.is_identity());
    }
}
