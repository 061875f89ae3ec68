//! Asymptotic ridge test error for a target that shares the learner's
//! features, and the finite-matrix trace formula it is the limit of.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arch::{GECoefficients, SampledNetwork};
use crate::error::{DrfError, Result};
use crate::lincov::{omega_lin, trace_omega};
use crate::rmt::{
    layer_recursion, mp_selfconsistent, resolvent_derivative, PopulationChain, SpectralMeasure, C64,
};
use crate::sim::sample_inputs;

/// Ridge problem with a matched target `y = θ★ᵀφ(x)/√k + √Δ z`.
#[derive(Clone, Debug)]
pub struct RidgeSetting {
    pub lambda: f64,
    /// Label-noise variance `Δ`.
    pub delta: f64,
    /// `n/d`.
    pub alpha: f64,
    pub coeffs: GECoefficients,
    /// `k_ℓ/d`.
    pub gammas: Vec<f64>,
    /// Spectrum of `Ω₀`.
    pub omega0: SpectralMeasure,
    /// `tr(Ω₀)/d`.
    pub trace_omega0: f64,
}

impl RidgeSetting {
    pub fn gamma_top(&self) -> f64 {
        self.gammas.last().copied().unwrap_or(1.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(DrfError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.delta >= 0.0) {
            return Err(DrfError::Config(format!("delta must be nonnegative, got {}", self.delta)));
        }
        if !(self.alpha > 0.0) {
            return Err(DrfError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Limit of `⟨Ω (XXᵀ/k − z)^{-1}⟩` for `n` samples of `k`-dimensional
/// features with population spectrum `population` and `k/n = ratio`.
pub fn population_resolvent_trace(population: &SpectralMeasure, ratio: f64, z: C64) -> Result<C64> {
    // XXᵀ/k = (n/k)·XXᵀ/n, so the sample-covariance resolvent is taken at z·k/n.
    let zs = z * ratio;
    let w = mp_selfconsistent(population, ratio, zs)?.wc_m;
    Ok(-(1.0 + zs * w) / (zs * w))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeAsymptotics {
    pub eps: f64,
    /// `lim ⟨Ω_L (λ + XXᵀ/k)^{-1}⟩`.
    pub resolvent_trace: f64,
    /// `∂_λ` of the above.
    pub d_lambda_trace: f64,
    /// Contour vs finite-difference disagreement of the derivative.
    pub derivative_disagreement: f64,
    /// `⟨Ω_L⟩`.
    pub trace_omega: f64,
    /// Gram-side `wc m_L(−λ)` from the layer recursion.
    pub wc_m: f64,
    pub d_lambda_wc_m: f64,
    /// The factorized value `Δ(⟨Ω_L⟩ wc m_L + 1) − λ(λ−Δ)⟨Ω_L⟩ ∂_λ wc m_L`,
    /// kept as a diagnostic.
    pub factorized_eps: f64,
}

fn combine(lambda: f64, delta: f64, trace: f64, d_lambda_trace: f64) -> f64 {
    delta * (trace + 1.0) - lambda * (lambda - delta) * d_lambda_trace
}

/// Test error from a population spectrum, bypassing the layer chain.
pub fn ridge_error_from_population(
    population: &SpectralMeasure,
    ratio: f64,
    lambda: f64,
    delta: f64,
) -> Result<(f64, f64, f64, f64)> {
    let f = |z: C64| population_resolvent_trace(population, ratio, z);
    let z = C64::new(-lambda, 0.0);
    let t = f(z)?.re;
    let der = resolvent_derivative(f, z)?;
    // ∂_λ T(−λ) = −T'(−λ)
    let dt = -der.value.re;
    Ok((combine(lambda, delta, t, dt), t, dt, der.relative_disagreement))
}

/// Asymptotic ridge error, with `⟨Ω_L G⟩` resolved through the limiting
/// spectrum of `Ω_L` (sample covariance of `k/n`-aspect data).
pub fn asymptotic_ridge_error(setting: &RidgeSetting) -> Result<RidgeAsymptotics> {
    setting.validate()?;
    let chain = PopulationChain::new(&setting.coeffs, &setting.gammas, setting.omega0.clone())?;
    asymptotic_ridge_error_with(setting, &chain.into_measure())
}

/// As [`asymptotic_ridge_error`] with an explicit population spectrum of `Ω_L`.
pub fn asymptotic_ridge_error_with(
    setting: &RidgeSetting,
    population: &SpectralMeasure,
) -> Result<RidgeAsymptotics> {
    setting.validate()?;
    let (lambda, delta) = (setting.lambda, setting.delta);
    let ratio = setting.gamma_top() / setting.alpha;
    let (eps, t, dt, disagreement) = ridge_error_from_population(population, ratio, lambda, delta)?;

    let wc = |z: C64| -> Result<C64> {
        Ok(layer_recursion(&setting.coeffs, setting.alpha, &setting.gammas, &setting.omega0, z)?
            .wc_m_top())
    };
    let z = C64::new(-lambda, 0.0);
    let wc_m = wc(z)?.re;
    let d_lambda_wc_m = -resolvent_derivative(wc, z)?.value.re;
    let tr = trace_omega(&setting.coeffs, setting.trace_omega0);
    Ok(RidgeAsymptotics {
        eps,
        resolvent_trace: t,
        d_lambda_trace: dt,
        derivative_disagreement: disagreement,
        trace_omega: tr,
        wc_m,
        d_lambda_wc_m,
        factorized_eps: combine(lambda, delta, tr * wc_m, tr * d_lambda_wc_m),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OracleValue {
    pub eps: f64,
    /// `⟨Ω_L (λ + XXᵀ/k)^{-1}⟩`.
    pub trace_g: f64,
    /// `⟨Ω_L (λ + XXᵀ/k)^{-2}⟩`.
    pub trace_g2: f64,
}

/// `Δ(⟨ΩG⟩ + 1) + λ(λ − Δ)⟨ΩG²⟩` with `G = (λ + XXᵀ/k)^{-1}` on one draw
/// of `n = round(αd)` inputs and `Ω = Ω_lin^L`.
pub fn finite_rmt_oracle(
    network: &SampledNetwork,
    coeffs: &GECoefficients,
    setting: &RidgeSetting,
    seed: u64,
) -> Result<OracleValue> {
    setting.validate()?;
    let d = network.spec.d;
    let n = (setting.alpha * d as f64).round() as usize;
    let x0 = sample_inputs(&network.spec.omega0, d, n, seed, crate::rng::stream::TRAIN_INPUTS)?;
    let features = network.forward(&x0)?;
    let omega = omega_lin(network, coeffs)?.pop().unwrap();
    finite_trace_formula(&features, &omega, setting.lambda, setting.delta)
}

/// The trace formula on given features (`k × n`) and covariance.
pub fn finite_trace_formula(
    features: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda: f64,
    delta: f64,
) -> Result<OracleValue> {
    let k = features.nrows();
    let mut a = features * features.transpose() / k as f64;
    for i in 0..k {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| {
        DrfError::Numerical("λ + XXᵀ/k is not positive definite".into())
    })?;
    let g_omega = chol.solve(omega);
    let g2_omega = chol.solve(&g_omega);
    let trace_g = g_omega.trace() / k as f64;
    let trace_g2 = g2_omega.trace() / k as f64;
    Ok(OracleValue {
        eps: delta * (trace_g + 1.0) + lambda * (lambda - delta) * trace_g2,
        trace_g,
        trace_g2,
    })
}
