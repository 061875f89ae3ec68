//! Stieltjes transforms: Marchenko–Pastur self-consistency, the layer-peeling
//! deterministic equivalent of the Gram resolvent, the population spectrum
//! of the linearized feature covariance, and contour derivatives.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::arch::GECoefficients;
use crate::error::{DrfError, Result};

pub type C64 = Complex64;

pub const DAMPING: f64 = 0.5;
pub const FALLBACK_DAMPING: f64 = 0.1;
/// Iterations without a new best residual before switching to the fallback damping.
pub const STALL_WINDOW: usize = 200;
pub const MAX_ITERATIONS: usize = 10_000;
/// Relative step size at which the fixed points are declared converged.
pub const FIXED_POINT_TOL: f64 = 1e-14;
/// Smallest distance to ℝ₊ accepted for derivative evaluations.
pub const MIN_DELTA: f64 = 1e-3;
pub const DEFAULT_ETA: f64 = 1e-6;
pub const CONTOUR_NODES: usize = 64;
/// Damped sweeps before the population chain switches to Newton.
const NEWTON_WARMUP: usize = 20;
const NEWTON_MAX_STEPS: usize = 60;
/// Relative Newton step below which a stalled residual counts as converged.
const ROUNDOFF_STEP: f64 = 1e-9;
pub const DERIVATIVE_AGREEMENT_TOL: f64 = 1e-6;

pub type StieltjesFn = Arc<dyn Fn(C64) -> Result<C64> + Send + Sync>;

/// A probability measure on `[0, ∞)`.
#[derive(Clone)]
pub enum SpectralMeasure {
    Atoms { values: Vec<f64>, weights: Vec<f64> },
    /// `z ↦ ∫ dμ(x)/(x − z)`.
    Stieltjes(StieltjesFn),
}

impl fmt::Debug for SpectralMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralMeasure::Atoms { values, .. } => write!(f, "Atoms({} points)", values.len()),
            SpectralMeasure::Stieltjes(_) => write!(f, "Stieltjes(..)"),
        }
    }
}

impl SpectralMeasure {
    pub fn dirac(x: f64) -> Self {
        SpectralMeasure::Atoms {
            values: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn uniform(values: Vec<f64>) -> Self {
        let w = 1.0 / values.len() as f64;
        let weights = vec![w; values.len()];
        SpectralMeasure::Atoms { values, weights }
    }

    /// Eigenvalues of a symmetric matrix, negative rounding noise clipped to zero.
    pub fn from_symmetric(m: &DMatrix<f64>) -> Self {
        let ev = SymmetricEigen::new(m.clone()).eigenvalues;
        Self::uniform(ev.iter().map(|&x| x.max(0.0)).collect())
    }

    pub fn from_fn(f: impl Fn(C64) -> Result<C64> + Send + Sync + 'static) -> Self {
        SpectralMeasure::Stieltjes(Arc::new(f))
    }

    pub fn stieltjes(&self, z: C64) -> Result<C64> {
        match self {
            SpectralMeasure::Atoms { values, weights } => Ok(values
                .iter()
                .zip(weights)
                .map(|(&x, &w)| w / (x - z))
                .sum()),
            SpectralMeasure::Stieltjes(f) => f(z),
        }
    }

    /// Push-forward under `x ↦ a x`.
    pub fn scaled(&self, a: f64) -> Self {
        match self {
            SpectralMeasure::Atoms { values, weights } => SpectralMeasure::Atoms {
                values: values.iter().map(|x| a * x).collect(),
                weights: weights.clone(),
            },
            SpectralMeasure::Stieltjes(f) => {
                let f = f.clone();
                SpectralMeasure::from_fn(move |z| Ok(f(z / a)? / a))
            }
        }
    }

    /// `⟨Σ(1 + wΣ)^{-1}⟩`.
    fn shrunk_mean(&self, w: C64) -> Result<C64> {
        match self {
            SpectralMeasure::Atoms { values, weights } => Ok(values
                .iter()
                .zip(weights)
                .map(|(&x, &p)| p * x / (1.0 + w * x))
                .sum()),
            SpectralMeasure::Stieltjes(f) => {
                let inv = 1.0 / w;
                Ok(inv * (1.0 - inv * f(-inv)?))
            }
        }
    }

    /// `⟨Σ²(1 + wΣ)^{-2}⟩`, available for atoms only.
    fn shrunk_second(&self, w: C64) -> Option<C64> {
        match self {
            SpectralMeasure::Atoms { values, weights } => Some(
                values
                    .iter()
                    .zip(weights)
                    .map(|(&x, &p)| {
                        let t = x / (1.0 + w * x);
                        p * t * t
                    })
                    .sum(),
            ),
            SpectralMeasure::Stieltjes(_) => None,
        }
    }
}

/// `dist(z, ℝ₊)`.
pub fn dist_to_positive_axis(z: C64) -> f64 {
    if z.re >= 0.0 {
        z.im.abs()
    } else {
        z.norm()
    }
}

fn check_off_axis(z: C64, what: &str) -> Result<()> {
    if !(z.re.is_finite() && z.im.is_finite()) || dist_to_positive_axis(z) <= 0.0 {
        return Err(DrfError::Geometry(format!(
            "{what}: spectral parameter {z} lies on [0, ∞)"
        )));
    }
    Ok(())
}

/// Damped fixed-point driver shared by the solvers in this module.
///
/// `map` returns the undamped update. The damping drops from
/// [`DAMPING`] to [`FALLBACK_DAMPING`] when the step size has not reached a
/// new minimum for [`STALL_WINDOW`] iterations.
fn damped_fixed_point(
    solver: &'static str,
    mut x: Vec<C64>,
    tol: f64,
    mut map: impl FnMut(&[C64]) -> Result<Vec<C64>>,
) -> Result<(Vec<C64>, usize, f64)> {
    let mut beta = DAMPING;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut step = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let next = map(&x)?;
        step = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (b - a).norm() / a.norm().max(b.norm()).max(1e-300))
            .fold(0.0, f64::max);
        if !step.is_finite() || next.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(DrfError::NonConvergence {
                solver,
                iterations: it,
                residual: f64::NAN,
            });
        }
        if step <= tol {
            return Ok((next, it, step));
        }
        if step < best {
            best = step;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > STALL_WINDOW && beta > FALLBACK_DAMPING {
                beta = FALLBACK_DAMPING;
                since_best = 0;
            }
        }
        for (xi, ni) in x.iter_mut().zip(&next) {
            *xi = (1.0 - beta) * *xi + beta * ni;
        }
    }
    Err(DrfError::NonConvergence {
        solver,
        iterations: MAX_ITERATIONS,
        residual: step,
    })
}

/// Newton on `residual(x) = 0` with a central-difference Jacobian. The
/// residuals used here are holomorphic, so a real step gives the complex
/// derivative. Returns `None` if the iteration diverges or stalls.
fn newton_polish(
    mut x: Vec<C64>,
    residual: impl Fn(&[C64]) -> Result<Vec<C64>>,
) -> Result<Option<(Vec<C64>, usize)>> {
    let n = x.len();
    let mut best = x.clone();
    let mut last_residual = f64::INFINITY;
    let mut last_rel = f64::INFINITY;
    for it in 1..=NEWTON_MAX_STEPS {
        let r = residual(&x)?;
        let r_norm = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
        // Ill-conditioned chains bottom out at rounding level above the
        // step tolerance; accept once the residual stops improving there.
        if last_rel < ROUNDOFF_STEP && r_norm >= last_residual {
            return Ok(Some((best, it - 1)));
        }
        if r_norm < last_residual {
            best = x.clone();
        }
        last_residual = r_norm;
        let mut jac = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for j in 0..n {
            let h = 1e-6 * x[j].norm().max(1e-8);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (rp, rm) = (residual(&xp)?, residual(&xm)?);
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let Some(step) = jac.lu().solve(&nalgebra::DVector::from_vec(r)) else {
            return Ok(None);
        };
        let mut rel: f64 = 0.0;
        for j in 0..n {
            let next = x[j] - step[j];
            rel = rel.max(step[j].norm() / x[j].norm().max(next.norm()).max(1e-300));
            x[j] = next;
        }
        if x.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Ok(None);
        }
        if rel <= FIXED_POINT_TOL {
            return Ok(Some((x, it)));
        }
        last_rel = rel;
    }
    Ok(None)
}

/// Solution of the Marchenko–Pastur equation.
#[derive(Clone, Copy, Debug)]
pub struct MpSolution {
    /// Gram-side companion transform `wc m`.
    pub wc_m: C64,
    /// Sample-covariance-side transform, `wc m = (c − 1)/z + c m̂`.
    pub m_hat: C64,
    pub iterations: usize,
    /// `|1 − c + z wc m + c⟨(Σ wc m + 1)^{-1}⟩|`.
    pub residual: f64,
}

/// Solves `1 − c + z·w = −c⟨(Σw + 1)^{-1}⟩` for the Gram companion `w`.
///
/// Here `c` is the population dimension over the number of samples.
pub fn mp_selfconsistent(measure: &SpectralMeasure, c: f64, z: C64) -> Result<MpSolution> {
    check_off_axis(z, "mp_selfconsistent")?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(DrfError::Config(format!("aspect ratio must be positive, got {c}")));
    }
    // Silverstein form: z = −1/w + c⟨Σ(1 + wΣ)^{-1}⟩.
    let update = |w: C64| -> Result<C64> { Ok(-1.0 / (z - c * measure.shrunk_mean(w)?)) };
    let (mut sol, mut iterations, _) =
        damped_fixed_point("mp_selfconsistent", vec![-1.0 / z], FIXED_POINT_TOL, |x| {
            Ok(vec![update(x[0])?])
        })?;
    let mut w = sol.pop().unwrap();
    // A few Newton polishing steps where the derivative is available in closed form.
    if measure.shrunk_second(w).is_some() {
        for _ in 0..3 {
            let f = z + 1.0 / w - c * measure.shrunk_mean(w)?;
            let df = -1.0 / (w * w) + c * measure.shrunk_second(w).unwrap();
            let next = w - f / df;
            iterations += 1;
            if (next - w).norm() <= 1e-16 * w.norm() {
                w = next;
                break;
            }
            w = next;
        }
    }
    let residual = {
        // ⟨(1 + wΣ)^{-1}⟩ = 1 − w⟨Σ(1 + wΣ)^{-1}⟩
        let inv_mean = 1.0 - w * measure.shrunk_mean(w)?;
        (1.0 - c + z * w + c * inv_mean).norm()
    };
    if w.im * z.im < -1e-12 * w.norm() {
        return Err(DrfError::Numerical(format!(
            "mp_selfconsistent left the Nevanlinna branch at z = {z}: w = {w}"
        )));
    }
    Ok(MpSolution {
        wc_m: w,
        m_hat: (w - (c - 1.0) / z) / c,
        iterations,
        residual,
    })
}

/// Roots of `a m² + b m + c = 0`.
fn quadratic_roots(a: C64, b: C64, c: C64) -> [C64; 2] {
    let disc = (b * b - 4.0 * a * c).sqrt();
    // Numerically stable pairing.
    let q = if (b.conj() * disc).re >= 0.0 {
        -0.5 * (b + disc)
    } else {
        -0.5 * (b - disc)
    };
    if a.norm() == 0.0 {
        return [-c / b, -c / b];
    }
    if q.norm() == 0.0 {
        return [C64::new(0.0, 0.0); 2];
    }
    [q / a, c / q]
}

/// Picks the Stieltjes branch: `Im m · Im z > 0` when that singles out one
/// root, otherwise the root closest to `previous`.
fn select_branch(roots: [C64; 2], z: C64, previous: C64) -> C64 {
    let s = z.im.signum();
    let ok: Vec<C64> = roots
        .iter()
        .copied()
        .filter(|r| z.im != 0.0 && r.im * s > 0.0)
        .collect();
    if ok.len() == 1 {
        return ok[0];
    }
    let pool: &[C64] = if ok.is_empty() { &roots } else { &ok };
    *pool
        .iter()
        .min_by(|a, b| (*a - previous).norm().partial_cmp(&(*b - previous).norm()).unwrap())
        .unwrap()
}

/// Per-layer slope factors `a_ℓ = (κ₁^ℓ)² Δ_ℓ` and offsets `(κ★^ℓ)²`.
fn layer_gains(coeffs: &GECoefficients) -> (Vec<f64>, Vec<f64>) {
    let a = coeffs
        .kappa1
        .iter()
        .zip(&coeffs.deltas)
        .map(|(k, d)| k * k * d)
        .collect();
    let s = coeffs.kappa_star.iter().map(|k| k * k).collect();
    (a, s)
}

fn check_gammas(coeffs: &GECoefficients, gammas: &[f64]) -> Result<()> {
    if gammas.len() != coeffs.depth() {
        return Err(DrfError::Config(format!(
            "{} width ratios for a depth-{} network",
            gammas.len(),
            coeffs.depth()
        )));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0)) {
        return Err(DrfError::Config(format!("width ratio {g} is not positive")));
    }
    Ok(())
}

/// Converged chain of the Gram-resolvent deterministic equivalent.
#[derive(Clone, Debug)]
pub struct LayerRecursionState {
    /// `z_0 … z_L`.
    pub z: Vec<C64>,
    /// `wc m_0 … wc m_L`. Entry 0 is the `n × n` trace at the input layer;
    /// entries `ℓ ≥ 1` are `(1/k_ℓ) tr(X_ℓX_ℓᵀ/k_ℓ − z_ℓ)^{-1}`.
    pub wc_m: Vec<C64>,
    /// `c_1 … c_L`.
    pub c: Vec<C64>,
    /// `(1/n) tr(X_Lᵀ X_L/k_L − z_L)^{-1} = c_1⋯c_L wc m_0`.
    pub n_side_trace: C64,
    pub iterations: usize,
    /// Largest residual of the per-layer self-consistent equations.
    pub residual: f64,
}

impl LayerRecursionState {
    pub fn wc_m_top(&self) -> C64 {
        *self.wc_m.last().unwrap()
    }
}

/// Deterministic equivalent of `(1/k_L) tr(X_L X_Lᵀ/k_L − z_L)^{-1}` for
/// features of `n = αd` Gaussian inputs with covariance `Ω₀`.
pub fn layer_recursion(
    coeffs: &GECoefficients,
    alpha: f64,
    gammas: &[f64],
    omega0: &SpectralMeasure,
    z_top: C64,
) -> Result<LayerRecursionState> {
    check_gammas(coeffs, gammas)?;
    check_off_axis(z_top, "layer_recursion")?;
    if !(alpha > 0.0) {
        return Err(DrfError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let depth = coeffs.depth();
    let (a, s) = layer_gains(coeffs);
    // Input layer: (1/n) tr(X0ᵀX0/d − z)^{-1} = (d/n) wc m_{Ω₀, d/n}((d/n) z).
    let input_trace = |z0: C64| -> Result<C64> {
        Ok(mp_selfconsistent(omega0, 1.0 / alpha, z0 / alpha)?.wc_m / alpha)
    };
    // n-side trace from the k-side one at layer ℓ.
    let n_side = |l: usize, w: C64, z: C64| -> C64 {
        let r = gammas[l - 1] / alpha;
        r * w - (1.0 - r) / z
    };
    // z_{ℓ−1} from wc m_ℓ; None when the layer has no linear component.
    let lower_z = |l: usize, w: C64| -> Option<C64> {
        (a[l - 1] > 0.0).then(|| (-1.0 / w - s[l - 1]) / a[l - 1])
    };

    let mut z = vec![z_top; depth + 1];
    let mut g = vec![C64::new(0.0, 0.0); depth + 1];
    let sweep = |w: &[C64], z: &mut Vec<C64>, g: &mut Vec<C64>| -> Result<Vec<C64>> {
        // w[ℓ−1] holds wc m_ℓ.
        let mut start = 0;
        for l in (1..=depth).rev() {
            match lower_z(l, w[l - 1]) {
                Some(zl) => z[l - 1] = zl,
                None => {
                    start = l;
                    break;
                }
            }
        }
        let mut out = vec![C64::new(0.0, 0.0); depth];
        if start == 0 {
            g[0] = input_trace(z[0])?;
        }
        for l in start.max(1)..=depth {
            let c = alpha / gammas[l - 1];
            let zl = z[l];
            let wl = if l == start {
                // Σ_lin = κ★² I exactly.
                mp_selfconsistent(&SpectralMeasure::dirac(s[l - 1]), c, zl)?.wc_m
            } else {
                let roots = quadratic_roots(zl, C64::from(1.0 - c), c * g[l - 1] / a[l - 1]);
                select_branch(roots, zl, w[l - 1])
            };
            out[l - 1] = wl;
            g[l] = n_side(l, wl, zl);
        }
        Ok(out)
    };

    // Residual of the per-layer equations at a candidate (wc m_1 … wc m_L).
    let residual_map = |w: &[C64]| -> Result<Vec<C64>> {
        let mut z = vec![z_top; depth + 1];
        let mut start = 0;
        for l in (1..=depth).rev() {
            match lower_z(l, w[l - 1]) {
                Some(zl) => z[l - 1] = zl,
                None => {
                    start = l;
                    break;
                }
            }
        }
        let mut r = Vec::with_capacity(depth);
        for l in 1..=depth {
            let wl = w[l - 1];
            let c = alpha / gammas[l - 1];
            r.push(if l < start {
                wl
            } else if l == start {
                wl - mp_selfconsistent(&SpectralMeasure::dirac(s[l - 1]), c, z[l])?.wc_m
            } else {
                let lower = if l == 1 { input_trace(z[0])? } else { n_side(l - 1, w[l - 2], z[l - 1]) };
                z[l] * wl * wl + (1.0 - c) * wl + c * lower / a[l - 1]
            });
        }
        Ok(r)
    };

    let (w, iterations) = if depth == 0 {
        (Vec::new(), 0)
    } else {
        let mut w: Vec<C64> = vec![-1.0 / z_top; depth];
        let mut its = 0;
        for _ in 0..NEWTON_WARMUP {
            let next = sweep(&w, &mut z, &mut g)?;
            its += 1;
            w = next.iter().zip(&w).map(|(n, o)| DAMPING * n + (1.0 - DAMPING) * o).collect();
        }
        let on_branch = |w: &[C64], z: &[C64]| {
            (1..=depth).all(|l| w[l - 1].im * z[l].im >= -1e-12 * w[l - 1].norm())
        };
        match newton_polish(w.clone(), residual_map)? {
            Some((polished, n)) => {
                sweep(&polished, &mut z, &mut g)?;
                if on_branch(&polished, &z) {
                    (polished, its + n)
                } else {
                    let (w, n, _) = damped_fixed_point("layer_recursion", w, FIXED_POINT_TOL, |w| {
                        sweep(w, &mut z, &mut g)
                    })?;
                    (w, its + n)
                }
            }
            None => {
                let (w, n, _) = damped_fixed_point("layer_recursion", w, FIXED_POINT_TOL, |w| {
                    sweep(w, &mut z, &mut g)
                })?;
                (w, its + n)
            }
        }
    };
    // One clean pass at the converged point so that z, g and w agree.
    let w = if depth == 0 { w } else { sweep(&w, &mut z, &mut g)? };
    if depth == 0 {
        g[0] = input_trace(z[0])?;
    }

    let mut residual: f64 = 0.0;
    let mut c_factors = Vec::with_capacity(depth);
    for l in 1..=depth {
        let wl = w[l - 1];
        let zl = z[l];
        let c = alpha / gammas[l - 1];
        if a[l - 1] > 0.0 {
            let eq = zl * wl * wl + (1.0 - c) * wl + c * g[l - 1] / a[l - 1];
            residual = residual.max(eq.norm() / wl.norm().max(1e-300));
            let d_above = dist_to_positive_axis(-1.0 / wl);
            let d_here = dist_to_positive_axis(zl);
            if d_above < d_here * (1.0 - 1e-8) - 1e-14 {
                return Err(DrfError::Numerical(format!(
                    "layer {l}: dist(−1/wc m, ℝ₊) = {d_above:e} < dist(z, ℝ₊) = {d_here:e}"
                )));
            }
        }
        c_factors.push(-1.0 / (wl * zl * a[l - 1]));
    }
    let mut wc_m = Vec::with_capacity(depth + 1);
    wc_m.push(g[0]);
    wc_m.extend_from_slice(&w);
    Ok(LayerRecursionState {
        z,
        wc_m,
        c: c_factors,
        n_side_trace: g[depth],
        iterations,
        residual,
    })
}

/// Limiting spectrum of the linearized covariance `Ω_lin^L`, resolved one
/// layer at a time through its Stieltjes transform.
#[derive(Clone, Debug)]
pub struct PopulationChain {
    /// `(κ₁^ℓ)² Δ_ℓ`.
    pub slopes: Vec<f64>,
    /// `(κ★^ℓ)²`.
    pub offsets: Vec<f64>,
    /// Local width ratios `k_{ℓ−1}/k_ℓ`.
    pub ratios: Vec<f64>,
    pub input: SpectralMeasure,
}

/// Converged `(z_ℓ, m_ℓ)` arrays of the population chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub z: Vec<C64>,
    pub m: Vec<C64>,
    pub iterations: usize,
}

impl PopulationChain {
    /// `gammas` are the global ratios `k_ℓ/d`.
    pub fn new(coeffs: &GECoefficients, gammas: &[f64], input: SpectralMeasure) -> Result<Self> {
        check_gammas(coeffs, gammas)?;
        let (slopes, offsets) = layer_gains(coeffs);
        let ratios = (0..gammas.len())
            .map(|l| if l == 0 { 1.0 } else { gammas[l - 1] } / gammas[l])
            .collect();
        Ok(PopulationChain {
            slopes,
            offsets,
            ratios,
            input,
        })
    }

    pub fn depth(&self) -> usize {
        self.slopes.len()
    }

    /// The chain truncated after `depth` layers.
    pub fn truncated(&self, depth: usize) -> Self {
        PopulationChain {
            slopes: self.slopes[..depth].to_vec(),
            offsets: self.offsets[..depth].to_vec(),
            ratios: self.ratios[..depth].to_vec(),
            input: self.input.clone(),
        }
    }

    /// Index of the lowest layer whose output does not depend on the layers below.
    fn first_active(&self) -> usize {
        (1..=self.depth())
            .rev()
            .find(|&l| self.slopes[l - 1] == 0.0)
            .unwrap_or(0)
    }

    /// `m_L(z)`, optionally warm-started from a previous state.
    ///
    /// A short damped fixed-point run locates the branch; Newton steps on the
    /// polynomial form of the chain then finish the solve. Near spectral edges
    /// the fixed point alone contracts too slowly, so it only serves as a
    /// fallback when Newton leaves the branch or stalls.
    pub fn solve(&self, z_top: C64, warm: Option<&ChainState>) -> Result<ChainState> {
        check_off_axis(z_top, "population chain")?;
        let depth = self.depth();
        if depth == 0 {
            return Ok(ChainState {
                z: vec![z_top],
                m: vec![self.input.stieltjes(z_top)?],
                iterations: 0,
            });
        }
        let init: Vec<C64> = match warm {
            Some(w) if w.m.len() == depth + 1 => w.m.clone(),
            _ => vec![-1.0 / z_top; depth + 1],
        };
        let mut iterations = 0;
        let mut m = init;
        for _ in 0..NEWTON_WARMUP {
            let next = self.sweep(z_top, &m)?;
            iterations += 1;
            m = next.iter().zip(&m).map(|(n, o)| DAMPING * n + (1.0 - DAMPING) * o).collect();
        }
        if let Some((polished, its)) = self.newton(z_top, m.clone())? {
            return Ok(ChainState {
                z: self.spectral_points(z_top, &polished),
                m: polished,
                iterations: iterations + its,
            });
        }
        let (m, its, _) = damped_fixed_point("population chain", m, FIXED_POINT_TOL, |m| {
            self.sweep(z_top, m)
        })?;
        let m = self.sweep(z_top, &m)?;
        Ok(ChainState {
            z: self.spectral_points(z_top, &m),
            m,
            iterations: iterations + its,
        })
    }

    fn spectral_points(&self, z_top: C64, m: &[C64]) -> Vec<C64> {
        let depth = self.depth();
        let start = self.first_active();
        let mut z = vec![z_top; depth + 1];
        for i in (start..depth).rev() {
            z[i] = -self.ratios[i] / (self.slopes[i] * m[i + 1]);
        }
        z
    }

    /// Value of the innermost transform at its spectral point.
    fn base(&self, start: usize, z: C64) -> Result<C64> {
        if start == 0 {
            self.input.stieltjes(z)
        } else {
            Ok(1.0 / (self.offsets[start - 1] - z))
        }
    }

    /// One undamped pass of the two-array scheme.
    fn sweep(&self, z_top: C64, m: &[C64]) -> Result<Vec<C64>> {
        let depth = self.depth();
        let start = self.first_active();
        let z = self.spectral_points(z_top, m);
        let mut out = m.to_vec();
        out[start] = self.base(start, z[start])?;
        for i in start + 1..=depth {
            let g = self.ratios[i - 1];
            let shifted = z[i] - self.offsets[i - 1];
            let roots = quadratic_roots(
                shifted,
                C64::from(1.0 - g),
                g * g * out[i - 1] / self.slopes[i - 1],
            );
            out[i] = select_branch(roots, z[i], m[i]);
        }
        Ok(out)
    }

    /// Newton on `R_start = m_start − base(z_start)`,
    /// `R_i = (z_i − κ★²) m_i² − (g_i − 1) m_i + g_i² m_{i−1}/a_i`.
    /// Returns `None` when the iteration leaves the Stieltjes branch or stalls.
    fn newton(&self, z_top: C64, mut m: Vec<C64>) -> Result<Option<(Vec<C64>, usize)>> {
        let depth = self.depth();
        let start = self.first_active();
        let n = depth + 1 - start;
        let zero = C64::new(0.0, 0.0);
        for it in 1..=NEWTON_MAX_STEPS {
            let z = self.spectral_points(z_top, &m);
            let mut r = nalgebra::DVector::from_element(n, zero);
            let mut jac = DMatrix::from_element(n, n, zero);
            // dz_i/dm_{i+1}
            let dz = |i: usize| self.ratios[i] / (self.slopes[i] * m[i + 1] * m[i + 1]);
            r[0] = m[start] - self.base(start, z[start])?;
            jac[(0, 0)] = C64::from(1.0);
            if start < depth {
                let h = 1e-7 * z[start].norm().max(1e-3);
                let db = (self.base(start, z[start] + h)? - self.base(start, z[start] - h)?) / (2.0 * h);
                jac[(0, 1)] = -db * dz(start);
            }
            for i in start + 1..=depth {
                let j = i - start;
                let g = self.ratios[i - 1];
                let a = self.slopes[i - 1];
                let shifted = z[i] - self.offsets[i - 1];
                r[j] = shifted * m[i] * m[i] - (g - 1.0) * m[i] + g * g * m[i - 1] / a;
                jac[(j, j)] = 2.0 * shifted * m[i] - (g - 1.0);
                jac[(j, j - 1)] = C64::from(g * g / a);
                if i < depth {
                    jac[(j, j + 1)] = m[i] * m[i] * dz(i);
                }
            }
            let Some(step) = jac.lu().solve(&r) else {
                return Ok(None);
            };
            let mut rel: f64 = 0.0;
            for j in 0..n {
                let i = start + j;
                let next = m[i] - step[j];
                rel = rel.max(step[j].norm() / m[i].norm().max(next.norm()).max(1e-300));
                m[i] = next;
            }
            if m.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
                return Ok(None);
            }
            if rel <= FIXED_POINT_TOL {
                let z = self.spectral_points(z_top, &m);
                let on_branch = (start..=depth).all(|i| m[i].im * z[i].im >= -1e-12 * m[i].norm());
                return Ok(on_branch.then_some((m, it)));
            }
        }
        Ok(None)
    }

    pub fn stieltjes(&self, z: C64) -> Result<C64> {
        Ok(*self.solve(z, None)?.m.last().unwrap())
    }

    /// Point masses of `μ_L` as `(location, mass)`; nonzero only when a layer
    /// widens past the rank of its input.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        let mut zero_mass = match &self.input {
            SpectralMeasure::Atoms { values, weights } => values
                .iter()
                .zip(weights)
                .filter(|(v, _)| **v == 0.0)
                .map(|(_, w)| *w)
                .sum(),
            SpectralMeasure::Stieltjes(_) => 0.0,
        };
        let mut atom = (0.0, zero_mass);
        for l in 0..self.depth() {
            let rank_deficit = if self.slopes[l] == 0.0 {
                1.0
            } else {
                (1.0 - self.ratios[l] * (1.0 - zero_mass)).max(0.0)
            };
            atom = (self.offsets[l], rank_deficit);
            zero_mass = if self.offsets[l] == 0.0 { rank_deficit } else { 0.0 };
        }
        if atom.1 > 1e-12 {
            vec![atom]
        } else {
            Vec::new()
        }
    }

    /// Upper bound on the support of `μ_L`.
    pub fn support_upper_bound(&self) -> f64 {
        let mut b = match &self.input {
            SpectralMeasure::Atoms { values, .. } => values.iter().cloned().fold(0.0, f64::max),
            // Callable inputs: assume a unit-scale spectrum.
            SpectralMeasure::Stieltjes(_) => 1.0,
        };
        for l in 0..self.depth() {
            b = self.slopes[l] * (1.0 + self.ratios[l].recip().sqrt()).powi(2) * b + self.offsets[l];
        }
        b
    }

    pub fn into_measure(self) -> SpectralMeasure {
        SpectralMeasure::from_fn(move |z| self.stieltjes(z))
    }
}

/// One grid point of a spectral density.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DensityPoint {
    pub lambda: f64,
    pub density: f64,
    pub eta: f64,
    pub converged_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct DensityResult {
    /// Density of the continuous part.
    pub points: Vec<DensityPoint>,
    /// Point masses, excluded from `points`.
    pub atoms: Vec<(f64, f64)>,
}

impl DensityResult {
    /// CDF at `x` from the trapezoid rule on the grid plus the atoms.
    pub fn cdf(&self) -> impl Fn(f64) -> f64 + '_ {
        let mut cum = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 {
                let q = &self.points[i - 1];
                acc += 0.5 * (p.density + q.density) * (p.lambda - q.lambda);
            }
            cum.push(acc);
        }
        move |x: f64| {
            let atoms: f64 = self.atoms.iter().filter(|(a, _)| *a <= x).map(|(_, m)| m).sum();
            let pts = &self.points;
            let cont = if pts.is_empty() || x < pts[0].lambda {
                0.0
            } else if x >= pts[pts.len() - 1].lambda {
                cum[pts.len() - 1]
            } else {
                let j = pts.partition_point(|p| p.lambda <= x);
                let (p, q) = (&pts[j - 1], &pts[j]);
                let t = (x - p.lambda) / (q.lambda - p.lambda);
                let mid = p.density + t * (q.density - p.density);
                cum[j - 1] + 0.5 * (p.density + mid) * (x - p.lambda)
            };
            atoms + cont
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.cdf()(f64::INFINITY)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| DrfError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| DrfError::io(path, e);
        writeln!(w, "lambda,density,eta,converged_iterations").map_err(io)?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.lambda, p.density, p.eta, p.converged_iterations)
                .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Density of `μ_L` on an increasing grid, sweeping left to right so that
/// each point starts from its neighbour's branch.
pub fn density_scheme(chain: &PopulationChain, grid: &[f64], eta: f64) -> Result<DensityResult> {
    if !(eta > 0.0) {
        return Err(DrfError::Config(format!("eta must be positive, got {eta}")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|&x| x < 0.0) {
        return Err(DrfError::Config("grid must be increasing and nonnegative".into()));
    }
    let atoms = chain.atoms();
    let mut warm: Option<ChainState> = None;
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let z = C64::new(lambda, eta);
        let state = match chain.solve(z, warm.as_ref()) {
            Ok(s) => s,
            Err(_) if warm.is_some() => chain.solve(z, None)?,
            Err(e) => return Err(e),
        };
        let mut m = *state.m.last().unwrap();
        for &(loc, mass) in &atoms {
            m -= mass / (loc - z);
        }
        points.push(DensityPoint {
            lambda,
            density: (m.im / std::f64::consts::PI).max(0.0),
            eta,
            converged_iterations: state.iterations,
        });
        warm = Some(state);
    }
    Ok(DensityResult { points, atoms })
}

/// Uniform grid covering the support of `μ_L`.
pub fn default_grid(chain: &PopulationChain, points: usize) -> Vec<f64> {
    let hi = 1.05 * chain.support_upper_bound();
    (0..points)
        .map(|i| hi * (i as f64 + 0.5) / points as f64)
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Derivative {
    pub value: C64,
    pub finite_difference: C64,
    pub relative_disagreement: f64,
}

/// `f'(z)` from a trapezoid Cauchy integral on a circle of radius `δ/2`,
/// cross-checked against a central difference with step `δ·1e-4`.
pub fn resolvent_derivative(f: impl Fn(C64) -> Result<C64>, z: C64) -> Result<Derivative> {
    let delta = dist_to_positive_axis(z);
    if !(delta >= MIN_DELTA) {
        return Err(DrfError::Geometry(format!(
            "dist(z, ℝ₊) = {delta:e} is below {MIN_DELTA:e} at z = {z}"
        )));
    }
    let r = 0.5 * delta;
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..CONTOUR_NODES {
        let theta = 2.0 * std::f64::consts::PI * j as f64 / CONTOUR_NODES as f64;
        let u = C64::from_polar(1.0, theta);
        acc += f(z + r * u)? / u;
    }
    let value = acc / (r * CONTOUR_NODES as f64);
    let h = delta * 1e-4;
    let finite_difference = (f(z + h)? - f(z - h)?) / (2.0 * h);
    let relative_disagreement =
        (value - finite_difference).norm() / value.norm().max(finite_difference.norm()).max(1e-300);
    if relative_disagreement > DERIVATIVE_AGREEMENT_TOL {
        return Err(DrfError::Numerical(format!(
            "contour derivative {value} and finite difference {finite_difference} disagree \
             by {relative_disagreement:e}"
        )));
    }
    Ok(Derivative {
        value,
        finite_difference,
        relative_disagreement,
    })
}

/// Kolmogorov–Smirnov distance between a CDF and a sample.
pub fn ks_distance(cdf: impl Fn(f64) -> f64, sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        // Ties: jump over equal values at once.
        let mut j = i;
        while j + 1 < xs.len() && xs[j + 1] == xs[i] {
            j += 1;
        }
        let f = cdf(xs[i]);
        worst = worst.max((f - i as f64 / n).abs()).max((f - (j + 1) as f64 / n).abs());
        i = j + 1;
    }
    worst
}
