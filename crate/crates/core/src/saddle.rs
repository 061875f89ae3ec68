//! Saddle-point equations of the Gaussian covariate model for ridge and
//! logistic readouts.
//!
//! The fixed point alternates a channel step, which maps the overlaps
//! `(V, q, m)` to their conjugates through one-dimensional Gaussian
//! integrals, and a matrix step, which maps the conjugates back through
//! traces over the spectrum of `Ω`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::lincov::CovarianceSet;
use crate::quadrature::GaussianQuadrature;

pub const SADDLE_TOL: f64 = 1e-8;
pub const SADDLE_MAX_ITER: usize = 10_000;
/// Fraction of the previous iterate kept at each step.
pub const SADDLE_DAMPING: f64 = 0.7;
pub const PROX_TOL: f64 = 1e-12;
const PROX_MAX_ITER: usize = 200;
/// Smallest target-given-estimator variance `ρ − m²/q` passed to the
/// logistic channel, relative to `ρ`.
const MIN_CONDITIONAL_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossChannel {
    /// Square loss on labels with noise variance `delta`.
    Square { delta: f64 },
    /// Logistic loss on sign labels.
    Logistic,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SaddleState {
    pub v: f64,
    pub q: f64,
    pub m: f64,
    pub v_hat: f64,
    pub q_hat: f64,
    pub m_hat: f64,
    pub rho: f64,
    pub iterations: usize,
    /// Largest violation of the six equations at the reported point.
    pub residual: f64,
}

/// `ρ + q − 2m`, the noiseless test mean squared error.
pub fn regression_error(state: &SaddleState) -> f64 {
    state.rho + state.q - 2.0 * state.m
}

/// `arccos(m/√(ρq))/π`; `0.5` when `q = 0`.
pub fn classification_error(state: &SaddleState) -> f64 {
    if state.q <= 0.0 || state.rho <= 0.0 {
        return 0.5;
    }
    (state.m / (state.rho * state.q).sqrt()).clamp(-1.0, 1.0).acos() / PI
}

impl LossChannel {
    pub fn test_error(&self, state: &SaddleState) -> f64 {
        match self {
            LossChannel::Square { .. } => regression_error(state),
            LossChannel::Logistic => classification_error(state),
        }
    }
}

/// Proximal solution `f(y, ω, V)` of `f = y/(1 + e^{y(Vf + ω)})` and `∂_ω f`.
#[derive(Clone, Copy, Debug)]
pub struct Prox {
    pub f: f64,
    pub df_domega: f64,
    pub residual: f64,
}

/// `1/(1 + e^{s})`.
fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        let e = (-s).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + s.exp())
    }
}

/// Solves for `u = y f ∈ (0, 1)`, which satisfies `u = 1/(1 + e^{Vu + yω})`,
/// by Newton steps safeguarded with a bisection bracket.
pub fn logistic_prox(y: f64, omega: f64, v: f64) -> Prox {
    debug_assert!(y == 1.0 || y == -1.0);
    debug_assert!(v >= 0.0);
    let s0 = y * omega;
    let h = |u: f64| u - logistic(v * u + s0);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut u = logistic(s0).clamp(0.0, 1.0);
    if v > 0.0 {
        for _ in 0..PROX_MAX_ITER {
            let r = h(u);
            if r.abs() < PROX_TOL * 1e-2 {
                break;
            }
            if r > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let p = logistic(v * u + s0);
            let dh = 1.0 + v * p * (1.0 - p);
            let mut next = u - r / dh;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-17 {
                u = next;
                break;
            }
            u = next;
        }
    }
    let p = logistic(v * u + s0);
    let sp = p * (1.0 - p);
    Prox {
        f: y * u,
        // u = σ(−s), s = Vu + yω: du/dω = −y σ'/(1 + Vσ'), and f = y u.
        df_domega: -sp / (1.0 + v * sp),
        residual: h(u).abs(),
    }
}

/// `Z(y, ω, V) = ½(1 + erf(yω/√(2V)))`.
pub fn z_channel(y: f64, omega: f64, v: f64) -> f64 {
    0.5 * libm::erfc(-y * omega / (2.0 * v).sqrt())
}

/// `∂_ω Z(y, ω, V)`.
pub fn dz_channel(y: f64, omega: f64, v: f64) -> f64 {
    y * (-omega * omega / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
}

/// Per-sample parts of the conjugate updates, before the `α/γ` and
/// `α/√(γγ★)` prefactors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelIntegrals {
    pub v_hat: f64,
    pub q_hat: f64,
    pub m_hat: f64,
}

/// Gaussian integrals over `ξ` for the channel at overlaps `(q, m, V)`.
pub fn gaussian_channel_integrals(
    channel: &LossChannel,
    rho: f64,
    q: f64,
    m: f64,
    v: f64,
) -> Result<ChannelIntegrals> {
    match *channel {
        LossChannel::Square { delta } => Ok(ChannelIntegrals {
            v_hat: 1.0 / (1.0 + v),
            q_hat: (rho + delta + q - 2.0 * m) / (1.0 + v).powi(2),
            m_hat: 1.0 / (1.0 + v),
        }),
        LossChannel::Logistic => {
            let cond = rho - m * m / q;
            if !(cond > 0.0) || !(q > 0.0) {
                return Err(DrfError::DegenerateVariance(cond));
            }
            let (nodes, weights) = GaussianQuadrature::shared().hermite().standard_normal();
            let (sq, shift) = (q.sqrt(), m / q.sqrt());
            let mut out = ChannelIntegrals {
                v_hat: 0.0,
                q_hat: 0.0,
                m_hat: 0.0,
            };
            for (xi, w) in nodes.iter().zip(&weights) {
                let omega_star = shift * xi;
                let omega = sq * xi;
                for y in [1.0, -1.0] {
                    let z = z_channel(y, omega_star, cond);
                    let dz = dz_channel(y, omega_star, cond);
                    let p = logistic_prox(y, omega, v);
                    out.v_hat -= w * z * p.df_domega;
                    out.q_hat += w * z * p.f * p.f;
                    out.m_hat += w * dz * p.f;
                }
            }
            Ok(out)
        }
    }
}

/// The matrix side of the fixed point, diagonalized once.
#[derive(Clone, Debug)]
pub struct SaddleProblem {
    /// Eigenvalues of `Ω`.
    pub omega_eigs: Vec<f64>,
    /// `(UᵀΦᵀθ★)²` in the eigenbasis of `Ω`.
    pub teacher_weights: Vec<f64>,
    pub rho: f64,
    pub k: usize,
    pub k_star: usize,
    pub d: usize,
}

impl SaddleProblem {
    /// Uses the given `θ★`.
    pub fn new(cov: &CovarianceSet) -> Self {
        Self::build(cov, false)
    }

    /// Replaces `θ★θ★ᵀ` by its average `I` over a standard Gaussian `θ★`,
    /// so `ρ = tr(Ψ)/k★`.
    pub fn averaged(cov: &CovarianceSet) -> Self {
        Self::build(cov, true)
    }

    fn build(cov: &CovarianceSet, average: bool) -> Self {
        let eig = SymmetricEigen::new(cov.omega.clone());
        let u = &eig.eigenvectors;
        let (k, k_star) = (cov.k(), cov.k_star());
        let (teacher_weights, rho) = if average {
            // diag(Uᵀ ΦᵀΦ U)
            let pu = &cov.phi * u;
            let w = (0..k).map(|j| pu.column(j).norm_squared()).collect();
            (w, cov.psi.trace() / k_star as f64)
        } else {
            let b = u.tr_mul(&(cov.phi.tr_mul(&cov.theta_star)));
            (b.iter().map(|x| x * x).collect(), cov.rho)
        };
        SaddleProblem {
            omega_eigs: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            teacher_weights,
            rho,
            k,
            k_star,
            d: cov.d,
        }
    }

    /// `(V, q, m)` from the conjugates.
    fn matrix_step(&self, lambda: f64, hats: &ChannelIntegrals) -> (f64, f64, f64) {
        let (mut v, mut q, mut m) = (0.0, 0.0, 0.0);
        for (&w, &b2) in self.omega_eigs.iter().zip(&self.teacher_weights) {
            let den = lambda + hats.v_hat * w;
            v += w / den;
            q += (hats.q_hat * w + hats.m_hat * hats.m_hat * b2) * w / (den * den);
            m += b2 / den;
        }
        let k = self.k as f64;
        let ratio = (self.k as f64 / self.k_star as f64).sqrt();
        (v / k, q / k, ratio * hats.m_hat * m / k)
    }

    /// Conjugates from the overlaps, with the sample-ratio prefactors.
    fn channel_step(
        &self,
        alpha: f64,
        channel: &LossChannel,
        v: f64,
        q: f64,
        m: f64,
    ) -> Result<ChannelIntegrals> {
        let n = alpha * self.d as f64;
        let (k, ks) = (self.k as f64, self.k_star as f64);
        let raw = gaussian_channel_integrals(channel, self.rho, q, m, v)?;
        Ok(ChannelIntegrals {
            v_hat: n / k * raw.v_hat,
            q_hat: n / k * raw.q_hat,
            m_hat: n / (k * ks).sqrt() * raw.m_hat,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SaddleOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iterations: usize,
    /// Starting `(V, q, m)`.
    pub init: (f64, f64, f64),
}

impl Default for SaddleOptions {
    fn default() -> Self {
        SaddleOptions {
            damping: SADDLE_DAMPING,
            tol: SADDLE_TOL,
            max_iterations: SADDLE_MAX_ITER,
            init: (1.0, 0.5, 0.1),
        }
    }
}

fn clamp_overlap(channel: &LossChannel, rho: f64, q: f64, m: f64) -> f64 {
    match channel {
        LossChannel::Logistic => {
            let cap = (rho * q * (1.0 - MIN_CONDITIONAL_VARIANCE)).sqrt();
            m.clamp(-cap, cap)
        }
        LossChannel::Square { .. } => m,
    }
}

/// Damped iteration of the six saddle-point equations. Converged when one
/// undamped round trip moves every overlap by less than `tol`.
pub fn solve_saddle(
    problem: &SaddleProblem,
    alpha: f64,
    lambda: f64,
    channel: &LossChannel,
    options: &SaddleOptions,
) -> Result<SaddleState> {
    if !(alpha > 0.0) {
        return Err(DrfError::Config(format!("alpha must be positive, got {alpha}")));
    }
    if !(lambda > 0.0) {
        return Err(DrfError::Config(format!("lambda must be positive, got {lambda}")));
    }
    if let LossChannel::Square { delta } = channel {
        if !(*delta >= 0.0) {
            return Err(DrfError::Config(format!("delta must be nonnegative, got {delta}")));
        }
    }
    let rho = problem.rho;
    let (mut v, mut q, mut m) = options.init;
    let beta = options.damping;
    let mut residual = f64::INFINITY;
    for it in 1..=options.max_iterations {
        m = clamp_overlap(channel, rho, q, m);
        let hats = problem.channel_step(alpha, channel, v, q, m)?;
        let (nv, nq, nm) = problem.matrix_step(lambda, &hats);
        residual = (nv - v).abs().max((nq - q).abs()).max((nm - m).abs());
        if !residual.is_finite() {
            break;
        }
        if residual < options.tol {
            return Ok(SaddleState {
                v,
                q,
                m,
                v_hat: hats.v_hat,
                q_hat: hats.q_hat,
                m_hat: hats.m_hat,
                rho,
                iterations: it,
                residual,
            });
        }
        v = beta * v + (1.0 - beta) * nv;
        q = beta * q + (1.0 - beta) * nq;
        m = beta * m + (1.0 - beta) * nm;
    }
    Err(DrfError::NonConvergence {
        solver: "solve_saddle",
        iterations: options.max_iterations,
        residual,
    })
}

/// Solves along an `α` grid. With `warm_start` the grid is swept serially,
/// each point starting from the previous solution; otherwise points are
/// solved independently in parallel.
pub fn sweep_saddle(
    problem: &SaddleProblem,
    alphas: &[f64],
    lambda: f64,
    channel: &LossChannel,
    options: &SaddleOptions,
    warm_start: bool,
) -> Result<Vec<SaddleState>> {
    if warm_start {
        let mut opts = *options;
        let mut out = Vec::with_capacity(alphas.len());
        for &a in alphas {
            let s = solve_saddle(problem, a, lambda, channel, &opts)?;
            opts.init = (s.v, s.q, s.m);
            out.push(s);
        }
        Ok(out)
    } else {
        alphas
            .par_iter()
            .map(|&a| solve_saddle(problem, a, lambda, channel, options))
            .collect()
    }
}

/// Columns `alpha,V,q,m,Vhat,qhat,mhat,eps,iterations,residual`.
pub fn write_saddle_csv(
    path: impl AsRef<Path>,
    channel: &LossChannel,
    alphas: &[f64],
    states: &[SaddleState],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DrfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "alpha,V,q,m,Vhat,qhat,mhat,eps,iterations,residual")?;
        for (a, s) in alphas.iter().zip(states) {
            writeln!(
                w,
                "{a},{},{},{},{},{},{},{},{},{:e}",
                s.v,
                s.q,
                s.m,
                s.v_hat,
                s.q_hat,
                s.m_hat,
                channel.test_error(s),
                s.iterations,
                s.residual
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| DrfError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::arch::{compute_coefficients, sample_network, ArchitectureSpec};
    use crate::ridge::{asymptotic_ridge_error_with, RidgeSetting};
    use crate::rmt::SpectralMeasure;
    use crate::sim::sample_theta_star;
    use rand::{Rng, SeedableRng};

    fn matched_cov(spec: &ArchitectureSpec, seed: u64) -> CovarianceSet {
        let net = sample_network(spec, seed).unwrap();
        let c = compute_coefficients(spec).unwrap();
        let theta = sample_theta_star(net.output_dim(), seed);
        CovarianceSet::matched(&net, &c, theta).unwrap()
    }

    #[test]
    fn prox_without_curvature_is_explicit() {
        for (y, w) in [(1.0, 0.3), (-1.0, 2.0), (1.0, -5.0)] {
            let p = logistic_prox(y, w, 0.0);
            assert!((p.f - y / (1.0 + (y * w).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn prox_saturates() {
        assert!(logistic_prox(1.0, 60.0, 2.0).f.abs() < 1e-25);
        assert!((logistic_prox(-1.0, 60.0, 2.0).f + 1.0).abs() < 1e-12);
    }

    #[test]
    fn prox_solves_its_equation_and_derivative_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let w = rng.random_range(-8.0..8.0);
            let v = rng.random_range(0.0..20.0);
            let p = logistic_prox(y, w, v);
            assert!(p.residual < PROX_TOL, "residual {}", p.residual);
            let eq = p.f - y / (1.0 + (y * (v * p.f + w)).exp());
            assert!(eq.abs() < PROX_TOL);
            let h = 1e-6;
            let fd = (logistic_prox(y, w + h, v).f - logistic_prox(y, w - h, v).f) / (2.0 * h);
            assert!((fd - p.df_domega).abs() < 1e-7, "{fd} vs {}", p.df_domega);
        }
    }

    #[test]
    fn z_channel_identities() {
        assert_eq!(z_channel(1.0, 0.0, 0.7), 0.5);
        for w in [-3.0, -0.2, 0.0, 1.5] {
            assert!((z_channel(1.0, w, 0.4) + z_channel(-1.0, w, 0.4) - 1.0).abs() < 1e-15);
            let h = 1e-6;
            let fd = (z_channel(1.0, w + h, 0.4) - z_channel(1.0, w - h, 0.4)) / (2.0 * h);
            assert!((fd - dz_channel(1.0, w, 0.4)).abs() < 1e-8);
        }
    }

    #[test]
    fn square_channel_matches_its_gaussian_integral() {
        // y | ω★ ~ N(ω★, V★ + Δ), proximal map f = (y − ω)/(1 + V).
        let (rho, q, m, v, delta) = (1.3, 0.7, 0.5, 0.4, 0.2);
        let ch = gaussian_channel_integrals(&LossChannel::Square { delta }, rho, q, m, v).unwrap();
        let h = GaussianQuadrature::shared().hermite();
        let cond = rho - m * m / q;
        let q_hat = h.expect(1.0, |xi| {
            let (ws, w) = (m / q.sqrt() * xi, q.sqrt() * xi);
            h.expect(cond + delta, |e| ((ws + e - w) / (1.0 + v)).powi(2))
        });
        assert!((q_hat - ch.q_hat).abs() < 1e-12, "{q_hat} vs {}", ch.q_hat);
        // ∂_ω Z integrates against f to the same m̂ = 1/(1 + V).
        let m_hat = h.expect(1.0, |xi| {
            let (ws, w) = (m / q.sqrt() * xi, q.sqrt() * xi);
            // ∫ ∂_ω★ N(y; ω★, s) f dy = E[(y − ω★) f]/s
            let s = cond + delta;
            h.expect(s, |e| e * (ws + e - w) / (1.0 + v)) / s
        });
        assert!((m_hat - ch.m_hat).abs() < 1e-12);
    }

    #[test]
    fn logistic_channel_rejects_saturated_overlap() {
        let r = gaussian_channel_integrals(&LossChannel::Logistic, 1.0, 1.0, 1.0, 0.5);
        assert!(matches!(r, Err(DrfError::DegenerateVariance(_))));
    }

    #[test]
    fn error_formulas_at_the_corners() {
        let s = SaddleState {
            rho: 2.0,
            ..Default::default()
        };
        assert_eq!(regression_error(&s), 2.0);
        assert_eq!(classification_error(&s), 0.5);
        let perfect = SaddleState {
            rho: 2.0,
            q: 2.0,
            m: 2.0,
            ..Default::default()
        };
        assert_eq!(regression_error(&perfect), 0.0);
        assert_eq!(classification_error(&perfect), 0.0);
        let orthogonal = SaddleState {
            rho: 2.0,
            q: 1.0,
            m: 0.0,
            ..Default::default()
        };
        assert!((classification_error(&orthogonal) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_data_predicts_zero() {
        let spec = ArchitectureSpec::uniform(60, 1, 1.0, ActivationKind::tanh());
        let p = SaddleProblem::new(&matched_cov(&spec, 1));
        let s = solve_saddle(&p, 1e-3, 1.0, &LossChannel::Square { delta: 0.0 }, &Default::default())
            .unwrap();
        assert!(s.q < 1e-3 && s.m.abs() < 1e-2, "{s:?}");
        assert!((regression_error(&s) - p.rho).abs() < 1e-2 * p.rho);
    }

    #[test]
    fn square_channel_agrees_with_the_ridge_formula() {
        let spec = ArchitectureSpec::uniform(80, 2, 1.5, ActivationKind::tanh());
        let cov = matched_cov(&spec, 3);
        let p = SaddleProblem::averaged(&cov);
        let coeffs = compute_coefficients(&spec).unwrap();
        let population = SpectralMeasure::from_symmetric(&cov.omega);
        for (alpha, lambda, delta) in [(0.5, 0.1, 0.0), (2.0, 0.05, 0.3), (3.0, 1.0, 0.1)] {
            let s = solve_saddle(&p, alpha, lambda, &LossChannel::Square { delta }, &Default::default())
                .unwrap();
            let setting = RidgeSetting {
                lambda,
                delta,
                alpha,
                coeffs: coeffs.clone(),
                gammas: spec.gammas.clone(),
                omega0: SpectralMeasure::dirac(1.0),
                trace_omega0: 1.0,
            };
            let r = asymptotic_ridge_error_with(&setting, &population).unwrap();
            // The ridge formula includes the noise on the test label.
            let eps = regression_error(&s) + delta;
            assert!((eps - r.eps).abs() < 1e-6, "α={alpha}: saddle {eps} vs ridge {}", r.eps);
        }
    }

    #[test]
    fn logistic_fixed_point_is_consistent() {
        let spec = ArchitectureSpec::uniform(50, 1, 1.0, ActivationKind::tanh());
        let p = SaddleProblem::new(&matched_cov(&spec, 2));
        let s = solve_saddle(&p, 2.0, 0.1, &LossChannel::Logistic, &Default::default()).unwrap();
        assert!(s.residual < SADDLE_TOL);
        assert!(s.v > 0.0 && s.q > 0.0 && s.m > 0.0);
        assert!(s.m * s.m <= s.q * s.rho + 1e-10);
        let e = classification_error(&s);
        assert!(e > 0.0 && e < 0.5);
        // More data helps.
        let s4 = solve_saddle(&p, 6.0, 0.1, &LossChannel::Logistic, &Default::default()).unwrap();
        assert!(classification_error(&s4) < e);
    }

    #[test]
    fn warm_sweep_matches_cold_solves() {
        let spec = ArchitectureSpec::uniform(40, 1, 2.0, ActivationKind::Erf);
        let p = SaddleProblem::averaged(&matched_cov(&spec, 2));
        let ch = LossChannel::Square { delta: 0.1 };
        let alphas = [0.5, 1.0, 2.0];
        let warm = sweep_saddle(&p, &alphas, 0.1, &ch, &Default::default(), true).unwrap();
        let cold = sweep_saddle(&p, &alphas, 0.1, &ch, &Default::default(), false).unwrap();
        for (a, b) in warm.iter().zip(&cold) {
            assert!((regression_error(a) - regression_error(b)).abs() < 1e-7);
        }
    }

    #[test]
    fn csv_has_one_row_per_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let states = vec![SaddleState::default(); 2];
        write_saddle_csv(&path, &LossChannel::Logistic, &[1.0, 2.0], &states).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("alpha,V,q,m,Vhat,qhat,mhat,eps,iterations,residual"));
    }
}
