//! Linearized covariances against Monte Carlo estimates on sampled networks.

use drf_core::arch::sample_network_in_streams;
use drf_core::lincov::{omega_lin, phi_lin, psi_lin, trace_omega};
use drf_core::rng::stream::TARGET_LAYER_BASE;
use drf_core::sim::sample_inputs;
use drf_core::{compute_coefficients, sample_network, ActivationKind, ArchitectureSpec, SampledNetwork};
use nalgebra::DMatrix;

const SAMPLES: usize = 100_000;
const CHUNK: usize = 10_000;

/// `E[a(x) b(x)ᵀ]` over `SAMPLES` standard Gaussian inputs.
fn mc_cross(a: &SampledNetwork, b: &SampledNetwork, seed: u64) -> DMatrix<f64> {
    let d = a.spec.d;
    let mut acc = DMatrix::zeros(a.output_dim(), b.output_dim());
    for c in 0..SAMPLES / CHUNK {
        let x = sample_inputs(&a.spec.omega0, d, CHUNK, seed, c as u64).unwrap();
        acc += a.forward(&x).unwrap() * b.forward(&x).unwrap().transpose();
    }
    acc / SAMPLES as f64
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Least-squares scale `s` with `a ≈ s b`; off by `√γ` under a wrong fan-in.
fn scale(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b) / b.dot(b)
}

fn networks(d: usize) -> (SampledNetwork, SampledNetwork) {
    let learner = ArchitectureSpec::new(d, vec![2.0, 0.5], vec![ActivationKind::tanh(); 2]);
    let target = ArchitectureSpec::uniform(d, 1, 1.5, ActivationKind::Erf);
    (
        sample_network(&learner, 7).unwrap(),
        sample_network_in_streams(&target, 7, TARGET_LAYER_BASE).unwrap(),
    )
}

#[test]
fn cross_covariance_matches_monte_carlo() {
    let (learner, target) = networks(80);
    let lc = compute_coefficients(&learner.spec).unwrap();
    let tc = compute_coefficients(&target.spec).unwrap();
    let phi = phi_lin(&target, &tc, &learner, &lc).unwrap();
    let mc = mc_cross(&target, &learner, 11);
    assert!((scale(&mc, &phi) - 1.0).abs() < 0.03, "scale {}", scale(&mc, &phi));
    assert!(rel_err(&mc, &phi) < 0.15, "relative error {}", rel_err(&mc, &phi));
}

#[test]
fn feature_covariances_match_monte_carlo() {
    let (learner, target) = networks(80);
    let lc = compute_coefficients(&learner.spec).unwrap();
    let tc = compute_coefficients(&target.spec).unwrap();
    let omega = omega_lin(&learner, &lc).unwrap().pop().unwrap();
    let mc = mc_cross(&learner, &learner, 12);
    assert!((scale(&mc, &omega) - 1.0).abs() < 0.03);
    assert!(rel_err(&mc, &omega) < 0.1, "relative error {}", rel_err(&mc, &omega));
    let psi = psi_lin(&target, &tc).unwrap();
    let mc = mc_cross(&target, &target, 13);
    assert!(rel_err(&mc, &psi) < 0.1, "relative error {}", rel_err(&mc, &psi));
}

#[test]
fn normalized_trace_concentrates() {
    let d = 600;
    let spec = ArchitectureSpec::new(d, vec![1.5, 1.0, 0.5], vec![ActivationKind::TanhScaled(2.0); 3]);
    let coeffs = compute_coefficients(&spec).unwrap();
    let limit = trace_omega(&coeffs, 1.0);
    for seed in 0..3 {
        let net = sample_network(&spec, seed).unwrap();
        let omega = omega_lin(&net, &coeffs).unwrap().pop().unwrap();
        let t = omega.trace() / omega.nrows() as f64;
        assert!((t - limit).abs() < 0.02, "seed {seed}: {t} vs {limit}");
    }
}
