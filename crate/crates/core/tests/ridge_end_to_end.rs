//! Simulated ridge regression on a matched target against the asymptotic
//! error and the finite-size trace formula.

use std::sync::Arc;

use drf_core::arch::InputCovariance;
use drf_core::ridge::{asymptotic_ridge_error, finite_rmt_oracle, RidgeSetting};
use drf_core::rmt::SpectralMeasure;
use drf_core::sim::{
    empirical_error, fit_ridge, generate, sample_theta_star, test_set_size, Estimate, Metric, Problem, Readout,
    Split, TargetFeatures, TargetModel,
};
use drf_core::{compute_coefficients, sample_network, ActivationKind, ArchitectureSpec};

#[test]
fn simulation_matches_theory() {
    let d = 200;
    let (alpha, lambda, delta) = (1.5, 0.05, 0.1);
    let spec = ArchitectureSpec::uniform(d, 2, 1.0, ActivationKind::TanhScaled(2.0));
    let coeffs = compute_coefficients(&spec).unwrap();
    let setting = RidgeSetting {
        lambda,
        delta,
        alpha,
        coeffs: coeffs.clone(),
        gammas: spec.gammas.clone(),
        omega0: SpectralMeasure::dirac(1.0),
        trace_omega0: 1.0,
    };
    let theory = asymptotic_ridge_error(&setting).unwrap().eps;
    let n = (alpha * d as f64) as usize;
    let mut sims = Vec::new();
    let mut oracles = Vec::new();
    for seed in 0..12u64 {
        let net = sample_network(&spec, seed).unwrap();
        let theta = sample_theta_star(net.output_dim(), seed);
        oracles.push(finite_rmt_oracle(&net, &coeffs, &setting, seed).unwrap().eps);
        let target = TargetModel::new(TargetFeatures::Learner, theta, Readout::Linear);
        let mut problem = Problem::new(Arc::new(net), target, &InputCovariance::Identity, delta).unwrap();
        problem.noisy_test_labels = true;
        let train = generate(&problem, n, seed, Split::Train).unwrap();
        let fit = fit_ridge(&train, lambda).unwrap();
        let err = empirical_error(&fit, &problem, test_set_size(n, d), seed, Metric::Mse).unwrap();
        sims.push(err.mean);
    }
    let sim = Estimate::from_samples(&sims);
    let oracle = Estimate::from_samples(&oracles);
    let tol = 4.0 * sim.stderr + 0.02;
    assert!((sim.mean - theory).abs() < tol, "sim {} ± {} vs theory {theory}", sim.mean, sim.stderr);
    assert!((oracle.mean - theory).abs() < 0.02, "oracle {} vs theory {theory}", oracle.mean);
}
