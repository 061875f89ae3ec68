//! Theory curves and Monte Carlo runs for one configuration.

use std::sync::Arc;

use drf_core::arch::sample_network_in_streams;
use nalgebra::DVector;
use drf_core::lincov::CovarianceSet;
use drf_core::rmt::{PopulationChain, SpectralMeasure};
use drf_core::ridge::ridge_error_from_population;
use drf_core::rng::{derive_seed, stream};
use drf_core::saddle::{solve_saddle, SaddleOptions, SaddleProblem, SaddleState};
use drf_core::sim::{
    empirical_error, fit_logistic, fit_ridge, generate, sample_theta_star, test_set_size,
    FeatureMap, GaussianEquivalentNetwork, Problem, Split, TargetFeatures, TargetModel,
};
use drf_core::{compute_coefficients, sample_network, GECoefficients, SampledNetwork};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ChannelKind, ExperimentConfig, FeatureKind, NetworkConfig, TargetConfig, TheoryMethod};
use crate::error::{Context, Result};

/// Offset separating data seeds from network seeds.
const DATA_SEED_TAG: u64 = 0xDA7A;

/// Seed of run `index`.
pub fn run_seed(config: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(config.seed, index as u64)
}

/// Seed for the data drawn at grid point `alpha_index` of a run.
pub fn data_seed(run_seed: u64, alpha_index: usize) -> u64 {
    derive_seed(derive_seed(run_seed, DATA_SEED_TAG), alpha_index as u64)
}

/// The sampled learner, target and teacher vector of one run.
pub struct RunNetworks {
    pub seed: u64,
    pub learner: SampledNetwork,
    pub coeffs: GECoefficients,
    /// `None` when the target reads the learner's features.
    pub target: Option<(SampledNetwork, GECoefficients)>,
    pub theta_star: DVector<f64>,
}

impl RunNetworks {
    pub fn sample(config: &ExperimentConfig, learner: &NetworkConfig, seed: u64) -> Result<Self> {
        let label = learner.label();
        let spec = learner.spec(config.d)?;
        let coeffs = compute_coefficients(&spec).context(|| format!("coefficients of {label}"))?;
        let net = sample_network(&spec, seed).context(|| format!("sampling {label}"))?;
        let target = match &config.target {
            TargetConfig::Learner => None,
            TargetConfig::Network(t) => {
                let tspec = t.spec(config.d)?;
                let tc = compute_coefficients(&tspec).context(|| "target coefficients".into())?;
                let tn = sample_network_in_streams(&tspec, seed, stream::TARGET_LAYER_BASE)
                    .context(|| "sampling the target".into())?;
                Some((tn, tc))
            }
        };
        let k_star = target
            .as_ref()
            .map_or(net.output_dim(), |(t, _)| t.output_dim());
        Ok(RunNetworks {
            seed,
            learner: net,
            coeffs,
            target,
            theta_star: sample_theta_star(k_star, seed),
        })
    }

    /// Linearized covariance blocks of the learner/target pair.
    pub fn covariances(&self) -> Result<CovarianceSet> {
        let theta = self.theta_star.clone();
        match &self.target {
            None => CovarianceSet::matched(&self.learner, &self.coeffs, theta),
            Some((t, tc)) => CovarianceSet::linearized(&self.learner, &self.coeffs, t, tc, theta),
        }
        .context(|| "linearized covariances".into())
    }

    /// The data-generating problem, on true or Gaussian-equivalent features.
    pub fn problem(&self, config: &ExperimentConfig) -> Result<Problem> {
        let wrap = |net: &SampledNetwork, coeffs: &GECoefficients| -> Result<Arc<dyn FeatureMap>> {
            Ok(match config.features {
                FeatureKind::True => Arc::new(net.clone()),
                FeatureKind::GaussianEquivalent => Arc::new(
                    GaussianEquivalentNetwork::new(net.clone(), coeffs.clone())
                        .context(|| "Gaussian-equivalent features".into())?,
                ),
            })
        };
        let learner = wrap(&self.learner, &self.coeffs)?;
        let features = match &self.target {
            None => TargetFeatures::Learner,
            Some((t, tc)) => TargetFeatures::Separate(wrap(t, tc)?),
        };
        let target = TargetModel::new(features, self.theta_star.clone(), config.readout);
        let noise = match config.channel {
            ChannelKind::Square => config.delta,
            ChannelKind::Logistic => 0.0,
        };
        Problem::new(learner, target, &self.learner.spec.omega0, noise)
            .context(|| "building the learning problem".into())
    }
}

/// Theory value at one grid point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub alpha: f64,
    pub eps: f64,
    /// Saddle residual, or the derivative cross-check for the closed form.
    pub residual: f64,
    pub iterations: usize,
}

/// Closed-form ridge error for a matched target. Test labels are noiseless,
/// so the label-noise floor is removed.
pub fn asymptotic_curve(config: &ExperimentConfig, learner: &NetworkConfig, alphas: &[f64]) -> Result<Vec<TheoryPoint>> {
    let label = learner.label();
    let spec = learner.spec(config.d)?;
    let coeffs = compute_coefficients(&spec).context(|| format!("coefficients of {label}"))?;
    let population = PopulationChain::new(&coeffs, &spec.gammas, SpectralMeasure::dirac(1.0))
        .context(|| format!("population chain of {label}"))?
        .into_measure();
    let gamma = learner.gamma_top();
    alphas
        .iter()
        .map(|&alpha| {
            let (eps, _, _, disagreement) =
                ridge_error_from_population(&population, gamma / alpha, config.lambda, config.delta)
                    .context(|| format!("ridge asymptotics of {label} at alpha = {alpha}"))?;
            Ok(TheoryPoint {
                alpha,
                eps: eps - config.delta,
                residual: disagreement,
                iterations: 0,
            })
        })
        .collect()
}

/// Solves the saddle-point equations along `alphas`, warm-starting each
/// point from the previous one and retrying cold if that fails.
pub fn saddle_curve(
    config: &ExperimentConfig,
    problem: &SaddleProblem,
    alphas: &[f64],
) -> Result<Vec<(SaddleState, f64)>> {
    let channel = config.loss_channel();
    let cold = SaddleOptions::default();
    let mut warm = cold;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let state = solve_saddle(problem, alpha, config.lambda, &channel, &warm)
            .or_else(|_| solve_saddle(problem, alpha, config.lambda, &channel, &cold))
            .context(|| format!("saddle point at alpha = {alpha}"))?;
        warm.init = (state.v, state.q, state.m);
        out.push((state, channel.test_error(&state)));
    }
    Ok(out)
}

/// Saddle-point theory on the covariances of one run. With `averaged` the
/// teacher vector is integrated out.
pub fn covariance_curve(
    config: &ExperimentConfig,
    nets: &RunNetworks,
    alphas: &[f64],
    averaged: bool,
) -> Result<Vec<TheoryPoint>> {
    let cov = nets.covariances()?;
    let problem = if averaged {
        SaddleProblem::averaged(&cov)
    } else {
        SaddleProblem::new(&cov)
    };
    Ok(saddle_curve(config, &problem, alphas)?
        .into_iter()
        .zip(alphas)
        .map(|((s, eps), &alpha)| TheoryPoint {
            alpha,
            eps,
            residual: s.residual,
            iterations: s.iterations,
        })
        .collect())
}

/// Theory averaged over `theory_networks` sampled networks (or the closed form).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryCurve {
    pub learner: String,
    pub method: TheoryMethod,
    pub alphas: Vec<f64>,
    pub eps: Vec<f64>,
    pub stderr: Vec<f64>,
    pub max_residual: Vec<f64>,
    pub networks: usize,
}

impl TheoryCurve {
    fn from_runs(learner: String, method: TheoryMethod, alphas: &[f64], runs: &[Vec<TheoryPoint>]) -> Self {
        let mut eps = Vec::new();
        let mut stderr = Vec::new();
        let mut max_residual = Vec::new();
        for i in 0..alphas.len() {
            let vals: Vec<f64> = runs.iter().map(|r| r[i].eps).collect();
            let e = drf_core::sim::Estimate::from_samples(&vals);
            eps.push(e.mean);
            stderr.push(e.stderr);
            max_residual.push(runs.iter().map(|r| r[i].residual).fold(0.0, f64::max));
        }
        TheoryCurve {
            learner,
            method,
            alphas: alphas.to_vec(),
            eps,
            stderr,
            max_residual,
            networks: runs.len(),
        }
    }
}

/// Theory for one learner on an arbitrary grid.
pub fn theory_for(config: &ExperimentConfig, learner: &NetworkConfig, alphas: &[f64]) -> Result<TheoryCurve> {
    let method = config.resolved_theory();
    let runs = match method {
        TheoryMethod::Asymptotic => vec![asymptotic_curve(config, learner, alphas)?],
        _ => (0..config.theory_networks)
            .into_par_iter()
            .map(|i| {
                let nets = RunNetworks::sample(config, learner, run_seed(config, i))?;
                covariance_curve(config, &nets, alphas, true)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(TheoryCurve::from_runs(learner.label(), method, alphas, &runs))
}

/// Theory curves for every learner on the configured grid.
pub fn theory(config: &ExperimentConfig) -> Result<Vec<TheoryCurve>> {
    config
        .learners
        .iter()
        .map(|l| theory_for(config, l, &config.alpha_grid))
        .collect()
}

/// One trained readout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub learner: String,
    pub seed_index: usize,
    pub seed: u64,
    pub alpha: f64,
    pub n: usize,
    pub n_test: usize,
    pub train_error: f64,
    pub test_error: f64,
    /// Standard error over test points.
    pub test_stderr: f64,
    pub iterations: usize,
    pub final_residual: f64,
    /// Theory for this run's networks, when requested.
    pub theory: Option<f64>,
}

fn simulate_point(
    config: &ExperimentConfig,
    problem: &Problem,
    seed: u64,
    alpha_index: usize,
) -> Result<(usize, usize, drf_core::sim::FitResult, drf_core::sim::Estimate)> {
    let alpha = config.alpha_grid[alpha_index];
    let d = problem.d();
    let n = (alpha * d as f64).round() as usize;
    let ds = data_seed(seed, alpha_index);
    let data = generate(problem, n, ds, Split::Train).context(|| format!("training data at alpha = {alpha}"))?;
    let fit = match config.channel {
        ChannelKind::Square => fit_ridge(&data, config.lambda),
        ChannelKind::Logistic => fit_logistic(&data, config.lambda),
    }
    .context(|| format!("fitting at alpha = {alpha}, n = {n}"))?;
    let n_test = test_set_size(n, d);
    let err = empirical_error(&fit, problem, n_test, ds, config.metric())
        .context(|| format!("test error at alpha = {alpha}"))?;
    Ok((n, n_test, fit, err))
}

/// Trains on every (run, learner, α) and, with `paired_theory`, evaluates
/// the theory on the same networks and teacher.
pub fn simulate(config: &ExperimentConfig, paired_theory: bool) -> Result<Vec<RunRecord>> {
    let method = config.resolved_theory();
    let closed_form: Vec<Option<Vec<TheoryPoint>>> = config
        .learners
        .iter()
        .map(|l| {
            (paired_theory && method == TheoryMethod::Asymptotic)
                .then(|| asymptotic_curve(config, l, &config.alpha_grid))
                .transpose()
        })
        .collect::<Result<_>>()?;

    let per_run = (0..config.n_seeds)
        .into_par_iter()
        .map(|i| {
            let seed = run_seed(config, i);
            let mut records = Vec::new();
            for (li, learner) in config.learners.iter().enumerate() {
                let label = learner.label();
                let nets = RunNetworks::sample(config, learner, seed)?;
                let theory: Option<Vec<f64>> = match (&closed_form[li], paired_theory) {
                    (Some(curve), _) => Some(curve.iter().map(|p| p.eps).collect()),
                    (None, true) => Some(
                        covariance_curve(config, &nets, &config.alpha_grid, false)?
                            .iter()
                            .map(|p| p.eps)
                            .collect(),
                    ),
                    (None, false) => None,
                };
                let problem = nets.problem(config)?;
                drop(nets);
                let points = (0..config.alpha_grid.len())
                    .into_par_iter()
                    .map(|ai| simulate_point(config, &problem, seed, ai))
                    .collect::<Result<Vec<_>>>()?;
                for (ai, (n, n_test, fit, err)) in points.into_iter().enumerate() {
                    records.push(RunRecord {
                        learner: label.clone(),
                        seed_index: i,
                        seed,
                        alpha: config.alpha_grid[ai],
                        n,
                        n_test,
                        train_error: fit.train_error,
                        test_error: err.mean,
                        test_stderr: err.stderr,
                        iterations: fit.iterations,
                        final_residual: fit.final_residual,
                        theory: theory.as_ref().map(|t| t[ai]),
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_run.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SpectrumConfig, Thresholds};
    use drf_core::sim::Readout;
    use drf_core::ActivationKind;

    fn small(target: TargetConfig) -> ExperimentConfig {
        ExperimentConfig {
            name: "small".into(),
            learners: vec![NetworkConfig::uniform(1, 1.5, ActivationKind::tanh())],
            target,
            readout: Readout::Linear,
            channel: ChannelKind::Square,
            lambda: 0.1,
            delta: 0.0,
            alpha_grid: vec![0.5, 2.0],
            d: 40,
            n_seeds: 2,
            seed: 3,
            features: FeatureKind::True,
            theory: TheoryMethod::Auto,
            theory_networks: 1,
            spectrum: SpectrumConfig::default(),
            thresholds: Thresholds::default(),
            out: None,
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let c = small(TargetConfig::Network(NetworkConfig::uniform(1, 1.0, ActivationKind::Sign)));
        let a = simulate(&c, true).unwrap();
        let b = simulate(&c, true).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.test_error.to_bits(), y.test_error.to_bits());
            assert_eq!(x.theory.unwrap().to_bits(), y.theory.unwrap().to_bits());
        }
        assert_ne!(a[0].seed, a[2].seed);
    }

    #[test]
    fn learner_target_uses_the_closed_form() {
        let c = small(TargetConfig::Learner);
        let t = theory(&c).unwrap();
        assert_eq!(t[0].method, TheoryMethod::Asymptotic);
        assert!(t[0].eps.iter().all(|e| e.is_finite() && *e > 0.0));
        // More data, smaller error.
        assert!(t[0].eps[1] < t[0].eps[0]);
    }

    #[test]
    fn closed_form_and_saddle_agree_for_matched_targets() {
        let mut c = small(TargetConfig::Learner);
        c.d = 200;
        let closed = theory(&c).unwrap();
        c.theory = TheoryMethod::Covariance;
        let cov = theory(&c).unwrap();
        for (a, b) in closed[0].eps.iter().zip(&cov[0].eps) {
            assert!((a - b).abs() < 0.05 * a, "{a} vs {b}");
        }
    }
}
