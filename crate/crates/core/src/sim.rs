//! Finite-size simulation: data through sampled networks, readout training
//! by empirical risk minimization, and empirical test errors and spectra.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{GECoefficients, InputCovariance, SampledNetwork};
use crate::error::{DrfError, Result};
use crate::rmt::SpectralMeasure;
use crate::rng::{derive_seed, gaussian_matrix, gaussian_vector, stream, stream_rng};

/// Test points are generated and scored in blocks of this many columns.
pub const TEST_CHUNK: usize = 2000;
pub const MAX_TEST_SIZE: usize = 100_000;
pub const RIDGE_RESIDUAL_TOL: f64 = 1e-10;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 500;
const ARMIJO_C: f64 = 1e-4;
/// Relative size of the Newton decrement below which line search is skipped.
const ROUNDOFF_DECREASE: f64 = 1e-12;

/// `10·max(n, d)`, capped.
pub fn test_set_size(n: usize, d: usize) -> usize {
    (10 * n.max(d)).min(MAX_TEST_SIZE)
}

/// Draws columns `x ~ N(0, Ω₀)`.
#[derive(Clone, Debug)]
pub struct InputSampler {
    d: usize,
    /// `Ω₀^{1/2}`; `None` for the identity.
    root: Option<DMatrix<f64>>,
}

impl InputSampler {
    pub fn new(omega0: &InputCovariance, d: usize) -> Result<Self> {
        let root = match omega0 {
            InputCovariance::Identity => None,
            InputCovariance::Matrix { matrix, .. } => {
                if matrix.shape() != (d, d) {
                    return Err(DrfError::Dimension(format!(
                        "input covariance is {:?}, expected {d} × {d}",
                        matrix.shape()
                    )));
                }
                let eig = SymmetricEigen::new((**matrix).clone());
                let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let u = &eig.eigenvectors;
                Some(u * DMatrix::from_diagonal(&sqrt) * u.transpose())
            }
        };
        Ok(InputSampler { d, root })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let z = gaussian_matrix(rng, self.d, n, 1.0);
        match &self.root {
            None => z,
            Some(r) => r * z,
        }
    }
}

/// `d × n` inputs from the stream `(seed, stream)`.
pub fn sample_inputs(
    omega0: &InputCovariance,
    d: usize,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<DMatrix<f64>> {
    Ok(InputSampler::new(omega0, d)?.sample(n, &mut stream_rng(seed, stream)))
}

/// A map from inputs (`d × n`) to features (`k × n`). Stochastic maps draw
/// their noise from `noise`; deterministic maps ignore it.
pub trait FeatureMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn features(&self, x: &DMatrix<f64>, noise: &mut ChaCha8Rng) -> Result<DMatrix<f64>>;
}

impl FeatureMap for SampledNetwork {
    fn input_dim(&self) -> usize {
        self.spec.d
    }

    fn output_dim(&self) -> usize {
        SampledNetwork::output_dim(self)
    }

    fn features(&self, x: &DMatrix<f64>, _noise: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        self.forward(x)
    }
}

/// The Gaussian surrogate of a sampled network: every layer is replaced by
/// `h ↦ κ₁ W h/√k + κ★ ξ` with fresh standard Gaussian `ξ`, so the features
/// share the linearized covariances of the original network.
#[derive(Clone, Debug)]
pub struct GaussianEquivalentNetwork {
    pub network: SampledNetwork,
    pub coeffs: GECoefficients,
}

impl GaussianEquivalentNetwork {
    pub fn new(network: SampledNetwork, coeffs: GECoefficients) -> Result<Self> {
        if coeffs.depth() != network.depth() {
            return Err(DrfError::Config(format!(
                "coefficients for depth {} given for a depth-{} network",
                coeffs.depth(),
                network.depth()
            )));
        }
        Ok(GaussianEquivalentNetwork { network, coeffs })
    }
}

impl FeatureMap for GaussianEquivalentNetwork {
    fn input_dim(&self) -> usize {
        self.network.spec.d
    }

    fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    fn features(&self, x: &DMatrix<f64>, noise: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(DrfError::Dimension(format!(
                "input has {} rows, network expects d = {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let widths = self.network.widths();
        let mut h = x.clone();
        for (l, w) in self.network.weights.iter().enumerate() {
            let scale = self.coeffs.kappa1[l] / (widths[l] as f64).sqrt();
            h = w * h * scale;
            let ks = self.coeffs.kappa_star[l];
            if ks != 0.0 {
                h += gaussian_matrix(noise, h.nrows(), h.ncols(), ks);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `y = θ★ᵀφ★/√k★ (+ noise)`.
    Linear,
    /// `y = sign(θ★ᵀφ★/√k★)`.
    Sign,
}

/// Where the target reads its features from.
#[derive(Clone)]
pub enum TargetFeatures {
    /// The learner's own features (matched model).
    Learner,
    Separate(Arc<dyn FeatureMap>),
}

#[derive(Clone)]
pub struct TargetModel {
    pub features: TargetFeatures,
    pub theta_star: DVector<f64>,
    pub readout: Readout,
}

impl TargetModel {
    pub fn new(features: TargetFeatures, theta_star: DVector<f64>, readout: Readout) -> Self {
        TargetModel {
            features,
            theta_star,
            readout,
        }
    }
}

/// Standard Gaussian `θ★` of length `k★` from the run seed.
pub fn sample_theta_star(k_star: usize, seed: u64) -> DVector<f64> {
    gaussian_vector(&mut stream_rng(seed, stream::THETA_STAR), k_star)
}

/// Learner, target and label noise: everything needed to draw data.
#[derive(Clone)]
pub struct Problem {
    pub learner: Arc<dyn FeatureMap>,
    pub target: TargetModel,
    pub inputs: InputSampler,
    /// Label-noise variance `Δ` on training labels (linear readout only).
    pub label_noise: f64,
    /// Whether test labels carry the same noise.
    pub noisy_test_labels: bool,
}

impl Problem {
    pub fn new(
        learner: Arc<dyn FeatureMap>,
        target: TargetModel,
        omega0: &InputCovariance,
        label_noise: f64,
    ) -> Result<Self> {
        let d = learner.input_dim();
        let k_star = match &target.features {
            TargetFeatures::Learner => learner.output_dim(),
            TargetFeatures::Separate(f) => {
                if f.input_dim() != d {
                    return Err(DrfError::Dimension(format!(
                        "learner takes d = {d}, target takes d = {}",
                        f.input_dim()
                    )));
                }
                f.output_dim()
            }
        };
        if target.theta_star.len() != k_star {
            return Err(DrfError::Dimension(format!(
                "theta_star has length {}, target features have dimension {k_star}",
                target.theta_star.len()
            )));
        }
        if !(label_noise >= 0.0) {
            return Err(DrfError::Config(format!("label noise must be nonnegative, got {label_noise}")));
        }
        Ok(Problem {
            learner,
            target,
            inputs: InputSampler::new(omega0, d)?,
            label_noise,
            noisy_test_labels: false,
        })
    }

    pub fn d(&self) -> usize {
        self.inputs.dim()
    }

    pub fn k(&self) -> usize {
        self.learner.output_dim()
    }
}

/// Which set of streams a batch of data is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Test block `i`, drawn under its own derived seed.
    Test(usize),
}

struct Streams {
    seed: u64,
    inputs: u64,
    label_noise: u64,
    learner_noise: u64,
    target_noise: u64,
}

impl Split {
    fn streams(self, seed: u64) -> Streams {
        match self {
            Split::Train => Streams {
                seed,
                inputs: stream::TRAIN_INPUTS,
                label_noise: stream::TRAIN_NOISE,
                learner_noise: stream::LEARNER_GAUSS_NOISE,
                target_noise: stream::TARGET_GAUSS_NOISE,
            },
            Split::Test(i) => Streams {
                seed: derive_seed(seed, i as u64 + 1),
                inputs: stream::TEST_INPUTS,
                label_noise: stream::TEST_NOISE,
                learner_noise: stream::TEST_LEARNER_GAUSS_NOISE,
                target_noise: stream::TEST_TARGET_GAUSS_NOISE,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `d × n`.
    pub inputs: DMatrix<f64>,
    /// Learner features, `k × n`.
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `n` labelled points. Everything is a function of `(seed, split)`.
pub fn generate(problem: &Problem, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let s = split.streams(seed);
    let inputs = problem.inputs.sample(n, &mut stream_rng(s.seed, s.inputs));
    let features = problem
        .learner
        .features(&inputs, &mut stream_rng(s.seed, s.learner_noise))?;
    let target = &problem.target;
    let target_features = match &target.features {
        TargetFeatures::Learner => None,
        TargetFeatures::Separate(f) => Some(f.features(&inputs, &mut stream_rng(s.seed, s.target_noise))?),
    };
    let tf = target_features.as_ref().unwrap_or(&features);
    let k_star = tf.nrows() as f64;
    let pre = tf.tr_mul(&target.theta_star) / k_star.sqrt();
    let labels = match target.readout {
        Readout::Sign => pre.map(sign),
        Readout::Linear => {
            let noisy = problem.label_noise > 0.0
                && (split == Split::Train || problem.noisy_test_labels);
            if noisy {
                let z = gaussian_vector(&mut stream_rng(s.seed, s.label_noise), n);
                pre + z * problem.label_noise.sqrt()
            } else {
                pre
            }
        }
    };
    Ok(Dataset {
        inputs,
        features,
        labels,
    })
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta_hat: DVector<f64>,
    pub train_error: f64,
    pub iterations: usize,
    /// Ridge: relative normal-equation residual. Logistic: gradient ∞-norm.
    pub final_residual: f64,
}

impl FitResult {
    /// `θ̂ᵀφ/√k` for every column of `features`.
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        features.tr_mul(&self.theta_hat) / (features.nrows() as f64).sqrt()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(DrfError::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `θ̂ = (1/√k)(λ + XXᵀ/k)^{-1} X y` by Cholesky, with one step of
/// iterative refinement if the residual is not yet at tolerance.
pub fn fit_ridge(data: &Dataset, lambda: f64) -> Result<FitResult> {
    check_lambda(lambda)?;
    let x = &data.features;
    let k = x.nrows();
    let kf = k as f64;
    let mut a = x * x.transpose() / kf;
    for i in 0..k {
        a[(i, i)] += lambda;
    }
    let b = x * &data.labels / kf.sqrt();
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| DrfError::Numerical("ridge system is not positive definite".into()))?;
    let mut theta = chol.solve(&b);
    let b_norm = b.norm().max(f64::MIN_POSITIVE);
    let mut residual = (&a * &theta - &b).norm() / b_norm;
    let mut iterations = 1;
    if residual >= RIDGE_RESIDUAL_TOL {
        let r = &b - &a * &theta;
        theta += chol.solve(&r);
        residual = (&a * &theta - &b).norm() / b_norm;
        iterations += 1;
    }
    if residual >= RIDGE_RESIDUAL_TOL && b.norm() > 0.0 {
        return Err(DrfError::NonConvergence {
            solver: "fit_ridge",
            iterations,
            residual,
        });
    }
    let fit = FitResult {
        theta_hat: theta,
        train_error: 0.0,
        iterations,
        final_residual: residual,
    };
    let train_error = if data.is_empty() {
        0.0
    } else {
        (fit.predict(x) - &data.labels).norm_squared() / data.len() as f64
    };
    Ok(FitResult { train_error, ..fit })
}

/// `ln(1 + e^{−t})` without overflow.
fn softplus_neg(t: f64) -> f64 {
    (-t).max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1/(1 + e^{t})`.
fn sigmoid_neg(t: f64) -> f64 {
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// `Σ ln(1 + e^{−y θᵀφ/√k}) + (λ/2)‖θ‖²`.
pub fn logistic_objective(data: &Dataset, lambda: f64, theta: &DVector<f64>) -> f64 {
    let k = data.features.nrows() as f64;
    let z = data.features.tr_mul(theta) / k.sqrt();
    let loss: f64 = z.iter().zip(data.labels.iter()).map(|(z, y)| softplus_neg(y * z)).sum();
    loss + 0.5 * lambda * theta.norm_squared()
}

pub fn logistic_gradient(data: &Dataset, lambda: f64, theta: &DVector<f64>) -> DVector<f64> {
    let x = &data.features;
    let sk = (x.nrows() as f64).sqrt();
    let z = x.tr_mul(theta) / sk;
    let r = DVector::from_iterator(
        z.len(),
        z.iter().zip(data.labels.iter()).map(|(z, y)| -y * sigmoid_neg(y * z)),
    );
    x * r / sk + theta * lambda
}

/// Newton's method with Armijo backtracking on the regularized logistic loss.
pub fn fit_logistic(data: &Dataset, lambda: f64) -> Result<FitResult> {
    check_lambda(lambda)?;
    let x = &data.features;
    let k = x.nrows();
    let sk = (k as f64).sqrt();
    let mut theta = DVector::zeros(k);
    let mut f = logistic_objective(data, lambda, &theta);
    let mut grad = logistic_gradient(data, lambda, &theta);
    let mut iterations = 0;
    while grad.amax() >= LOGISTIC_GRAD_TOL {
        if iterations == LOGISTIC_MAX_ITER {
            return Err(DrfError::NonConvergence {
                solver: "fit_logistic",
                iterations,
                residual: grad.amax(),
            });
        }
        iterations += 1;
        let z = x.tr_mul(&theta) / sk;
        // Hessian: X diag(p(1−p)) Xᵀ/k + λI.
        let weights: Vec<f64> = z
            .iter()
            .zip(data.labels.iter())
            .map(|(z, y)| {
                let p = sigmoid_neg(y * z);
                p * (1.0 - p)
            })
            .collect();
        let mut xw = x.clone();
        for (j, w) in weights.iter().enumerate() {
            xw.column_mut(j).scale_mut(w.sqrt() / sk);
        }
        let mut h = &xw * xw.transpose();
        for i in 0..k {
            h[(i, i)] += lambda;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| DrfError::Numerical("logistic Hessian is not positive definite".into()))?;
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        // Once the predicted decrease is below the rounding level of the
        // objective, Armijo can no longer tell steps apart; inside that
        // quadratic region the full Newton step is safe.
        if -slope <= ROUNDOFF_DECREASE * f.abs().max(1.0) {
            theta += step;
            f = logistic_objective(data, lambda, &theta);
            grad = logistic_gradient(data, lambda, &theta);
            continue;
        }
        let mut t = 1.0;
        loop {
            let candidate = &theta + &step * t;
            let fc = logistic_objective(data, lambda, &candidate);
            if fc <= f + ARMIJO_C * t * slope {
                theta = candidate;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-16 {
                // No representable decrease left: the iterate is optimal to
                // machine precision.
                let residual = grad.amax();
                return if residual < 1e-6 {
                    Ok(logistic_result(data, theta, iterations, residual))
                } else {
                    Err(DrfError::NonConvergence {
                        solver: "fit_logistic line search",
                        iterations,
                        residual,
                    })
                };
            }
        }
        grad = logistic_gradient(data, lambda, &theta);
    }
    let residual = grad.amax();
    Ok(logistic_result(data, theta, iterations, residual))
}

fn logistic_result(data: &Dataset, theta: DVector<f64>, iterations: usize, residual: f64) -> FitResult {
    let fit = FitResult {
        theta_hat: theta,
        train_error: 0.0,
        iterations,
        final_residual: residual,
    };
    let train_error = if data.is_empty() {
        0.0
    } else {
        misclassified(&fit.predict(&data.features), &data.labels) / data.len() as f64
    };
    FitResult { train_error, ..fit }
}

fn misclassified(pred: &DVector<f64>, labels: &DVector<f64>) -> f64 {
    pred.iter()
        .zip(labels.iter())
        .filter(|(p, y)| *p * *y <= 0.0)
        .count() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `(y − ŷ)²`.
    Mse,
    /// `1 − Θ(yŷ)`.
    Misclassification,
}

impl Metric {
    pub fn loss(self, y: f64, y_hat: f64) -> f64 {
        match self {
            Metric::Mse => (y - y_hat).powi(2),
            Metric::Misclassification => {
                if y * y_hat > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// A sample mean with its standard error.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Estimate::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr,
            count: n,
        }
    }
}

/// Test error of `fit` on `n_test` fresh points, drawn in blocks from the
/// test streams of `seed`. Blocks are scored in parallel and combined in a
/// fixed order.
pub fn empirical_error(
    fit: &FitResult,
    problem: &Problem,
    n_test: usize,
    seed: u64,
    metric: Metric,
) -> Result<Estimate> {
    if n_test == 0 {
        return Err(DrfError::EmptyTestSet);
    }
    let blocks = n_test.div_ceil(TEST_CHUNK);
    let losses: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let size = TEST_CHUNK.min(n_test - b * TEST_CHUNK);
            let data = generate(problem, size, seed, Split::Test(b))?;
            let pred = fit.predict(&data.features);
            Ok(pred
                .iter()
                .zip(data.labels.iter())
                .map(|(p, y)| metric.loss(*y, *p))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&losses.concat()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    /// `X_LX_Lᵀ/k_L` for `n` samples.
    Gram,
    /// `X_LX_Lᵀ/n`.
    SampleCovariance,
    /// `X_LX_Lᵀ/n` accumulated in blocks, meant for `n ≫ k_L` so that it
    /// estimates the population covariance.
    PopulationMc,
}

/// Eigenvalues of the requested feature matrix as a uniform atomic measure.
pub fn empirical_spectrum(
    source: SpectrumSource,
    features: &dyn FeatureMap,
    omega0: &InputCovariance,
    n_samples: usize,
    seed: u64,
) -> Result<SpectralMeasure> {
    let k = features.output_dim();
    let d = features.input_dim();
    if n_samples == 0 || (source != SpectrumSource::Gram && n_samples < k) {
        return Err(DrfError::Config(format!(
            "{n_samples} samples are too few for a {k}-dimensional spectrum"
        )));
    }
    let sampler = InputSampler::new(omega0, d)?;
    let blocks = n_samples.div_ceil(TEST_CHUNK);
    let mut acc = DMatrix::<f64>::zeros(k, k);
    for b in 0..blocks {
        let size = TEST_CHUNK.min(n_samples - b * TEST_CHUNK);
        let block_seed = derive_seed(seed, b as u64);
        let x = sampler.sample(size, &mut stream_rng(block_seed, stream::SPECTRUM_INPUTS));
        let h = features.features(&x, &mut stream_rng(block_seed, stream::LEARNER_GAUSS_NOISE))?;
        acc.gemm(1.0, &h, &h.transpose(), 1.0);
    }
    let norm = match source {
        SpectrumSource::Gram => k as f64,
        SpectrumSource::SampleCovariance | SpectrumSource::PopulationMc => n_samples as f64,
    };
    acc /= norm;
    let ev = SymmetricEigen::try_new(acc, f64::EPSILON, 0)
        .ok_or_else(|| DrfError::Numerical("eigensolver did not converge".into()))?
        .eigenvalues;
    Ok(SpectralMeasure::uniform(ev.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::arch::{compute_coefficients, sample_network, ArchitectureSpec};
    use crate::lincov::omega_lin;

    fn matched(spec: &ArchitectureSpec, seed: u64, readout: Readout, noise: f64) -> Problem {
        let net = sample_network(spec, seed).unwrap();
        let k = net.output_dim();
        let target = TargetModel::new(TargetFeatures::Learner, sample_theta_star(k, seed), readout);
        Problem::new(Arc::new(net), target, &spec.omega0, noise).unwrap()
    }

    #[test]
    fn identity_target_labels_are_exact() {
        let spec = ArchitectureSpec::new(20, vec![], vec![]);
        let p = matched(&spec, 1, Readout::Linear, 0.0);
        let data = generate(&p, 7, 3, Split::Train).unwrap();
        let expect = data.inputs.tr_mul(&p.target.theta_star) / 20f64.sqrt();
        assert!((data.labels - expect).amax() < 1e-14);
    }

    #[test]
    fn sign_readout_gives_binary_labels() {
        let spec = ArchitectureSpec::uniform(20, 1, 2.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Sign, 0.5);
        let data = generate(&p, 50, 3, Split::Train).unwrap();
        assert!(data.labels.iter().all(|y| *y == 1.0 || *y == -1.0));
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = ArchitectureSpec::uniform(15, 2, 1.0, ActivationKind::Erf);
        let p = matched(&spec, 4, Readout::Linear, 0.3);
        let a = generate(&p, 10, 9, Split::Train).unwrap();
        let b = generate(&p, 10, 9, Split::Train).unwrap();
        let t = generate(&p, 10, 9, Split::Test(0)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.features, b.features);
        assert!((a.inputs.clone() - t.inputs).norm() > 1.0);
    }

    #[test]
    fn feature_second_moment_concentrates_on_omega_lin() {
        let spec = ArchitectureSpec::uniform(60, 1, 1.0, ActivationKind::tanh());
        let net = sample_network(&spec, 2).unwrap();
        let coeffs = compute_coefficients(&spec).unwrap();
        let omega = omega_lin(&net, &coeffs).unwrap().pop().unwrap();
        let moment = |n: usize, seed: u64| {
            let x = sample_inputs(&spec.omega0, 60, n, seed, stream::TRAIN_INPUTS).unwrap();
            let h = net.forward(&x).unwrap();
            h.clone() * h.transpose() / n as f64
        };
        let reference = moment(256_000, 99);
        let err = |n: usize| (moment(n, 5) - &reference).norm() / 60.0;
        let (e1, e2) = (err(2_000), err(32_000));
        // Sampling error shrinks like n^{-1/2}: 16× more samples, ≈ 4× smaller.
        assert!(e2 < e1 / 2.5, "{e1} -> {e2}");
        // What remains against Ω_lin is the O(1/d) linearization bias.
        let bias = (&reference - &omega).norm() / 60.0;
        assert!(bias < 0.01, "bias {bias}");
    }

    #[test]
    fn ridge_vanishes_at_large_lambda() {
        let spec = ArchitectureSpec::uniform(20, 1, 1.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Linear, 0.1);
        let data = generate(&p, 40, 2, Split::Train).unwrap();
        let fit = fit_ridge(&data, 1e12).unwrap();
        assert!(fit.theta_hat.amax() < 1e-9);
    }

    #[test]
    fn ridge_recovers_planted_weights() {
        let spec = ArchitectureSpec::uniform(20, 1, 1.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Linear, 0.0);
        let data = generate(&p, 400, 2, Split::Train).unwrap();
        let fit = fit_ridge(&data, 1e-8).unwrap();
        assert!((&fit.theta_hat - &p.target.theta_star).amax() < 1e-3);
        assert!(fit.final_residual < RIDGE_RESIDUAL_TOL);
    }

    #[test]
    fn ridge_matches_gradient_descent() {
        let spec = ArchitectureSpec::uniform(12, 1, 1.5, ActivationKind::Erf);
        let p = matched(&spec, 3, Readout::Linear, 0.2);
        let data = generate(&p, 25, 4, Split::Train).unwrap();
        let lambda = 0.5;
        let fit = fit_ridge(&data, lambda).unwrap();
        // Gradient of ½Σ(y − θᵀφ/√k)² + (λ/2)‖θ‖², step 1/L.
        let x = &data.features;
        let k = x.nrows() as f64;
        let a = x * x.transpose() / k;
        let lip = SymmetricEigen::new(a.clone()).eigenvalues.max() + lambda;
        let b = x * &data.labels / k.sqrt();
        let mut theta = DVector::zeros(x.nrows());
        for _ in 0..20_000 {
            let g = &a * &theta + &theta * lambda - &b;
            theta -= g / lip;
        }
        let rel = (&theta - &fit.theta_hat).norm() / fit.theta_hat.norm();
        assert!(rel < 1e-6, "relative gap {rel}");
    }

    #[test]
    fn logistic_on_empty_data_is_zero() {
        let spec = ArchitectureSpec::uniform(10, 1, 1.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Sign, 0.0);
        let data = generate(&p, 0, 2, Split::Train).unwrap();
        let fit = fit_logistic(&data, 0.1).unwrap();
        assert_eq!(fit.theta_hat.amax(), 0.0);
    }

    #[test]
    fn logistic_stays_bounded_on_separable_data() {
        // Matched sign target with n < k is linearly separable.
        let spec = ArchitectureSpec::uniform(20, 1, 2.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Sign, 0.0);
        let data = generate(&p, 15, 2, Split::Train).unwrap();
        let fit = fit_logistic(&data, 0.05).unwrap();
        assert!(fit.final_residual < LOGISTIC_GRAD_TOL);
        assert!(fit.theta_hat.norm().is_finite());
        assert_eq!(fit.train_error, 0.0);
    }

    #[test]
    fn logistic_matches_a_first_order_optimum() {
        let spec = ArchitectureSpec::uniform(10, 1, 1.0, ActivationKind::Erf);
        let p = matched(&spec, 5, Readout::Sign, 0.0);
        let data = generate(&p, 30, 6, Split::Train).unwrap();
        let lambda = 1.0;
        let fit = fit_logistic(&data, lambda).unwrap();
        let x = &data.features;
        let lip = SymmetricEigen::new(x * x.transpose() / (4.0 * x.nrows() as f64))
            .eigenvalues
            .max()
            + lambda;
        let mut theta = DVector::zeros(x.nrows());
        for _ in 0..20_000 {
            theta -= logistic_gradient(&data, lambda, &theta) / lip;
        }
        let f_newton = logistic_objective(&data, lambda, &fit.theta_hat);
        let f_gd = logistic_objective(&data, lambda, &theta);
        assert!((f_newton - f_gd).abs() < 1e-9, "{f_newton} vs {f_gd}");
    }

    #[test]
    fn true_weights_have_zero_test_error() {
        let spec = ArchitectureSpec::new(30, vec![], vec![]);
        let p = matched(&spec, 1, Readout::Linear, 0.0);
        let fit = FitResult {
            theta_hat: p.target.theta_star.clone(),
            train_error: 0.0,
            iterations: 0,
            final_residual: 0.0,
        };
        let e = empirical_error(&fit, &p, 5000, 3, Metric::Mse).unwrap();
        assert!(e.mean < 1e-24);
        assert!(empirical_error(&fit, &p, 0, 3, Metric::Mse).is_err());
    }

    #[test]
    fn random_weights_guess_sign_labels() {
        let spec = ArchitectureSpec::uniform(40, 1, 1.0, ActivationKind::tanh());
        let p = matched(&spec, 1, Readout::Sign, 0.0);
        let fit = FitResult {
            theta_hat: sample_theta_star(40, 999),
            train_error: 0.0,
            iterations: 0,
            final_residual: 0.0,
        };
        let e = empirical_error(&fit, &p, 20_000, 3, Metric::Misclassification).unwrap();
        // A random direction has overlap O(1/√k) with θ★.
        assert!((e.mean - 0.5).abs() < 0.15, "{e:?}");
    }

    #[test]
    fn gaussian_surrogate_matches_second_moments() {
        let spec = ArchitectureSpec::uniform(30, 2, 1.0, ActivationKind::tanh());
        let net = sample_network(&spec, 8).unwrap();
        let coeffs = compute_coefficients(&spec).unwrap();
        let omega = omega_lin(&net, &coeffs).unwrap().pop().unwrap();
        let ge = GaussianEquivalentNetwork::new(net, coeffs).unwrap();
        let n = 40_000;
        let x = sample_inputs(&spec.omega0, 30, n, 1, stream::TRAIN_INPUTS).unwrap();
        let h = ge.features(&x, &mut stream_rng(1, stream::LEARNER_GAUSS_NOISE)).unwrap();
        let err = (h.clone() * h.transpose() / n as f64 - &omega).norm() / 30.0;
        assert!(err < 5.0 / (n as f64).sqrt() * 30f64.sqrt(), "err {err}");
    }

    #[test]
    fn spectrum_is_deterministic() {
        let spec = ArchitectureSpec::uniform(20, 1, 1.0, ActivationKind::tanh());
        let net = sample_network(&spec, 8).unwrap();
        let a = empirical_spectrum(SpectrumSource::SampleCovariance, &net, &spec.omega0, 500, 2).unwrap();
        let b = empirical_spectrum(SpectrumSource::SampleCovariance, &net, &spec.omega0, 500, 2).unwrap();
        match (a, b) {
            (SpectralMeasure::Atoms { values: va, .. }, SpectralMeasure::Atoms { values: vb, .. }) => {
                assert_eq!(va, vb);
                assert_eq!(va.len(), 20);
            }
            _ => panic!("expected atoms"),
        }
    }

    #[test]
    fn correlated_inputs_have_the_requested_covariance() {
        let d = 5;
        let m = DMatrix::from_fn(d, d, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
        let cov = InputCovariance::from_matrix(m.clone());
        let n = 200_000;
        let x = sample_inputs(&cov, d, n, 1, stream::TRAIN_INPUTS).unwrap();
        let emp = &x * x.transpose() / n as f64;
        assert!((emp - m).amax() < 0.02);
    }
}
