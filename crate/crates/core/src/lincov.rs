//! Linearized covariances of network features and the equivalent noisy
//! linear network.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::arch::{GECoefficients, SampledNetwork};
use crate::error::{DrfError, Result};
use crate::matrix_io::{read_matrix, write_matrix};

/// Relative tolerance for the PSD checks on covariance blocks.
pub const PSD_TOL: f64 = 1e-9;

fn check_coeffs(network: &SampledNetwork, coeffs: &GECoefficients) -> Result<()> {
    if coeffs.depth() != network.depth() {
        return Err(DrfError::Config(format!(
            "coefficients for depth {} given for a depth-{} network",
            coeffs.depth(),
            network.depth()
        )));
    }
    Ok(())
}

/// `κ₁^ℓ W_ℓ / √k_{ℓ−1}` for every layer.
fn linear_factors(network: &SampledNetwork, coeffs: &GECoefficients) -> Vec<DMatrix<f64>> {
    let widths = network.widths();
    network
        .weights
        .iter()
        .enumerate()
        .map(|(l, w)| w * (coeffs.kappa1[l] / (widths[l] as f64).sqrt()))
        .collect()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `Ω_lin^0 … Ω_lin^L` with `Ω_lin^{ℓ+1} = κ₁² W Ω_lin^ℓ Wᵀ / k_ℓ + κ★² I`.
pub fn omega_lin(network: &SampledNetwork, coeffs: &GECoefficients) -> Result<Vec<DMatrix<f64>>> {
    check_coeffs(network, coeffs)?;
    let mut out = Vec::with_capacity(network.depth() + 1);
    out.push(network.spec.omega0.dense(network.spec.d));
    for (l, m) in linear_factors(network, coeffs).iter().enumerate() {
        let mut next = m * out.last().unwrap() * m.transpose();
        symmetrize(&mut next);
        let ks2 = coeffs.kappa_star[l].powi(2);
        for i in 0..next.nrows() {
            next[(i, i)] += ks2;
        }
        out.push(next);
    }
    Ok(out)
}

/// Target-side covariance `Ψ_lin`; the input covariance itself when `L★ = 0`.
pub fn psi_lin(target: &SampledNetwork, coeffs: &GECoefficients) -> Result<DMatrix<f64>> {
    Ok(omega_lin(target, coeffs)?.pop().unwrap())
}

/// Product `M_L ⋯ M_1` of the linear factors; the identity for an empty network.
fn chain_product(network: &SampledNetwork, coeffs: &GECoefficients) -> DMatrix<f64> {
    let d = network.spec.d;
    linear_factors(network, coeffs)
        .into_iter()
        .fold(DMatrix::identity(d, d), |acc, m| m * acc)
}

/// Cross-covariance `Φ_lin = A★ Ω₀ A_Lᵀ` between target and learner features.
pub fn phi_lin(
    target: &SampledNetwork,
    target_coeffs: &GECoefficients,
    learner: &SampledNetwork,
    coeffs: &GECoefficients,
) -> Result<DMatrix<f64>> {
    check_coeffs(target, target_coeffs)?;
    check_coeffs(learner, coeffs)?;
    if target.spec.d != learner.spec.d {
        return Err(DrfError::Dimension(format!(
            "target has d = {}, learner has d = {}",
            target.spec.d, learner.spec.d
        )));
    }
    let a_star = chain_product(target, target_coeffs);
    let a = chain_product(learner, coeffs);
    let omega0 = &learner.spec.omega0;
    Ok(if omega0.is_identity() {
        a_star * a.transpose()
    } else {
        a_star * omega0.dense(learner.spec.d) * a.transpose()
    })
}

/// Products `∏_{ℓ'>ℓ} (κ₁^{ℓ'})² Δ_{ℓ'}` for `ℓ = 0..L` (index 0 covers every layer).
fn tail_gains(coeffs: &GECoefficients) -> Vec<f64> {
    let l = coeffs.depth();
    let mut gains = vec![1.0; l + 1];
    for i in (0..l).rev() {
        gains[i] = gains[i + 1] * coeffs.kappa1[i].powi(2) * coeffs.deltas[i];
    }
    gains
}

/// Limit of `tr(Ω_lin^L)/k_L`.
pub fn trace_omega(coeffs: &GECoefficients, trace_omega0_over_d: f64) -> f64 {
    asymptotic_noise_level(coeffs) + trace_omega0_over_d * tail_gains(coeffs)[0]
}

/// Limit of `tr(C_ξ^L)/k_L`: the part of `⟨Ω_L⟩` not carried by the input.
pub fn asymptotic_noise_level(coeffs: &GECoefficients) -> f64 {
    let gains = tail_gains(coeffs);
    (0..coeffs.depth())
        .map(|l| coeffs.kappa_star[l].powi(2) * gains[l + 1])
        .sum()
}

/// Deep random features viewed as a noisy linear map `A_L x + ξ`.
#[derive(Clone, Debug)]
pub struct EffectiveLinearModel {
    /// `A_L`, `k_L × d`.
    pub a_matrix: DMatrix<f64>,
    /// `C_ξ^L`, `k_L × k_L`.
    pub noise_cov: DMatrix<f64>,
    /// `tr(C_ξ^L)/k_L`.
    pub noise_level: f64,
}

pub fn effective_linear(
    network: &SampledNetwork,
    coeffs: &GECoefficients,
) -> Result<EffectiveLinearModel> {
    check_coeffs(network, coeffs)?;
    if network.depth() == 0 {
        return Err(DrfError::DegenerateDepth(
            "the effective linear model needs at least one layer".into(),
        ));
    }
    let factors = linear_factors(network, coeffs);
    let k_l = network.output_dim();
    // C_ξ accumulates Σ κ★² PᵀP layer by layer: C ← M C Mᵀ + κ★² I.
    let mut noise = DMatrix::<f64>::zeros(network.spec.d, network.spec.d);
    let mut a = DMatrix::<f64>::identity(network.spec.d, network.spec.d);
    for (l, m) in factors.iter().enumerate() {
        noise = m * &noise * m.transpose();
        let ks2 = coeffs.kappa_star[l].powi(2);
        for i in 0..noise.nrows() {
            noise[(i, i)] += ks2;
        }
        a = m * a;
    }
    symmetrize(&mut noise);
    let noise_level = noise.trace() / k_l as f64;
    Ok(EffectiveLinearModel {
        a_matrix: a,
        noise_cov: noise,
        noise_level,
    })
}

/// Smallest eigenvalue relative to the spectral norm.
pub fn relative_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Covariance blocks of the Gaussian covariate model.
#[derive(Clone, Debug)]
pub struct CovarianceSet {
    /// `Ω`, learner features, `k_L × k_L`.
    pub omega: DMatrix<f64>,
    /// `Ψ`, target features, `k★ × k★`.
    pub psi: DMatrix<f64>,
    /// `Φ`, target/learner cross-covariance, `k★ × k_L`.
    pub phi: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    /// `θ★ᵀΨθ★/k★`.
    pub rho: f64,
    /// Input dimension the blocks were built at.
    pub d: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    d: usize,
    k_l: usize,
    k_star: usize,
    seed: u64,
    rho: f64,
    omega: String,
    psi: String,
    phi: String,
    theta_star: String,
}

impl CovarianceSet {
    pub fn new(
        omega: DMatrix<f64>,
        psi: DMatrix<f64>,
        phi: DMatrix<f64>,
        theta_star: DVector<f64>,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let (k, ks) = (omega.nrows(), psi.nrows());
        if omega.ncols() != k
            || psi.ncols() != ks
            || phi.shape() != (ks, k)
            || theta_star.len() != ks
        {
            return Err(DrfError::Dimension(format!(
                "inconsistent blocks: omega {:?}, psi {:?}, phi {:?}, theta {}",
                omega.shape(),
                psi.shape(),
                phi.shape(),
                theta_star.len()
            )));
        }
        let rho = (theta_star.transpose() * &psi * &theta_star)[(0, 0)] / ks as f64;
        Ok(CovarianceSet {
            omega,
            psi,
            phi,
            theta_star,
            rho,
            d,
            seed,
        })
    }

    /// The linearized blocks for a learner/target pair.
    pub fn linearized(
        learner: &SampledNetwork,
        coeffs: &GECoefficients,
        target: &SampledNetwork,
        target_coeffs: &GECoefficients,
        theta_star: DVector<f64>,
    ) -> Result<Self> {
        let omega = omega_lin(learner, coeffs)?.pop().unwrap();
        let psi = psi_lin(target, target_coeffs)?;
        let phi = phi_lin(target, target_coeffs, learner, coeffs)?;
        Self::new(omega, psi, phi, theta_star, learner.spec.d, learner.seed)
    }

    /// Target reading the learner's own features: `Ψ = Φ = Ω = Ω_lin^L`.
    /// (Two distinct networks share only the signal part of their features,
    /// which is what [`CovarianceSet::linearized`] builds.)
    pub fn matched(
        learner: &SampledNetwork,
        coeffs: &GECoefficients,
        theta_star: DVector<f64>,
    ) -> Result<Self> {
        let omega = omega_lin(learner, coeffs)?.pop().unwrap();
        Self::new(omega.clone(), omega.clone(), omega, theta_star, learner.spec.d, learner.seed)
    }

    pub fn k(&self) -> usize {
        self.omega.nrows()
    }

    pub fn k_star(&self) -> usize {
        self.psi.nrows()
    }

    /// Checks that `Ω`, `Ψ` and the joint block matrix are PSD.
    pub fn check_psd(&self) -> Result<()> {
        let (k, ks) = (self.k(), self.k_star());
        let mut joint = DMatrix::zeros(ks + k, ks + k);
        joint.view_mut((0, 0), (ks, ks)).copy_from(&self.psi);
        joint.view_mut((0, ks), (ks, k)).copy_from(&self.phi);
        joint.view_mut((ks, 0), (k, ks)).copy_from(&self.phi.transpose());
        joint.view_mut((ks, ks), (k, k)).copy_from(&self.omega);
        for (name, m) in [("omega", &self.omega), ("psi", &self.psi), ("joint", &joint)] {
            let asym = (m - m.transpose()).amax();
            if asym > PSD_TOL * m.amax().max(1.0) {
                return Err(DrfError::Config(format!("{name} is not symmetric ({asym:e})")));
            }
            let rel = relative_min_eigenvalue(m);
            if rel < -PSD_TOL {
                return Err(DrfError::Config(format!(
                    "{name} is not PSD: relative smallest eigenvalue {rel:e}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the blocks and a `manifest.json` into `dir`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DrfError::io(dir, e))?;
        let manifest = BundleManifest {
            d: self.d,
            k_l: self.k(),
            k_star: self.k_star(),
            seed: self.seed,
            rho: self.rho,
            omega: "omega.bin".into(),
            psi: "psi.bin".into(),
            phi: "phi.bin".into(),
            theta_star: "theta_star.bin".into(),
        };
        write_matrix(dir.join(&manifest.omega), &self.omega)?;
        write_matrix(dir.join(&manifest.psi), &self.psi)?;
        write_matrix(dir.join(&manifest.phi), &self.phi)?;
        let theta = DMatrix::from_column_slice(self.k_star(), 1, self.theta_star.as_slice());
        write_matrix(dir.join(&manifest.theta_star), &theta)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| DrfError::io(&path, e))
    }

    pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| DrfError::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        let theta = read_matrix(dir.join(&manifest.theta_star))?;
        let set = Self::new(
            read_matrix(dir.join(&manifest.omega))?,
            read_matrix(dir.join(&manifest.psi))?,
            read_matrix(dir.join(&manifest.phi))?,
            DVector::from_column_slice(theta.as_slice()),
            manifest.d,
            manifest.seed,
        )?;
        if set.k() != manifest.k_l || set.k_star() != manifest.k_star {
            return Err(DrfError::Format {
                path: path.display().to_string(),
                detail: format!(
                    "manifest declares k_L = {}, k★ = {} but files hold {} and {}",
                    manifest.k_l,
                    manifest.k_star,
                    set.k(),
                    set.k_star()
                ),
            });
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::arch::{compute_coefficients, sample_network, ArchitectureSpec, InputCovariance};
    use std::f64::consts::PI;

    fn net(d: usize, gammas: Vec<f64>, act: ActivationKind, seed: u64) -> (SampledNetwork, GECoefficients) {
        let l = gammas.len();
        let spec = ArchitectureSpec::new(d, gammas, vec![act; l]);
        let c = compute_coefficients(&spec).unwrap();
        (sample_network(&spec, seed).unwrap(), c)
    }

    #[test]
    fn linear_network_collapses_to_weight_product() {
        let (n, c) = net(20, vec![1.5, 0.5], ActivationKind::Identity, 1);
        let omega = omega_lin(&n, &c).unwrap().pop().unwrap();
        let prod = &n.weights[1] * &n.weights[0] / (20.0f64 * 30.0).sqrt();
        let expected = &prod * prod.transpose();
        assert!((omega - expected).amax() < 1e-12);
    }

    #[test]
    fn single_sign_layer() {
        let (n, c) = net(15, vec![2.0], ActivationKind::Sign, 2);
        let omega = omega_lin(&n, &c).unwrap().pop().unwrap();
        let w = &n.weights[0];
        let expected = w * w.transpose() * (2.0 / PI / 15.0)
            + DMatrix::identity(30, 30) * (1.0 - 2.0 / PI);
        assert!((omega - expected).amax() < 1e-10);
    }

    #[test]
    fn shallow_target_keeps_input_covariance() {
        let diag = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let mut spec = ArchitectureSpec::new(3, vec![], vec![]);
        spec.omega0 = InputCovariance::from_matrix(DMatrix::from_diagonal(&diag));
        let c = compute_coefficients(&spec).unwrap();
        let n = sample_network(&spec, 0).unwrap();
        assert_eq!(psi_lin(&n, &c).unwrap(), DMatrix::from_diagonal(&diag));
        assert_eq!(phi_lin(&n, &c, &n, &c).unwrap(), DMatrix::from_diagonal(&diag));
    }

    #[test]
    fn phi_for_one_linear_learner_layer() {
        let (t, tc) = net(12, vec![], ActivationKind::Identity, 0);
        let (n, c) = net(12, vec![1.0], ActivationKind::Identity, 5);
        let phi = phi_lin(&t, &tc, &n, &c).unwrap();
        let expected = n.weights[0].transpose() / 12f64.sqrt();
        assert!((phi - expected).amax() < 1e-14);
    }

    #[test]
    fn trace_closed_forms() {
        let lin = compute_coefficients(&ArchitectureSpec::uniform(10, 3, 1.0, ActivationKind::Identity)).unwrap();
        assert!((trace_omega(&lin, 1.0) - 1.0).abs() < 1e-14);
        let sign = compute_coefficients(&ArchitectureSpec::uniform(10, 1, 1.0, ActivationKind::Sign)).unwrap();
        assert!((trace_omega(&sign, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn signal_plus_noise_identity() {
        let (n, c) = net(25, vec![1.2, 0.8, 1.0], ActivationKind::TanhScaled(2.0), 9);
        let omega = omega_lin(&n, &c).unwrap().pop().unwrap();
        let eff = effective_linear(&n, &c).unwrap();
        // A_L from an explicit left-to-right product
        let widths = n.widths();
        let mut a = DMatrix::identity(25, 25);
        for (l, w) in n.weights.iter().enumerate() {
            a = w * a * (c.kappa1[l] / (widths[l] as f64).sqrt());
        }
        assert!((&eff.a_matrix - &a).amax() < 1e-12);
        let rebuilt = &a * a.transpose() + &eff.noise_cov;
        assert!((rebuilt - omega).amax() < 1e-10);
    }

    #[test]
    fn effective_model_edge_cases() {
        let (n, c) = net(10, vec![1.0], ActivationKind::Erf, 3);
        let eff = effective_linear(&n, &c).unwrap();
        let expected = DMatrix::identity(10, 10) * c.kappa_star[0].powi(2);
        assert!((eff.noise_cov - expected).amax() < 1e-14);
        let (lin, lc) = net(10, vec![1.0, 1.0], ActivationKind::Identity, 3);
        assert_eq!(effective_linear(&lin, &lc).unwrap().noise_level, 0.0);
        let (empty, ec) = net(10, vec![], ActivationKind::Identity, 3);
        assert!(matches!(
            effective_linear(&empty, &ec),
            Err(DrfError::DegenerateDepth(_))
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let (n, c) = net(8, vec![1.0], ActivationKind::tanh(), 4);
        let (t, tc) = net(8, vec![0.5], ActivationKind::Erf, 5);
        let theta = DVector::from_fn(4, |i, _| i as f64 - 1.5);
        let set = CovarianceSet::linearized(&n, &c, &t, &tc, theta).unwrap();
        set.check_psd().unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_bundle(dir.path()).unwrap();
        let back = CovarianceSet::read_bundle(dir.path()).unwrap();
        assert_eq!(back.omega, set.omega);
        assert_eq!(back.phi, set.phi);
        assert_eq!(back.theta_star, set.theta_star);
        assert_eq!(back.rho, set.rho);
    }

    #[test]
    fn non_psd_joint_block_is_rejected() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let set = CovarianceSet::new(eye.clone(), eye.clone(), eye * 2.0, DVector::zeros(2), 2, 0).unwrap();
        assert!(set.check_psd().is_err());
    }
}
