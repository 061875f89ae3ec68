//! Sample covariance spectra against the Marchenko–Pastur fixed point.

use drf_core::rmt::{mp_selfconsistent, SpectralMeasure, C64};
use drf_core::rng::{gaussian_matrix, stream_rng};
use nalgebra::{DMatrix, SymmetricEigen};

fn resolvent_trace(eigs: &[f64], z: C64) -> C64 {
    eigs.iter().map(|e| 1.0 / (*e - z)).sum::<C64>() / eigs.len() as f64
}

/// Eigenvalues of `XXᵀ/n` for `X = Σ^{1/2} Z`, `Σ = diag(pop)`.
fn sample_covariance_eigs(pop: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let p = pop.len();
    let mut x = gaussian_matrix(&mut stream_rng(seed, 0), p, n, 1.0);
    for (i, s) in pop.iter().enumerate() {
        x.row_mut(i).scale_mut(s.sqrt());
    }
    let s: DMatrix<f64> = &x * x.transpose() / n as f64;
    SymmetricEigen::new(s).eigenvalues.iter().copied().collect()
}

#[test]
fn white_wishart() {
    let (p, n) = (1000, 2000);
    let eigs = sample_covariance_eigs(&vec![1.0; p], n, 3);
    for z in [C64::new(-0.5, 0.0), C64::new(1.0, 0.2), C64::new(2.5, 0.5)] {
        let mp = mp_selfconsistent(&SpectralMeasure::dirac(1.0), p as f64 / n as f64, z).unwrap();
        let err = (resolvent_trace(&eigs, z) - mp.m_hat).norm();
        assert!(err < 1e-2, "z = {z}: error {err}");
    }
}

#[test]
fn two_atom_population() {
    let p = 800;
    let pop: Vec<f64> = (0..p).map(|i| if i % 2 == 0 { 0.5 } else { 2.0 }).collect();
    let n = 1000;
    let eigs = sample_covariance_eigs(&pop, n, 5);
    let measure = SpectralMeasure::uniform(vec![0.5, 2.0]);
    for z in [C64::new(-1.0, 0.0), C64::new(0.8, 0.3), C64::new(3.0, 0.5)] {
        let mp = mp_selfconsistent(&measure, p as f64 / n as f64, z).unwrap();
        let err = (resolvent_trace(&eigs, z) - mp.m_hat).norm();
        assert!(err < 1e-2, "z = {z}: error {err}");
        // Gram side: the n × n trace adds (n − p) zero eigenvalues.
        let gram = (resolvent_trace(&eigs, z) * p as f64 - (n - p) as f64 / z) / n as f64;
        assert!((gram - mp.wc_m).norm() < 1e-2);
    }
}
