//! Limiting spectra of the population covariance next to Monte Carlo
//! eigenvalues of the same finite network.

use drf_core::arch::InputCovariance;
use drf_core::rmt::{default_grid, density_scheme, ks_distance, DensityResult, PopulationChain, SpectralMeasure};
use drf_core::sim::{empirical_spectrum, SpectrumSource};
use drf_core::{compute_coefficients, sample_network, SampledNetwork};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, NetworkConfig};
use crate::error::{Context, HarnessError, Result};
use crate::experiment::run_seed;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSummary {
    pub learner: String,
    pub layer: usize,
    pub ks: f64,
    /// Mass of the computed density plus atoms; close to 1 when the grid
    /// covers the support.
    pub total_mass: f64,
    pub atoms: Vec<(f64, f64)>,
    pub n_eigenvalues: usize,
    pub n_samples: usize,
}

pub struct LayerSpectrum {
    pub summary: LayerSummary,
    pub density: DensityResult,
    pub eigenvalues: Vec<f64>,
}

/// The first `depth` layers of a sampled network.
pub fn truncate_network(net: &SampledNetwork, depth: usize) -> SampledNetwork {
    let mut spec = net.spec.clone();
    spec.depth = depth;
    spec.gammas.truncate(depth);
    spec.activations.truncate(depth);
    spec.deltas.truncate(depth);
    SampledNetwork {
        spec,
        weights: net.weights[..depth].to_vec(),
        seed: net.seed,
    }
}

/// Density and empirical eigenvalues for the requested layers of one learner.
pub fn layer_spectra(config: &ExperimentConfig, learner: &NetworkConfig) -> Result<Vec<LayerSpectrum>> {
    let label = learner.label();
    let depth = learner.depth();
    if depth == 0 {
        return Err(HarnessError::Config(format!("{label} has no hidden layer")));
    }
    let spec = learner.spec(config.d)?;
    let coeffs = compute_coefficients(&spec).context(|| format!("coefficients of {label}"))?;
    let chain = PopulationChain::new(&coeffs, &spec.gammas, SpectralMeasure::dirac(1.0))
        .context(|| format!("population chain of {label}"))?;
    let seed = run_seed(config, 0);
    let net = sample_network(&spec, seed).context(|| format!("sampling {label}"))?;
    let s = &config.spectrum;
    let layers: Vec<usize> = if s.per_layer { (1..=depth).collect() } else { vec![depth] };
    layers
        .into_iter()
        .map(|l| {
            let sub = chain.truncated(l);
            let grid = default_grid(&sub, s.grid_points);
            let density =
                density_scheme(&sub, &grid, s.eta).context(|| format!("density of {label} layer {l}"))?;
            let sub_net = truncate_network(&net, l);
            let measure = empirical_spectrum(
                SpectrumSource::PopulationMc,
                &sub_net,
                &InputCovariance::Identity,
                s.n_samples,
                seed,
            )
            .context(|| format!("empirical spectrum of {label} layer {l}"))?;
            let eigenvalues = match measure {
                SpectralMeasure::Atoms { values, .. } => values,
                SpectralMeasure::Stieltjes(_) => unreachable!("empirical spectra are atomic"),
            };
            let ks = ks_distance(density.cdf(), &eigenvalues);
            Ok(LayerSpectrum {
                summary: LayerSummary {
                    learner: label.clone(),
                    layer: l,
                    ks,
                    total_mass: density.total_mass(),
                    atoms: density.atoms.clone(),
                    n_eigenvalues: eigenvalues.len(),
                    n_samples: s.n_samples,
                },
                density,
                eigenvalues,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use drf_core::ActivationKind;

    #[test]
    fn truncation_keeps_the_lower_layers() {
        let spec = drf_core::ArchitectureSpec::new(10, vec![1.0, 2.0, 0.5], vec![ActivationKind::tanh(); 3]);
        let net = sample_network(&spec, 1).unwrap();
        let sub = truncate_network(&net, 2);
        let x = nalgebra::DMatrix::from_fn(10, 3, |i, j| (i as f64 - j as f64) / 7.0);
        let full = net.forward_all(&x).unwrap();
        assert_eq!(sub.forward(&x).unwrap(), full[2]);
        assert_eq!(sub.output_dim(), 20);
    }
}
