//! Effective noise of each learner next to its error at the two
//! interpolation peaks.

use drf_core::compute_coefficients;
use drf_core::lincov::asymptotic_noise_level;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Trend};
use crate::error::{Context, Result};
use crate::experiment::theory_for;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImplicitRow {
    pub learner: String,
    pub depth: usize,
    pub gamma: f64,
    /// `tr(C_ξ)/k_L`.
    pub noise_level: f64,
    /// Error at `α = 1`.
    pub eps_linear_peak: f64,
    /// Error at `α = γ_L`.
    pub eps_nonlinear_peak: f64,
}

pub fn implicit_reg_study(config: &ExperimentConfig) -> Result<Vec<ImplicitRow>> {
    config
        .learners
        .iter()
        .map(|l| {
            let spec = l.spec(config.d)?;
            let coeffs = compute_coefficients(&spec).context(|| format!("coefficients of {}", l.label()))?;
            let gamma = l.gamma_top();
            let alphas = if gamma > 1.0 {
                vec![1.0, gamma]
            } else if gamma < 1.0 {
                vec![gamma, 1.0]
            } else {
                vec![1.0]
            };
            let curve = theory_for(config, l, &alphas)?;
            let at = |a: f64| curve.eps[alphas.iter().position(|x| *x == a).unwrap()];
            Ok(ImplicitRow {
                learner: l.label(),
                depth: l.depth(),
                gamma,
                noise_level: asymptotic_noise_level(&coeffs),
                eps_linear_peak: at(1.0),
                eps_nonlinear_peak: at(gamma),
            })
        })
        .collect()
}

/// Whether the noise levels follow `trend` strictly, in learner order.
pub fn follows_trend(rows: &[ImplicitRow], trend: Trend) -> bool {
    rows.windows(2).all(|w| match trend {
        Trend::Increasing => w[1].noise_level > w[0].noise_level,
        Trend::Decreasing => w[1].noise_level < w[0].noise_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::presets::preset;
    use drf_core::ActivationKind;

    #[test]
    fn identity_layer_adds_no_noise() {
        let mut c = preset("fig3_tanh").unwrap();
        c.learners = vec![NetworkConfig::uniform(1, 1.0, ActivationKind::Identity)];
        c.target = crate::config::TargetConfig::Learner;
        c.d = 50;
        let rows = implicit_reg_study(&c).unwrap();
        assert_eq!(rows[0].noise_level, 0.0);
    }

    #[test]
    fn trend_is_strict() {
        let row = |noise_level| ImplicitRow {
            learner: String::new(),
            depth: 1,
            gamma: 1.0,
            noise_level,
            eps_linear_peak: 0.0,
            eps_nonlinear_peak: 0.0,
        };
        let rows = vec![row(0.1), row(0.2), row(0.2)];
        assert!(!follows_trend(&rows, Trend::Increasing));
        assert!(follows_trend(&rows[..2], Trend::Increasing));
        assert!(!follows_trend(&rows[..2], Trend::Decreasing));
    }
}
