//! Named experiments reproducing the learning curves and spectra of the
//! deep random features study.

use drf_core::sim::Readout;
use drf_core::ActivationKind;

use crate::config::{
    ChannelKind, ExperimentConfig, FeatureKind, NetworkConfig, SpectrumConfig, TargetConfig,
    TheoryMethod, Thresholds, Trend, DEFAULT_D, DEFAULT_SEEDS, PAPER_D,
};
use crate::error::{HarnessError, Result};

pub const PRESETS: &[&str] = &[
    "fig1_left",
    "fig1_right",
    "fig2_left",
    "fig2_right",
    "fig2_left_erf",
    "fig2_right_erf",
    "fig3_tanh",
    "fig3_clipped",
    "fig4_top",
    "fig4_bottom",
    "fig5",
    "appE_deep_vs_wide",
    "appE_deep_vs_wide_narrow",
    "appE_bottleneck",
];

/// Depths of the triple-descent families.
pub const FIG3_DEPTHS: std::ops::RangeInclusive<usize> = 1..=6;
pub const FIG3_GAMMA: f64 = 4.0;

/// Largest `m` of the deep-vs-wide comparison at desk and paper scale.
const APPE_MAX_M: usize = 8;
const APPE_MAX_M_PAPER: usize = 14;
/// The deep-vs-wide networks reach `(m − 2)γ d` hidden units, so those
/// presets run at a smaller input dimension.
const APPE_D: usize = 100;

fn tanh2() -> ActivationKind {
    ActivationKind::TanhScaled(2.0)
}

/// `1.1 · sign(x) · min(2, |x|)`.
pub fn clipped() -> ActivationKind {
    ActivationKind::ClippedLinear {
        slope: 1.1,
        clip: 2.0,
    }
}

/// Concatenates evenly spaced segments `(start, stop, step)`, dropping
/// duplicates at the joins.
fn grid(segments: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &(start, stop, step) in segments {
        let n = ((stop - start) / step).round() as usize;
        for i in 0..=n {
            let a = ((start + i as f64 * step) * 1e6).round() / 1e6;
            if out.last().is_none_or(|&l| a > l + 1e-9) {
                out.push(a);
            }
        }
    }
    out
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        learners: Vec::new(),
        target: TargetConfig::Learner,
        readout: Readout::Linear,
        channel: ChannelKind::Square,
        lambda: 1e-3,
        delta: 0.0,
        alpha_grid: Vec::new(),
        d: DEFAULT_D,
        n_seeds: DEFAULT_SEEDS,
        seed: 0,
        features: FeatureKind::True,
        theory: TheoryMethod::Auto,
        theory_networks: 1,
        spectrum: SpectrumConfig::default(),
        thresholds: Thresholds::default(),
        out: None,
    }
}

fn fig1(name: &str, target: NetworkConfig) -> ExperimentConfig {
    ExperimentConfig {
        learners: vec![NetworkConfig::new(vec![2.0, 2.0], tanh2())],
        target: TargetConfig::Network(target),
        alpha_grid: vec![0.25, 0.5, 0.75, 1.25, 1.5, 2.5, 3.0, 3.5, 4.0, 5.0],
        ..base(name)
    }
}

fn fig2(name: &str, activation: ActivationKind, lambda: f64, target: NetworkConfig) -> ExperimentConfig {
    ExperimentConfig {
        learners: vec![NetworkConfig::new(vec![2.0, 2.0], activation)],
        target: TargetConfig::Network(target),
        readout: Readout::Sign,
        channel: ChannelKind::Logistic,
        lambda,
        alpha_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0],
        ..base(name)
    }
}

fn fig3(name: &str, activation: ActivationKind) -> ExperimentConfig {
    ExperimentConfig {
        learners: FIG3_DEPTHS
            .map(|l| NetworkConfig::uniform(l, FIG3_GAMMA, activation.clone()))
            .collect(),
        target: TargetConfig::Network(NetworkConfig::uniform(1, 2.0, ActivationKind::Sign)),
        alpha_grid: grid(&[
            (0.1, 0.7, 0.1),
            (0.75, 1.25, 0.05),
            (1.4, 3.4, 0.2),
            (3.5, 4.5, 0.1),
            (5.0, 8.0, 0.5),
        ]),
        ..base(name)
    }
}

fn spectrum(name: &str, network: NetworkConfig, per_layer: bool) -> ExperimentConfig {
    ExperimentConfig {
        learners: vec![network],
        alpha_grid: vec![1.0],
        spectrum: SpectrumConfig {
            per_layer,
            ..SpectrumConfig::default()
        },
        ..base(name)
    }
}

fn deep_vs_wide(name: &str, gamma: f64, max_m: usize) -> ExperimentConfig {
    let mut learners = Vec::new();
    for m in 3..=max_m {
        learners.push(NetworkConfig::uniform(m, gamma, ActivationKind::tanh()).labeled(format!("deep_m{m}")));
        learners.push(
            NetworkConfig::new(vec![gamma, (m - 2) as f64 * gamma, gamma], ActivationKind::tanh())
                .labeled(format!("wide_m{m}")),
        );
    }
    ExperimentConfig {
        learners,
        target: TargetConfig::Network(NetworkConfig::uniform(1, 4.0, ActivationKind::Sign)),
        delta: 0.1,
        alpha_grid: vec![0.5, 1.0, 2.0, 4.0],
        d: APPE_D,
        ..base(name)
    }
}

fn bottleneck() -> ExperimentConfig {
    let mut learners = Vec::new();
    for g in [1.0, 2.0, 3.0, 4.0] {
        learners.push(NetworkConfig::uniform(4, g, ActivationKind::tanh()).labeled(format!("rect_g{g}")));
        learners.push(
            NetworkConfig::new(vec![g, g, 0.5, g], ActivationKind::tanh()).labeled(format!("bottleneck_g{g}")),
        );
    }
    ExperimentConfig {
        learners,
        target: TargetConfig::Network(NetworkConfig::uniform(1, 2.0, ActivationKind::Sign)),
        delta: 0.1,
        alpha_grid: grid(&[(0.25, 3.0, 0.25), (3.5, 6.0, 0.5)]),
        ..base("appE_bottleneck")
    }
}

/// Looks up a preset at desk scale.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let sign_hidden = NetworkConfig::uniform(1, 1.0, ActivationKind::Sign);
    let input = NetworkConfig::uniform(0, 1.0, ActivationKind::Identity);
    let erf_hidden = NetworkConfig::uniform(1, 1.0, ActivationKind::Erf);
    let config = match name {
        "fig1_left" => fig1(name, sign_hidden),
        "fig1_right" => fig1(name, input),
        "fig2_left" => fig2(name, tanh2(), 0.05, input),
        "fig2_right" => fig2(name, tanh2(), 0.05, erf_hidden),
        "fig2_left_erf" => fig2(name, ActivationKind::Erf, 0.1, input),
        "fig2_right_erf" => fig2(name, ActivationKind::Erf, 0.1, erf_hidden),
        "fig3_tanh" => ExperimentConfig {
            thresholds: Thresholds {
                noise_trend: Some(Trend::Decreasing),
                ..Thresholds::default()
            },
            ..fig3(name, ActivationKind::tanh())
        },
        "fig3_clipped" => ExperimentConfig {
            thresholds: Thresholds {
                noise_trend: Some(Trend::Increasing),
                ..Thresholds::default()
            },
            ..fig3(name, clipped())
        },
        "fig4_top" => spectrum(name, NetworkConfig::new(vec![1.2, 0.6], tanh2()), false),
        "fig4_bottom" => spectrum(name, NetworkConfig::new(vec![0.7, 1.2], ActivationKind::Sign), false),
        "fig5" => spectrum(name, NetworkConfig::uniform(5, 1.0, ActivationKind::tanh()), true),
        "appE_deep_vs_wide" => deep_vs_wide(name, 4.0, APPE_MAX_M),
        "appE_deep_vs_wide_narrow" => deep_vs_wide(name, 1.0, APPE_MAX_M),
        "appE_bottleneck" => bottleneck(),
        _ => {
            return Err(HarnessError::UnknownPreset {
                name: name.into(),
                available: PRESETS.join(", "),
            })
        }
    };
    Ok(config)
}

/// Switches a preset to the dimensions and run counts of the original figures.
pub fn paper_scale(config: &mut ExperimentConfig) {
    let name = config.name.clone();
    if name.starts_with("appE_deep_vs_wide") {
        let gamma = config.learners[0].gammas[0];
        *config = ExperimentConfig {
            d: config.d,
            ..deep_vs_wide(&name, gamma, APPE_MAX_M_PAPER)
        };
        return;
    }
    if !name.starts_with("appE") {
        config.d = PAPER_D;
    }
    config.n_seeds = if name.starts_with("fig3") { 50 } else { 20 };
}
