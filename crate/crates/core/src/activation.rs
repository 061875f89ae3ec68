//! Pointwise activations.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DrfError, Result};
use crate::quadrature::GaussianQuadrature;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied activation.
#[derive(Clone)]
pub struct CustomActivation {
    pub name: String,
    pub func: ScalarFn,
    pub lipschitz: bool,
    /// Points where the function is not smooth; routed to the piecewise rule.
    pub breakpoints: Vec<f64>,
}

#[derive(Clone)]
pub enum ActivationKind {
    Identity,
    /// `tanh(a x)`
    TanhScaled(f64),
    Erf,
    Sign,
    /// `slope · sign(x) · min(clip, |x|)`
    ClippedLinear { slope: f64, clip: f64 },
    Custom(CustomActivation),
    /// `inner(x) - shift`, produced by [`center_activation`].
    Shifted { inner: Box<ActivationKind>, shift: f64 },
}

impl ActivationKind {
    pub fn tanh() -> Self {
        ActivationKind::TanhScaled(1.0)
    }

    pub fn relu() -> Self {
        ActivationKind::Custom(CustomActivation {
            name: "relu".into(),
            func: Arc::new(|x: f64| x.max(0.0)),
            lipschitz: true,
            breakpoints: vec![0.0],
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::TanhScaled(a) => (a * x).tanh(),
            ActivationKind::Erf => libm::erf(x),
            ActivationKind::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ActivationKind::ClippedLinear { slope, clip } => slope * x.clamp(-clip, *clip),
            ActivationKind::Custom(c) => (c.func)(x),
            ActivationKind::Shifted { inner, shift } => inner.eval(x) - shift,
        }
    }

    pub fn is_lipschitz(&self) -> bool {
        match self {
            ActivationKind::Sign => false,
            ActivationKind::Custom(c) => c.lipschitz,
            ActivationKind::Shifted { inner, .. } => inner.is_lipschitz(),
            _ => true,
        }
    }

    /// Odd activations have zero Gaussian mean at every variance.
    pub fn is_odd(&self) -> bool {
        !matches!(
            self,
            ActivationKind::Custom(_) | ActivationKind::Shifted { .. }
        )
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            ActivationKind::Sign => vec![0.0],
            ActivationKind::ClippedLinear { clip, .. } => vec![-clip, *clip],
            ActivationKind::Custom(c) => c.breakpoints.clone(),
            ActivationKind::Shifted { inner, .. } => inner.breakpoints(),
            _ => Vec::new(),
        }
    }

    /// Distance from the real axis to the nearest complex singularity;
    /// `None` when the activation is entire or only piecewise smooth.
    pub fn analytic_radius(&self) -> Option<f64> {
        match self {
            ActivationKind::TanhScaled(a) => Some(std::f64::consts::FRAC_PI_2 / a.abs()),
            ActivationKind::Shifted { inner, .. } => inner.analytic_radius(),
            _ => None,
        }
    }

    /// `E_{ξ~N(0,variance)}[g(σ(ξ), ξ)]` with the rule appropriate for this activation.
    pub fn gaussian_expect(&self, variance: f64, g: impl Fn(f64, f64) -> f64) -> Result<f64> {
        GaussianQuadrature::shared().expect(
            &self.to_string(),
            variance,
            &self.breakpoints(),
            self.analytic_radius(),
            |x| g(self.eval(x), x),
        )
    }
}

/// Returns `σ(x) − E_{ξ~N(0,r)}[σ(ξ)]`; odd activations come back unchanged.
pub fn center_activation(kind: &ActivationKind, r: f64) -> Result<ActivationKind> {
    if !(r > 0.0) {
        return Err(DrfError::Config(format!(
            "centering variance must be positive, got {r}"
        )));
    }
    let mean = kind.gaussian_expect(r, |s, _| s)?;
    if kind.is_odd() || mean.abs() < 1e-15 {
        return Ok(kind.clone());
    }
    Ok(match kind {
        ActivationKind::Shifted { inner, shift } => ActivationKind::Shifted {
            inner: inner.clone(),
            shift: shift + mean,
        },
        other => ActivationKind::Shifted {
            inner: Box::new(other.clone()),
            shift: mean,
        },
    })
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Identity => write!(f, "identity"),
            ActivationKind::TanhScaled(a) if *a == 1.0 => write!(f, "tanh"),
            ActivationKind::TanhScaled(a) => write!(f, "tanh_scaled({a})"),
            ActivationKind::Erf => write!(f, "erf"),
            ActivationKind::Sign => write!(f, "sign"),
            ActivationKind::ClippedLinear { slope, clip } => {
                write!(f, "clipped_linear({slope},{clip})")
            }
            ActivationKind::Custom(c) => write!(f, "{}", c.name),
            ActivationKind::Shifted { inner, shift } => write!(f, "centered({inner},{shift})"),
        }
    }
}

impl fmt::Debug for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl PartialEq for ActivationKind {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

fn parse_args(s: &str) -> Option<(&str, Vec<f64>)> {
    match s.find('(') {
        None => Some((s, Vec::new())),
        Some(open) => {
            let inner = s[open + 1..].strip_suffix(')')?;
            let args = inner
                .split(',')
                .map(|a| a.trim().parse::<f64>().ok())
                .collect::<Option<Vec<_>>>()?;
            Some((&s[..open], args))
        }
    }
}

impl FromStr for ActivationKind {
    type Err = DrfError;

    /// Accepts `identity`, `tanh`, `tanh_scaled(a)`, `erf`, `sign`, `relu`
    /// and `clipped_linear(slope,clip)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DrfError::Config(format!("unknown activation '{s}'"));
        let (name, args) = parse_args(s.trim()).ok_or_else(bad)?;
        match (name, args.as_slice()) {
            ("identity" | "linear", []) => Ok(ActivationKind::Identity),
            ("tanh", []) => Ok(ActivationKind::tanh()),
            ("tanh" | "tanh_scaled", [a]) => Ok(ActivationKind::TanhScaled(*a)),
            ("erf", []) => Ok(ActivationKind::Erf),
            ("sign", []) => Ok(ActivationKind::Sign),
            ("relu", []) => Ok(ActivationKind::relu()),
            ("clipped_linear", [slope, clip]) if *clip > 0.0 => Ok(ActivationKind::ClippedLinear {
                slope: *slope,
                clip: *clip,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn odd_activations_are_left_alone() {
        let c = center_activation(&ActivationKind::tanh(), 1.0).unwrap();
        assert_eq!(c, ActivationKind::tanh());
        let c = center_activation(&ActivationKind::Identity, 3.0).unwrap();
        assert_eq!(c, ActivationKind::Identity);
    }

    #[test]
    fn relu_is_centered_by_half_gaussian_mean() {
        for &r in &[1.0, 0.4, 2.0] {
            let c = center_activation(&ActivationKind::relu(), r).unwrap();
            let expected = (r / (2.0 * PI)).sqrt();
            assert!((c.eval(1.0) - (1.0 - expected)).abs() < 1e-12);
            let mean = c.gaussian_expect(r, |s, _| s).unwrap();
            assert!(mean.abs() < 1e-12, "residual mean {mean}");
        }
    }

    #[test]
    fn centering_twice_keeps_a_single_shift() {
        let once = center_activation(&ActivationKind::relu(), 1.0).unwrap();
        let twice = center_activation(&once, 1.0).unwrap();
        assert!((once.eval(0.3) - twice.eval(0.3)).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonpositive_variance() {
        assert!(center_activation(&ActivationKind::tanh(), 0.0).is_err());
    }

    #[test]
    fn string_forms_round_trip() {
        for s in [
            "identity",
            "tanh",
            "tanh_scaled(2)",
            "erf",
            "sign",
            "clipped_linear(1.1,2)",
        ] {
            let a: ActivationKind = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert!("softplus".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn clipped_linear_matches_formula() {
        let a = ActivationKind::ClippedLinear {
            slope: 1.1,
            clip: 2.0,
        };
        assert!((a.eval(3.0) - 2.2).abs() < 1e-15);
        assert!((a.eval(-0.5) + 0.55).abs() < 1e-15);
        assert!(!ActivationKind::Sign.is_lipschitz());
    }
}
