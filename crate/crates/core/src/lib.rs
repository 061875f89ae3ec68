//! Asymptotic and simulated learning curves for regression and classification
//! on the features of deep random networks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod arch;
pub mod error;
pub mod lincov;
pub mod matrix_io;
pub mod quadrature;
pub mod ridge;
pub mod rmt;
pub mod rng;
pub mod saddle;
pub mod sim;

pub use activation::{center_activation, ActivationKind};
pub use arch::{compute_coefficients, sample_network, ArchitectureSpec, GECoefficients, SampledNetwork};
pub use error::{DrfError, Result};
