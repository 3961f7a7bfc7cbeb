//! Numerics for the multi-species Sherrington-Kirkpatrick spin glass with a
//! centered Gaussian external field.
//!
//! The crate covers the replica-symmetric fixed point and its stability
//! (de Almeida-Thouless) criterion, discrete Parisi functionals with exact
//! gradients, two-replica Guerra-Talagrand bounds, exact enumeration of small
//! systems, and parameter sweeps over the phase diagram.
//!
//! Conventions used throughout:
//!
//! * `lambda` holds the species ratios, `delta2` the symmetric matrix of
//!   interaction variances and `tau2` the external-field variances.
//! * Every expectation is over standard Gaussians and is computed by the
//!   deterministic quadrature configured in [`gauss::QuadratureSpec`].
//! * Vectors indexed by species are plain `Vec<f64>` / `&[f64]`.

pub mod error;
pub mod finite_n;
pub mod fixedpoint;
pub mod gauss;
pub mod gtbound;
pub mod model;
pub mod parisi;
pub mod rs_at;
pub mod special;
pub mod sweep;

pub use error::{MskError, Result};
