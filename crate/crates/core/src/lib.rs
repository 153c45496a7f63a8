//! Near-field channel estimation and single-anchor localization behind a
//! stacked intelligent metasurface (SIM).
//!
//! The crate covers the whole chain: array geometry and channel statistics,
//! a multiport impedance model of the metasurface with gradient-based
//! configuration, reduced-subspace channel estimators with their analytic
//! error covariances, mismatch and Fisher-information bounds, a grid-search
//! localizer, and a configuration-driven experiment harness.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod localizer;
pub mod matio;
pub mod multiport;
pub mod rng;
pub mod simopt;

pub use error::{Error, Result};
