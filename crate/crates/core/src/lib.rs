//! Lagrangian drift simulation on planar periodic grids.
//!
//! The crate bundles a reference particle integrator, an Eulerian density
//! transport model, a small reverse-mode differentiation engine, the DriftNet
//! encoder/decoder with its training loop, trajectory metrics and
//! gradient-based retrieval of velocity anomalies.

pub mod autodiff;
pub mod driftnet;
pub mod error;
pub mod field;
pub mod fokkerplanck;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod lagrangian;
pub mod metrics;
pub mod par;
pub mod params;
pub mod plot;
pub mod selftest;
pub mod training;

pub use error::{DriftError, Result};
pub use field::VelocityField;
pub use grid::GridSpec;
pub use lagrangian::{Ensemble, Integrator, Point, Trajectory};
