//! Projection robust Wasserstein barycenters of discrete measures.
//!
//! Measures live in [`measures`]; [`entropic`] holds the regularized
//! objectives, their duals, IBP, and rounding; [`rbcd`] and [`rga`] are the
//! two solvers for the projected problem; [`gaussian`] supplies closed-form
//! ground truth; [`clustering`] builds free-support and D2-style clustering on
//! top.

pub mod clustering;
pub mod entropic;
pub mod error;
pub mod gaussian;
pub mod manifold;
pub mod measures;
pub mod rbcd;
pub mod rga;

pub use error::{PrwbError, Result};
