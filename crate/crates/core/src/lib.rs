//! Doubly robust difference-in-differences estimation of the average effect
//! of a continuous treatment dose on the treated, with lasso nuisance models,
//! cross-fitting and multiplier-bootstrap inference.
//!
//! The usual entry points are [`estimate_rcs`] for repeated cross-sections
//! and [`estimate_panel`] for two-period panels.

pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernel;
pub mod nuisance;
pub mod simulation;
pub mod util;

pub use data::{validate_panel, validate_rcs, EstimandSpec, EstimationConfig, PanelSample, RawTable, RepeatedCrossSectionSample};
pub use error::{Error, Result};
pub use estimator::{estimate_panel, estimate_rcs, AtetEstimate, Fit};
pub use inference::{multiplier_bootstrap, MultiplierLaw};
pub use kernel::{KernelFamily, KernelSpec};
pub use nuisance::DensityFamily;
pub use util::derive_seed;
