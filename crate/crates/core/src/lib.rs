//! Functional convolution model toolkit: ordinary least squares estimation of
//! lag kernels from gridded functional data, and diagnostics for whether a
//! covariate design identifies those kernels.

pub mod designs;
pub mod downsample;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod grids;
pub mod identifiability;
pub mod manifest;
pub mod model;

pub use error::{FcmError, Result};
pub use grids::GridFunction;
pub use model::{CoefficientSet, Design, Observation};
