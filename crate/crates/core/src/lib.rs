//! Sensor localization from a partially observed, outlier-contaminated
//! squared Euclidean distance matrix.
//!
//! The pipeline alternates a closed-form distance completion step, a
//! coordinate update computed by training a small per-instance neural
//! network, and a soft-threshold outlier update. [`scene`] generates
//! synthetic benchmarks and [`eval`] scores recovered layouts after rigid
//! alignment.

pub mod cli;
pub mod edm;
pub mod error;
pub mod eval;
pub mod formats;
pub mod nn;
pub mod scene;
pub mod solver;

pub use edm::{
    apply_mask, check_edm_properties, complement_mask, edm_from_coords, frobenius_sq,
    CoordinateMatrix, EdmReport, ObservationMask, OutlierMatrix, SquaredDistanceMatrix,
};
pub use error::{Error, Result};
pub use scene::{Scene, SceneSpec};
pub use solver::{run_emdnl, run_mdnl, SolveResult, SolverConfig};
