//! Non-rigid registration of 3D surfaces.
//!
//! The pipeline normalizes a source/target pair, roughly aligns them with an
//! embedded deformation graph ([`coarse`]), then refines per-point positions
//! and rotations by alternating closest-point updates, a sparse linear solve
//! and a majorization-minimization rotation step ([`fine`]). Alignment is
//! measured with a robustly weighted symmetrized point-to-plane residual and
//! regularized by an as-rigid-as-possible term ([`energy`]).
//!
//! ```
//! use nrr_core::scenario::{generate_scenario, ScenarioKind, SyntheticScenario};
//! use nrr_core::pipeline::{register, PipelineOptions};
//!
//! let spec = SyntheticScenario::new(ScenarioKind::BentPlane, 12, 10.0, 0.0, 7);
//! let (source, target, _truth) = generate_scenario(&spec).unwrap();
//! let result = register(&source, &target, &PipelineOptions::default()).unwrap();
//! assert_eq!(result.deformed.len(), source.len());
//! ```

// `!(x > 0.0)` is used on purpose so NaN fails the check; numeric kernels
// index several arrays in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coarse;
pub mod config;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod fine;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod pipeline;
pub mod rotation;
pub mod scenario;
pub mod sparse;
pub mod variants;

pub use error::{Error, Result};
pub use geometry::Surface;

/// Column vector in model space.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix (rotations, covariances, affine parts).
pub type Mat3 = nalgebra::Matrix3<f64>;
