//! Pose estimation for objects resting on a known ground plane.
//!
//! - [`p1p`]: closed-form one-point solver from a keypoint, the 2D box and the ground pitch.
//! - [`ransac`]: adaptive n-point RANSAC hosting the one-point solver and a P3P baseline.
//! - [`refine`]: Gauss–Newton, Tukey IRLS and the hierarchical robust pose/shape estimator.
//! - [`synthbench`]: synthetic scenes, error metrics and the experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod error;
pub mod geometry;
pub mod p1p;
pub mod ransac;
pub mod refine;
pub mod synthbench;

pub use error::{PoseError, Result};
pub use geometry::{GroundFrame, Intrinsics, Pose, Rotation};
pub use p1p::{BoundingBox2D, BoundingBox3D, CaseId};
pub use ransac::{Correspondence, CorrespondenceSet, GroundScene, RansacConfig, RansacResult};
pub use refine::{RefineResult, RobustConfig, ShapeCoeffs, ShapeModel};
