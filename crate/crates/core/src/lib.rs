//! Multi-session mapping toolkit.
//!
//! Independently recorded SLAM sessions are merged into one frame with a
//! robust pose-graph optimizer, compared through occupancy-octree differencing
//! to keep a single latest map, and converted into traversability-scored
//! elevation maps on which a probabilistic roadmap plans paths.
//!
//! The geometry and optimization code is generic over the scalar type
//! ([`Real`], implemented for `f32` and `f64`); the aliases below fix it to
//! the common choices.

// `!(x > 0.0)` is how preconditions reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod change;
pub mod descriptor;
pub mod elevation;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod merge;
pub mod optimizer;
pub mod place;
pub mod planner;
pub mod ply;
pub mod scalar;
pub mod session;
pub mod synth;
pub mod util;

pub use geometry::{FrameId, PointCloud, Pose, Twist};
pub use scalar::Real;

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Twist64 = geometry::Twist<f64>;
pub type Twist32 = geometry::Twist<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type FactorGraph64 = optimizer::FactorGraph<f64>;
pub type FactorGraph32 = optimizer::FactorGraph<f32>;
