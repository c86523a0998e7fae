//! Rigid registration of depth-camera facial point clouds to CT-derived
//! skin surfaces.
//!
//! The pipeline lifts 2D facial landmarks into sparse 3D keypoint clouds on
//! both sides, aligns those with a coarse ICP pass, then refines on the full
//! segmented clouds with a fine ICP pass.

pub mod bench;
pub mod depth;
pub mod error;
pub mod geometry;
pub mod index;
pub mod keypoints;
pub mod pgm;
pub mod ply;
pub mod registration;
pub mod surface;

pub use error::{Error, Result};
pub use geometry::{apply_transform, estimate_rigid, Point3, PointCloud, RigidTransform, Vec3};
pub use index::{NeighborIndex, Neighbor};
