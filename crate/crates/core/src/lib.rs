//! Universal adversarial mesh synthesis against a cascaded camera → LiDAR
//! 3D car detector.
//!
//! A single triangle mesh (per-vertex displacements plus per-vertex colors)
//! is placed on the roof of every car in a scene, ray-cast into the LiDAR
//! sweep and rasterized into the camera image. Both renderers expose
//! hand-derived adjoints so the mesh can be optimized against the victim's
//! segmentation and objectness outputs.
//!
//! Module map:
//! - [`geometry`]: meshes, icospheres, placement, Laplacian smoothness, PLY/OBJ.
//! - [`diffcore`]: parameter blocks, ADAM, finite-difference checks, checkpoints.
//! - [`lidar`]: beam-pattern ray casting with Möller–Trumbore and its adjoint.
//! - [`raster`]: pinhole projection and z-buffered vertex-color rasterization.
//! - [`victim`]: the desk-scale cascaded detector and its training loop.
//! - [`attack`]: attack objectives and the two-phase universal optimizer.
//! - [`dataio`]: KITTI-format I/O and synthetic scene generation.
//! - [`eval`]: rotated IoU, average precision and attack tables.
//! - [`pipeline`]: run configuration and the end-to-end commands used by the CLI.

pub mod attack;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lidar;
pub mod pipeline;
pub mod raster;
pub mod victim;

pub use error::{Error, Result};

/// 3D vector in meters; all geometry is carried in f64.
pub type Vec3 = nalgebra::Vector3<f64>;
