//! Active scene reconstruction with a Gaussian-surfel map.
//!
//! The crate is organised around the mapping/planning loop:
//!
//! - [`scene`]: synthetic ground-truth world and a simulated RGB-D sensor.
//! - [`voxel`]: coarse log-odds occupancy grid, frontiers and the planning lattice.
//! - [`splat`]: 2D Gaussian surfels, the forward rasterizer, densification and pruning.
//! - [`train`]: photometric/geometric loss, analytic gradients and the optimizer.
//! - [`confidence`]: per-surfel confidence from the observing viewpoints.
//! - [`planner`]: candidate viewpoint sampling, utility, A* path cost and selection.
//! - [`metrics`]: PSNR and completeness on held-out views.
//! - [`mission`]: the closed loop, simulated time budget and file outputs.

pub mod camera;
pub mod confidence;
pub mod error;
pub mod image;
pub mod metrics;
pub mod mission;
pub mod planner;
pub mod rng;
pub mod scene;
pub mod splat;
pub mod train;
pub mod voxel;

pub use camera::{CameraIntrinsics, Pose};
pub use error::{Error, Result};
pub use image::ImageBuf;
pub use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3};
pub use scene::{GroundTruthScene, RgbdFrame};
pub use splat::{RenderedViews, SplatMap, Surfel};
pub use voxel::{VoxelMap, VoxelState};
