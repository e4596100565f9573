//! Monocular Gaussian-splatting SLAM at desk scale.
//!
//! The engine couples a sparse patch-based visual-odometry frontend with a
//! dense 3D-Gaussian map backend. Depth priors supervise map geometry, and a
//! sparse-dense adjustment ring keeps the two representations on one scale:
//! priors are aligned to the sparse map's statistics, the aligned depth seeds
//! new Gaussians, and rendered map depth initializes new sparse patches.
//!
//! Modules mirror the system's dataflow:
//!
//! - [`geom`]: SE(3) poses, pinhole cameras, patch reprojection
//! - [`gaussian_map`]: the Gaussian primitive set and its maintenance
//! - [`rasterizer`]: differentiable forward/backward splatting
//! - [`losses`]: mapping objective terms and the combined loss
//! - [`depth_prior`]: dense depth maps, prior providers, quality metrics
//! - [`frontend`]: patch graph and sliding-window bundle adjustment
//! - [`sdar`]: prior alignment, seeding, and scale closure
//! - [`backend`]: keyframing, joint map+pose optimization
//! - [`eval`]: trajectory and image-quality metrics
//! - [`synthetic`], [`dataset`], [`config`], [`pipeline`]: scenes, TUM I/O,
//!   run configuration, and end-to-end orchestration

pub mod color_image;
pub mod config;
pub mod dataset;
pub mod depth_prior;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gaussian_map;
pub mod geom;
pub mod losses;
pub mod pipeline;
pub mod rasterizer;
pub mod sdar;
pub mod synthetic;

pub mod backend;

pub use error::{Error, Result};
