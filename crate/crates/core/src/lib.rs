//! Dense RGB-D SLAM on a 3D Gaussian-splat map with dynamic-object filtering.
//!
//! The pipeline tracks each frame against the splat map under a segmentation
//! and coverage mask, registers keyframes by Gaussian covisibility, re-admits
//! past keyframes into the optimization window when the current view sees
//! their Gaussians again, and jointly refines keyframe poses and the map under
//! a photometric outlier mask.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod keyframe;
pub mod map;
pub mod mapper;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod robust;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{CameraPose, Intrinsics, Twist};
pub use render::{Gaussian3D, RenderOutput};
