//! Continuous novel-view synthesis from a single image.
//!
//! A source image is encoded into a set of latent 3D points, the points are
//! moved rigidly by the requested camera motion, and the decoder predicts a
//! depth map in the target view. Projecting that depth into the source view
//! gives backward correspondences, and bilinear sampling pulls source colors
//! into the target frame. Every stage is differentiable, so the model trains
//! from image pairs and their relative pose alone.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod scenes;
pub mod tae;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, FlowField, RigidTransform};
pub use image::Image;
pub use tae::{LatentPointSet, Model, TaeConfig, Variant};
