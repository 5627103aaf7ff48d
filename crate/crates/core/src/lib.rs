//! Multi-projection GANs for learning voxel shape distributions from
//! collections of unannotated silhouette images.
//!
//! The crate is organised bottom-up:
//!
//! - [`voxel`]: occupancy grids, symmetry mirroring and the `MPGVOXL1` format.
//! - [`projection`]: the differentiable silhouette renderer.
//! - [`nn`]: a small CPU training substrate (layers with explicit backward passes).
//! - [`nets`]: generator, shared-stem discriminator set and view classifier.
//! - [`gan`]: adversarial losses and the multi-projection training step.
//! - [`viewpoint`]: view bins, view classifier training and K-means view clustering.
//! - [`joint`]: the alternating view-prediction / GAN driver.
//! - [`datagen`]: procedural shape families and silhouette datasets.
//! - [`eval`]: FID over voxel features and view metrics.

pub mod checkpoint;
pub mod datagen;
mod error;
pub mod eval;
pub mod gan;
pub mod joint;
pub mod nets;
pub mod nn;
pub mod projection;
pub mod rng;
pub mod viewpoint;
pub mod voxel;

pub use error::{Error, Result};
