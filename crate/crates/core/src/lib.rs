//! Volumetric age-regression pipeline.
//!
//! The crate covers the full desk-scale workflow: synthetic body phantoms with
//! planted aging anatomy, a small 3D residual CNN trained to regress age,
//! Grad-CAM importance volumes extracted at the third stage, affine and
//! deformable registration of all subjects in a group to a common target, and
//! voxel-wise aggregation of the warped importance maps into per-group
//! importance atlases with bias-corrected metric reports.

pub mod analysis;
pub mod atlas;
pub mod autodiff;
pub mod baseline25d;
pub mod error;
pub mod gradcam;
pub mod manifest;
pub mod model;
pub mod phantom;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume3;
