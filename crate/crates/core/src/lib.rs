//! Weakly supervised segmentation by cross-view feature consistency.
//!
//! Three independently parameterised residual branches produce class
//! activation maps (CAMs) from image-level labels. An attention matrix
//! computed from the middle branch's multi-scale features refines every
//! branch's CAM, and consistency losses tie the refined maps together.
//! The refined middle-branch CAM becomes the pseudo-mask.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
