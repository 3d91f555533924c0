//! Self-supervised monocular depth estimation for indoor scenes.
//!
//! Depth is factorized into a bounded relative map times a learned global
//! scale, relative camera motion is refined by iterative residual pose
//! estimates, and everything is trained from view-synthesis losses alone.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod factorization;
pub mod frame;
pub mod geometry;
pub mod kv;
pub mod losses;
pub mod nn;
pub mod pose;
pub mod training;

pub use error::{Error, Result};
pub use frame::{DepthMap, ImageFrame, Map2};
