//! Joint monocular depth estimation and semantic segmentation for aerial
//! image sequences.
//!
//! A shared pyramidal encoder feeds two decoders: a depth decoder that refines
//! parallax maps conditioned on camera motion and the previous frame, and a
//! single-image semantic decoder. The crate also provides the training losses,
//! evaluation metrics, a dataset pipeline and a ray-cast synthetic scene
//! generator.

pub mod autograd;
pub mod data;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use geometry::{CameraIntrinsics, DepthMap, LabelMap, ParallaxMap, Se3};
pub use tensor::Tensor;
