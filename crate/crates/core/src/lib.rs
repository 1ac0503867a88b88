//! Arbitrary-ratio reduction of inter-slice spacing for 3D grayscale volumes.
//!
//! A single model reconstructs intermediate slices at any integer ratio `k`:
//! an EDSR-style 3D encoder turns the LR volume into per-voxel latent codes,
//! codes are sampled trilinearly at continuous query coordinates, refined by
//! local-aware spatial attention over the two bracketing slices, and decoded
//! by an MLP into a residual that is added to the trilinearly interpolated
//! input intensity.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod gradcheck;
pub mod lasa;
pub mod model;
mod ops;
pub mod optim;
pub mod sampler;
pub mod synthetic;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use feature::FeatureVolume;
pub use model::{Model, ModelConfig, Prediction};
pub use volume::{PatchPair, PatchShape, QueryPoint, Volume};
