//! Generative separation of transmission and reflection layers at desk scale.
//!
//! The crate covers the full pipeline: procedural layered scenes, a
//! reflection-equivariant autoencoder, a rectified-flow denoiser conditioned
//! on a learnable task embedding, a small monocular depth regressor, and
//! depth-guided early-branching sampling, together with the metrics used to
//! evaluate them.

pub mod arrays;
pub mod checkpoint;
pub mod corpus;
pub mod debs;
pub mod denoiser;
pub mod depthnet;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod revae;
pub mod rng;
pub mod scene;
pub mod scorer;

pub use error::{Error, Result};
pub use image::{DepthMap, Image, Mask};
pub use scene::{blend, reflection_mask, synth_scene, LayeredSample, SceneParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
