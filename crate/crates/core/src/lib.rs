//! Pose-invariant hairstyle transfer by latent optimization.
//!
//! Given a source portrait and a portrait carrying the desired hairstyle the
//! pipeline runs four stages over a style-based generator:
//!
//! 1. [`embedding`]: invert both images to W+ codes and the source to FS space.
//! 2. [`alignment`]: re-pose the target code's coarse layers to the source
//!    face while local hair texture is preserved region by region
//!    ([`superpixels`], [`losses`]).
//! 3. [`inpainting`]: fill the source regions uncovered by removing its hair.
//! 4. [`blending`]: learn a blending weight and compose the final F tensor.
//!
//! All neural components sit behind the ports in [`backends`]; the bundled
//! toy backend makes every stage runnable and gradient-checkable on a CPU.

pub mod alignment;
pub mod backends;
pub mod blending;
pub mod domain;
pub mod embedding;
pub mod error;
pub mod fixtures;
pub mod inpainting;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod superpixels;

pub use error::{Error, Result};
