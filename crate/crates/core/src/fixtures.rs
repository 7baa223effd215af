//! Deterministic toy inputs used by the tests, the acceptance suite and the
//! CLI's self-check runs.

use crate::backends::{GeneratorPort, ToyBackend};
use crate::domain::{Image, LatentCode};
use crate::error::Result;

/// Latent seeds of the bundled source/target pair.
pub const SOURCE_SEED: u64 = 3;
pub const TARGET_SEED: u64 = 15;

#[derive(Clone, Debug)]
pub struct ToyPair {
    pub source: Image,
    pub target: Image,
    pub w_source: LatentCode,
    pub w_target: LatentCode,
}

/// A generated image and its latent.
pub fn toy_image(backend: &ToyBackend, seed: u64, split: usize) -> Result<(Image, LatentCode)> {
    let w = backend.sample_latent(seed, split)?;
    Ok((backend.synthesize(&w)?, w))
}

/// The bundled source/target pair: distinct poses, both with a usable hair
/// region under the toy segmenter.
pub fn toy_pair(backend: &ToyBackend, split: usize) -> Result<ToyPair> {
    let (source, w_source) = toy_image(backend, SOURCE_SEED, split)?;
    let (target, w_target) = toy_image(backend, TARGET_SEED, split)?;
    Ok(ToyPair {
        source,
        target,
        w_source,
        w_target,
    })
}
