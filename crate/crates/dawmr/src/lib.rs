//! Deep And Wide Multiscale Recursive (DAWMR) networks for 3d image labeling.
//!
//! The crate implements the full pipeline for voxel-affinity boundary
//! prediction: unsupervised dictionary-based feature extraction (OMP-1 or
//! K-means vector quantization with foveated or receptive-field assembly),
//! a dropout-regularized multilayer perceptron over the three affinity
//! edges at each voxel, recursive stacking where each stage consumes the
//! previous stage's affinity output alongside the raw image, local-error-
//! density (LED) example reweighting, and affinity-graph segmentation with
//! Rand-Index evaluation.
//!
//! Start with the `examples/` directory for runnable end-to-end walkthroughs
//! of each capability, or use the thin `dawmr` binary which drives the same
//! entry points from a text config.

pub mod config;
mod error;
pub mod features;
pub mod metrics;
pub mod mlp;
pub mod pipeline;
pub mod segmentation;
pub mod volume;

pub use error::{Error, Result};

/// Public handle on the per-stage seed derivation, so external drivers can
/// reproduce the pipeline's deterministic streams.
pub fn seed_for_stage(base: u64, iteration: u64, tag: &str) -> u64 {
    derive_seed(base, iteration, tag)
}

/// Mix a stage tag into a base seed so that every randomized stage of a run
/// draws from its own deterministic stream.
pub(crate) fn derive_seed(base: u64, iteration: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then splitmix64 finalization.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut x = base ^ h.wrapping_add(iteration.wrapping_mul(0x9e3779b97f4a7c15));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
