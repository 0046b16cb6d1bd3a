//! Feature encoders over a learned dictionary.

use crate::{Error, Result};

use super::dictionary::Dictionary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMethod {
    /// `f = [max(0, D^T x - alpha) ; max(0, -D^T x - alpha)]`, length `2k`.
    SoftThresholdPolarity,
    /// Triangle activation `f_j = max(0, mean(z) - z_j)` over the distances
    /// `z_j = ||x - c_j||` to the raw centroids, length `k`.
    TriangleKmeans,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub method: EncoderMethod,
    /// Soft threshold; unused by the triangle encoder.
    pub alpha: f32,
}

impl EncoderConfig {
    pub fn soft_threshold(alpha: f32) -> EncoderConfig {
        EncoderConfig { method: EncoderMethod::SoftThresholdPolarity, alpha }
    }

    pub fn triangle() -> EncoderConfig {
        EncoderConfig { method: EncoderMethod::TriangleKmeans, alpha: 0.0 }
    }

    pub fn encoding_dim(&self, k: usize) -> usize {
        match self.method {
            EncoderMethod::SoftThresholdPolarity => 2 * k,
            EncoderMethod::TriangleKmeans => k,
        }
    }
}

/// Encode one (already whitened, if applicable) patch.
pub fn encode(dict: &Dictionary, config: &EncoderConfig, patch: &[f32]) -> Result<Vec<f32>> {
    let mut out = vec![0f32; config.encoding_dim(dict.k())];
    encode_into(dict, config, patch, &mut out)?;
    Ok(out)
}

pub(crate) fn encode_into(
    dict: &Dictionary,
    config: &EncoderConfig,
    patch: &[f32],
    out: &mut [f32],
) -> Result<()> {
    if patch.len() != dict.dim() {
        return Err(Error::DimensionMismatch(format!(
            "patch length {} != dictionary dim {}",
            patch.len(),
            dict.dim()
        )));
    }
    debug_assert_eq!(out.len(), config.encoding_dim(dict.k()));
    let k = dict.k();
    match config.method {
        EncoderMethod::SoftThresholdPolarity => {
            let alpha = config.alpha;
            for j in 0..k {
                let z = dot(dict.atom(j), patch);
                out[j] = (z - alpha).max(0.0);
                out[k + j] = (-z - alpha).max(0.0);
            }
        }
        EncoderMethod::TriangleKmeans => {
            let centroids = dict.centroids().ok_or_else(|| {
                Error::InvalidArgument(
                    "triangle encoding requires a kmeans dictionary with raw centroids".into(),
                )
            })?;
            let dim = dict.dim();
            let mut mean = 0f32;
            for j in 0..k {
                let c = &centroids[j * dim..(j + 1) * dim];
                let mut acc = 0f32;
                for (&cv, &pv) in c.iter().zip(patch) {
                    let d = cv - pv;
                    acc += d * d;
                }
                let z = acc.sqrt();
                out[j] = z;
                mean += z;
            }
            mean /= k as f32;
            for v in out.iter_mut() {
                *v = (mean - *v).max(0.0);
            }
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
