//! Per-dimension feature standardization fitted on a training sample.

use crate::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f32 = 1e-6;

/// Maps `h' = (h - mean) / std` with the stored std floored at `sigma_min`,
/// so constant dimensions map to zero instead of blowing up.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNormalizer {
    mean: Vec<f32>,
    std: Vec<f32>,
    sigma_min: f32,
}

impl FeatureNormalizer {
    pub fn new(mean: Vec<f32>, std: Vec<f32>, sigma_min: f32) -> Result<FeatureNormalizer> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch("mean/std length mismatch".into()));
        }
        if sigma_min <= 0.0 || sigma_min.is_nan() {
            return Err(Error::InvalidArgument("sigma_min must be > 0".into()));
        }
        if std.iter().any(|&s| s < sigma_min) {
            return Err(Error::InvalidArgument("stored std below sigma_min".into()));
        }
        Ok(FeatureNormalizer { mean, std, sigma_min })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn sigma_min(&self) -> f32 {
        self.sigma_min
    }

    pub fn apply(&self, features: &[f32]) -> Vec<f32> {
        let mut out = features.to_vec();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, features: &mut [f32]) {
        debug_assert_eq!(features.len(), self.dim());
        for ((v, &m), &s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Fit per-dimension mean and population standard deviation over `rows`.
pub fn fit_normalizer(rows: &[&[f32]], sigma_min: f32) -> Result<FeatureNormalizer> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalizer needs at least 2 sample rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch("inconsistent feature lengths".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0f64; dim];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(*row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0f64; dim];
    for row in rows {
        for ((s, &v), &m) in var.iter_mut().zip(*row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&s| ((s / n).sqrt() as f32).max(sigma_min))
        .collect();
    FeatureNormalizer::new(mean.iter().map(|&m| m as f32).collect(), std, sigma_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalizing_the_fit_sample_standardizes_it() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f32>> =
            (0..500).map(|_| (0..8).map(|_| rng.gen_range(-3.0..9.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = fit_normalizer(&refs, DEFAULT_SIGMA_MIN).unwrap();
        let transformed: Vec<Vec<f32>> = rows.iter().map(|r| norm.apply(r)).collect();
        for j in 0..8 {
            let mean: f64 =
                transformed.iter().map(|r| r[j] as f64).sum::<f64>() / transformed.len() as f64;
            let var: f64 = transformed.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>()
                / transformed.len() as f64;
            assert!(mean.abs() < 1e-6, "dim {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "dim {j} std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let rows = vec![vec![5.0f32, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = fit_normalizer(&refs, DEFAULT_SIGMA_MIN).unwrap();
        for r in &rows {
            let t = norm.apply(r);
            assert_eq!(t[0], 0.0);
            assert!(t[0].is_finite() && t[1].is_finite());
        }
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f32>> =
            (0..1000).map(|_| (0..16).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = fit_normalizer(&refs, DEFAULT_SIGMA_MIN).unwrap();
        for j in 0..16 {
            let mean: f64 = rows.iter().map(|r| r[j] as f64).sum::<f64>() / 1000.0;
            let var: f64 =
                rows.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>() / 1000.0;
            assert!((norm.mean()[j] as f64 - mean).abs() < 1e-6);
            assert!((norm.std()[j] as f64 - var.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert!(fit_normalizer(&[], DEFAULT_SIGMA_MIN).is_err());
        let one = vec![1.0f32, 2.0];
        assert!(fit_normalizer(&[one.as_slice()], DEFAULT_SIGMA_MIN).is_err());
    }
}
