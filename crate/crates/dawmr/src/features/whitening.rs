//! Contrast normalization and ZCA whitening of flattened patches.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Affine whitening transform `x -> W (x - mean)` with
/// `W = E diag((lambda + eps_zca)^(-1/2)) E^T` from the eigendecomposition of
/// the sample covariance. When `contrast_normalize` is set, each patch is
/// first mapped to `(x - mean(x)) / (std(x) + eps_cn)`, both during fitting
/// and on every apply. A disabled transform is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub enabled: bool,
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub matrix: Vec<f64>,
    pub epsilon_zca: f64,
    pub contrast_normalize: bool,
    pub epsilon_cn: f64,
}

impl WhiteningTransform {
    pub fn identity(dim: usize) -> WhiteningTransform {
        WhiteningTransform {
            enabled: false,
            dim,
            mean: Vec::new(),
            matrix: Vec::new(),
            epsilon_zca: 0.0,
            contrast_normalize: false,
            epsilon_cn: 0.0,
        }
    }

    pub fn apply(&self, patch: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; patch.len()];
        self.apply_into(patch, &mut out);
        out
    }

    pub(crate) fn apply_into(&self, patch: &[f32], out: &mut [f32]) {
        if !self.enabled {
            out.copy_from_slice(patch);
            return;
        }
        debug_assert_eq!(patch.len(), self.dim);
        let mut x: Vec<f64> = patch.iter().map(|&v| v as f64).collect();
        if self.contrast_normalize {
            contrast_normalize(&mut x, self.epsilon_cn);
        }
        for (v, m) in x.iter_mut().zip(&self.mean) {
            *v -= m;
        }
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            let acc: f64 = row.iter().zip(&x).map(|(w, v)| w * v).sum();
            *o = acc as f32;
        }
    }
}

fn contrast_normalize(x: &mut [f64], eps_cn: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_cn;
    for v in x.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

/// Fit a ZCA whitening transform on a patch sample.
pub fn fit_whitening(
    patches: &[Vec<f32>],
    epsilon_zca: f64,
    contrast: bool,
    epsilon_cn: f64,
) -> Result<WhiteningTransform> {
    let dim = patches.first().map(|p| p.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::InvalidArgument("whitening needs non-empty patches".into()));
    }
    if patches.len() < dim {
        return Err(Error::InvalidArgument(format!(
            "whitening needs at least dim={dim} patches for a well-conditioned covariance, got {}",
            patches.len()
        )));
    }
    let n = patches.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for p in patches {
        if p.len() != dim {
            return Err(Error::DimensionMismatch("inconsistent patch lengths".into()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite patch value".into()));
        }
        let mut x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        if contrast {
            contrast_normalize(&mut x, epsilon_cn);
        }
        rows.push(x);
    }

    let mut mean = vec![0f64; dim];
    for x in &rows {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = DVector::<f64>::zeros(dim);
    for x in &rows {
        for i in 0..dim {
            centered[i] = x[i] - mean[i];
        }
        // cov += c c^T
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= n as f64;

    let eig = cov.symmetric_eigen();
    let mut scale = eig.eigenvalues.clone();
    for v in scale.iter_mut() {
        *v = 1.0 / (v.max(0.0) + epsilon_zca).sqrt();
    }
    // W = E diag(scale) E^T
    let e = &eig.eigenvectors;
    let w = e * DMatrix::from_diagonal(&scale) * e.transpose();

    let mut matrix = vec![0f64; dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            matrix[r * dim + c] = w[(r, c)];
        }
    }
    Ok(WhiteningTransform {
        enabled: true,
        dim,
        mean,
        matrix,
        epsilon_zca,
        contrast_normalize: contrast,
        epsilon_cn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_patches(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Correlated coordinates so the covariance is far from identity.
        (0..n)
            .map(|_| {
                let base: f32 = rng.gen_range(-2.0..2.0);
                (0..dim)
                    .map(|j| base * (1.0 + j as f32 * 0.2) + rng.gen_range(-0.5..0.5))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn whitened_sample_has_identity_covariance() {
        let dim = 6;
        let patches = random_patches(4000, dim, 1);
        let t = fit_whitening(&patches, 0.0, false, 0.0).unwrap();
        let transformed: Vec<Vec<f32>> = patches.iter().map(|p| t.apply(p)).collect();
        let n = transformed.len() as f64;
        let mut mean = vec![0f64; dim];
        for x in &transformed {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for i in 0..dim {
            for j in 0..dim {
                let mut cov = 0f64;
                for x in &transformed {
                    cov += (x[i] as f64 - mean[i]) * (x[j] as f64 - mean[j]);
                }
                cov /= n;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov - expect).abs() < 1e-3,
                    "cov[{i}][{j}] = {cov}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn growing_regularizer_shrinks_output_monotonically() {
        let patches = random_patches(200, 4, 2);
        let probe = &patches[17];
        let mut last = f64::INFINITY;
        for eps in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let t = fit_whitening(&patches, eps, false, 0.0).unwrap();
            let y = t.apply(probe);
            let norm = y.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            assert!(norm < last, "eps={eps}: norm {norm} did not shrink from {last}");
            last = norm;
        }
    }

    #[test]
    fn disabled_transform_is_identity() {
        let t = WhiteningTransform::identity(5);
        let x = vec![1.0, -2.0, 3.0, 0.5, -0.25];
        assert_eq!(t.apply(&x), x);
    }

    #[test]
    fn requires_enough_patches() {
        let patches = random_patches(3, 8, 3);
        assert!(fit_whitening(&patches, 0.1, false, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut patches = random_patches(20, 4, 4);
        patches[5][2] = f32::NAN;
        assert!(fit_whitening(&patches, 0.1, false, 0.0).is_err());
    }
}
