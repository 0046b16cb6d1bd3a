//! Synthetic desk-scale volumes: a Voronoi partition with eroded cell
//! boundaries, rendered as a bright-interior / dark-boundary image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

use super::{Dims, SegmentationVolume, Volume, VoxelCoord};

pub const INTERIOR_INTENSITY: f32 = 200.0;
pub const BOUNDARY_INTENSITY: f32 = 40.0;

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub num_seeds: usize,
    /// Voxels within this euclidean distance of a differently-labeled voxel
    /// become background.
    pub boundary_width: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams { num_seeds: 8, boundary_width: 1.0, noise_sigma: 20.0, blur_sigma: 1.0 }
    }
}

/// Generate a `(image, segmentation)` pair from a seeded Voronoi partition.
///
/// Seed points are placed uniformly; every voxel takes the id of its nearest
/// seed (ties to the lower id), then voxels within `boundary_width` of a
/// differently-labeled voxel are cleared to background. The image renders
/// interiors bright and boundaries dark, then applies a separable gaussian
/// blur and i.i.d. gaussian noise. Pure function of `(dims, params, seed)`.
pub fn generate_synthetic(
    dims: Dims,
    params: &SyntheticParams,
    seed: u64,
) -> Result<(Volume, SegmentationVolume)> {
    let v = generate_synthetic_detailed(dims, params, seed)?;
    Ok((v.image, v.segmentation))
}

/// Generator output plus the Voronoi seed points it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    pub image: Volume,
    pub segmentation: SegmentationVolume,
    pub seed_points: Vec<VoxelCoord>,
}

/// Like [`generate_synthetic`], also returning the seed points.
pub fn generate_synthetic_detailed(
    dims: Dims,
    params: &SyntheticParams,
    seed: u64,
) -> Result<SyntheticVolume> {
    if dims.x < 8 || dims.y < 8 || dims.z < 8 {
        return Err(Error::InvalidArgument(format!("dims must be at least 8 per axis, got {dims}")));
    }
    if params.num_seeds == 0 {
        return Err(Error::InvalidArgument("num_seeds must be >= 1".into()));
    }
    if params.num_seeds > dims.voxels() {
        return Err(Error::InvalidArgument("more seeds than voxels".into()));
    }
    if params.noise_sigma < 0.0 || params.blur_sigma < 0.0 || params.boundary_width < 0.0 {
        return Err(Error::InvalidArgument("sigma and width parameters must be >= 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<VoxelCoord> = Vec::with_capacity(params.num_seeds);
    while seeds.len() < params.num_seeds {
        let p = VoxelCoord::new(
            rng.gen_range(0..dims.x),
            rng.gen_range(0..dims.y),
            rng.gen_range(0..dims.z),
        );
        if !seeds.contains(&p) {
            seeds.push(p);
        }
    }

    let raw = nearest_seed_labels(dims, &seeds);
    let mut ids = raw.clone();
    if params.boundary_width > 0.0 {
        let offsets = ball_offsets(params.boundary_width);
        for v in dims.iter() {
            let me = raw[dims.linear(v)];
            let boundary = offsets.iter().any(|&(dx, dy, dz)| {
                let x = v.x as isize + dx;
                let y = v.y as isize + dy;
                let z = v.z as isize + dz;
                if x < 0 || y < 0 || z < 0 {
                    return false;
                }
                let u = VoxelCoord::new(x as usize, y as usize, z as usize);
                dims.contains(u) && raw[dims.linear(u)] != me
            });
            if boundary {
                ids[dims.linear(v)] = 0;
            }
        }
    }
    let seg = SegmentationVolume::new(dims, ids)?;

    let mut image = Volume::zeros(dims, 1);
    for (i, value) in image.data_mut().iter_mut().enumerate() {
        *value = if seg.ids()[i] == 0 { BOUNDARY_INTENSITY } else { INTERIOR_INTENSITY };
    }
    if params.blur_sigma > 0.0 {
        image = gaussian_blur(&image, params.blur_sigma);
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, params.noise_sigma).expect("validated sigma");
        for value in image.data_mut() {
            *value += normal.sample(&mut rng) as f32;
        }
    }
    Ok(SyntheticVolume { image, segmentation: seg, seed_points: seeds })
}

/// Ids are `seed index + 1`; ties go to the lower index.
fn nearest_seed_labels(dims: Dims, seeds: &[VoxelCoord]) -> Vec<u32> {
    let mut ids = vec![0u32; dims.voxels()];
    for v in dims.iter() {
        let mut best = usize::MAX;
        let mut best_d = u64::MAX;
        for (i, s) in seeds.iter().enumerate() {
            let dx = v.x.abs_diff(s.x) as u64;
            let dy = v.y.abs_diff(s.y) as u64;
            let dz = v.z.abs_diff(s.z) as u64;
            let d = dx * dx + dy * dy + dz * dz;
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        ids[dims.linear(v)] = (best + 1) as u32;
    }
    ids
}

fn ball_offsets(radius: f64) -> Vec<(isize, isize, isize)> {
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                if ((dx * dx + dy * dy + dz * dz) as f64) <= r2 {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Separable gaussian blur with edge replication, single channel.
pub fn gaussian_blur(vol: &Volume, sigma: f64) -> Volume {
    debug_assert_eq!(vol.channels(), 1);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let dims = vol.dims();
    let pass = |src: &Volume, axis: usize| -> Volume {
        let mut out = Volume::zeros(dims, 1);
        let extent = [dims.x, dims.y, dims.z][axis];
        for v in dims.iter() {
            let center = [v.x, v.y, v.z][axis] as isize;
            let mut acc = 0.0f64;
            for (ki, k) in kernel.iter().enumerate() {
                let p = (center + ki as isize - radius).clamp(0, extent as isize - 1) as usize;
                let mut u = v;
                match axis {
                    0 => u.x = p,
                    1 => u.y = p,
                    _ => u.z = p,
                }
                acc += k * src.value(u) as f64;
            }
            out.set(v.x, v.y, v.z, 0, acc as f32);
        }
        out
    };
    let bx = pass(vol, 0);
    let by = pass(&bx, 1);
    pass(&by, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_no_erosion_fills_the_volume() {
        let params = SyntheticParams {
            num_seeds: 1,
            boundary_width: 0.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        };
        let (_, seg) = generate_synthetic(Dims::new(8, 8, 8), &params, 1).unwrap();
        assert!(seg.ids().iter().all(|&id| id == 1));
    }

    #[test]
    fn clean_image_is_two_valued() {
        let params = SyntheticParams {
            num_seeds: 5,
            boundary_width: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        };
        let (img, _) = generate_synthetic(Dims::new(12, 12, 12), &params, 2).unwrap();
        assert!(img
            .data()
            .iter()
            .all(|&v| v == INTERIOR_INTENSITY || v == BOUNDARY_INTENSITY));
    }

    #[test]
    fn labels_match_nearest_seed_oracle() {
        let dims = Dims::new(32, 32, 32);
        let params = SyntheticParams {
            num_seeds: 6,
            boundary_width: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        };
        let out = generate_synthetic_detailed(dims, &params, 3).unwrap();
        assert_eq!(out.segmentation.object_count(), 6);

        // Brute-force distance scan over the seed points.
        for v in dims.iter() {
            let id = out.segmentation.id(v);
            if id == 0 {
                continue;
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, s) in out.seed_points.iter().enumerate() {
                let dx = v.x as f64 - s.x as f64;
                let dy = v.y as f64 - s.y as f64;
                let dz = v.z as f64 - s.z as f64;
                let d = dx * dx + dy * dy + dz * dz;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(id, (best + 1) as u32, "interior voxel keeps its nearest-seed id");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SyntheticParams::default();
        let a = generate_synthetic(Dims::new(10, 10, 10), &params, 9).unwrap();
        let b = generate_synthetic(Dims::new(10, 10, 10), &params, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        let dims = Dims::new(8, 8, 8);
        let bad = SyntheticParams { noise_sigma: -1.0, ..SyntheticParams::default() };
        assert!(generate_synthetic(dims, &bad, 0).is_err());
        let bad = SyntheticParams { num_seeds: 0, ..SyntheticParams::default() };
        assert!(generate_synthetic(dims, &bad, 0).is_err());
        assert!(generate_synthetic(Dims::new(4, 8, 8), &SyntheticParams::default(), 0).is_err());
    }
}
