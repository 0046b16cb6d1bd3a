//! Patch extraction. No implicit padding: callers own the margin bookkeeping.

use crate::volume::{Volume, VoxelCoord};
use crate::{Error, Result};

use super::PatchSpec;

/// Copy the patch centered at `center` into a flat vector, in index order
/// (channel fastest, then x, y, z).
pub fn extract_patch(vol: &Volume, center: VoxelCoord, spec: &PatchSpec) -> Result<Vec<f32>> {
    let mut out = vec![0f32; spec.len()];
    extract_patch_into(vol, center, spec, &mut out)?;
    Ok(out)
}

pub(crate) fn extract_patch_into(
    vol: &Volume,
    center: VoxelCoord,
    spec: &PatchSpec,
    out: &mut [f32],
) -> Result<()> {
    let dims = vol.dims();
    let channels = vol.channels();
    if channels != spec.group.channels() {
        return Err(Error::DimensionMismatch(format!(
            "patch group {} expects {} channels, volume has {}",
            spec.group.name(),
            spec.group.channels(),
            channels
        )));
    }
    let half = spec.half();
    let fits = |c: usize, h: usize, dim: usize| c >= h && c + h < dim;
    if !fits(center.x, half[0], dims.x)
        || !fits(center.y, half[1], dims.y)
        || !fits(center.z, half[2], dims.z)
    {
        return Err(Error::InvalidArgument(format!(
            "patch {:?} at ({}, {}, {}) exceeds volume {dims}",
            spec.side, center.x, center.y, center.z
        )));
    }
    debug_assert_eq!(out.len(), spec.len());

    let x0 = center.x - half[0];
    let row = spec.side[0] * channels;
    let mut at = 0;
    for dz in 0..spec.side[2] {
        let z = center.z - half[2] + dz;
        for dy in 0..spec.side[1] {
            let y = center.y - half[1] + dy;
            let src = vol.index(x0, y, z, 0);
            out[at..at + row].copy_from_slice(&vol.data()[src..src + row]);
            at += row;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ChannelGroup;
    use crate::volume::Dims;

    #[test]
    fn single_voxel_patch() {
        let mut vol = Volume::zeros(Dims::new(3, 3, 3), 1);
        vol.set(1, 1, 1, 0, 42.0);
        let spec = PatchSpec::cube(1, ChannelGroup::Image).unwrap();
        let p = extract_patch(&vol, VoxelCoord::new(1, 1, 1), &spec).unwrap();
        assert_eq!(p, vec![42.0]);
    }

    #[test]
    fn constant_volume_gives_constant_patch() {
        let vol = Volume::filled(Dims::new(7, 7, 7), 1, 3.25);
        let spec = PatchSpec::cube(5, ChannelGroup::Image).unwrap();
        let p = extract_patch(&vol, VoxelCoord::new(3, 3, 3), &spec).unwrap();
        assert_eq!(p.len(), 125);
        assert!(p.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn patch_values_follow_index_order() {
        let dims = Dims::new(5, 5, 5);
        let data: Vec<f32> = (0..dims.voxels()).map(|i| i as f32).collect();
        let vol = Volume::new(dims, 1, data).unwrap();
        let spec = PatchSpec::cube(3, ChannelGroup::Image).unwrap();
        let p = extract_patch(&vol, VoxelCoord::new(2, 2, 2), &spec).unwrap();
        let mut expect = Vec::new();
        for z in 1..=3 {
            for y in 1..=3 {
                for x in 1..=3 {
                    expect.push(((z * 5 + y) * 5 + x) as f32);
                }
            }
        }
        assert_eq!(p, expect);
    }

    #[test]
    fn out_of_bounds_patch_is_an_error() {
        let vol = Volume::zeros(Dims::new(4, 4, 4), 1);
        let spec = PatchSpec::cube(3, ChannelGroup::Image).unwrap();
        assert!(extract_patch(&vol, VoxelCoord::new(0, 2, 2), &spec).is_err());
        assert!(extract_patch(&vol, VoxelCoord::new(2, 2, 3), &spec).is_err());
    }

    #[test]
    fn multi_channel_patch_interleaves_channels() {
        let dims = Dims::new(3, 3, 3);
        let mut vol = Volume::zeros(dims, 3);
        for v in dims.iter() {
            for c in 0..3 {
                vol.set(v.x, v.y, v.z, c, (dims.linear(v) * 3 + c) as f32);
            }
        }
        let spec = PatchSpec::new([1, 1, 3], ChannelGroup::Affinity).unwrap();
        let p = extract_patch(&vol, VoxelCoord::new(1, 1, 1), &spec).unwrap();
        assert_eq!(p.len(), 9);
        let lin = |z: usize| (z * 3 + 1) * 3 + 1;
        let expect: Vec<f32> = (0..3)
            .flat_map(|z| (0..3).map(move |c| (lin(z) * 3 + c) as f32))
            .collect();
        assert_eq!(p, expect);
    }
}
