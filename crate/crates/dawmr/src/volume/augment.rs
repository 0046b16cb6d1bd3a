//! Eightfold training-set augmentation: the dihedral group of xy-plane
//! rotations and x reflections.

use crate::{Error, Result};

use super::{BoundingBox, Dims, SegmentationVolume, Volume, VoxelCoord};

/// One element of the 8-element augmentation group: `rotations` quarter turns
/// counterclockwise in the xy-plane, optionally followed by a reflection of
/// the x axis. z is never touched (isotropic in-plane action).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DihedralElement {
    pub rotations: u8,
    pub mirror_x: bool,
}

impl DihedralElement {
    pub const IDENTITY: DihedralElement = DihedralElement { rotations: 0, mirror_x: false };

    /// All 8 elements; index 0 is the identity.
    pub fn all() -> [DihedralElement; 8] {
        let mut out = [DihedralElement::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            e.rotations = (i % 4) as u8;
            e.mirror_x = i >= 4;
        }
        out
    }

    pub fn transformed_dims(&self, dims: Dims) -> Dims {
        if self.rotations % 2 == 1 {
            Dims::new(dims.y, dims.x, dims.z)
        } else {
            dims
        }
    }

    /// Where the source voxel `v` lands in the transformed volume.
    pub fn apply(&self, v: VoxelCoord, src_dims: Dims) -> VoxelCoord {
        let (mut x, mut y) = (v.x, v.y);
        let (mut dx, mut dy) = (src_dims.x, src_dims.y);
        for _ in 0..self.rotations % 4 {
            // (x, y) -> (Y - 1 - y, x), dims swap
            let nx = dy - 1 - y;
            let ny = x;
            x = nx;
            y = ny;
            std::mem::swap(&mut dx, &mut dy);
        }
        if self.mirror_x {
            x = dx - 1 - x;
        }
        let _ = dy;
        VoxelCoord::new(x, y, v.z)
    }

    pub fn transform_volume(&self, vol: &Volume) -> Volume {
        let src_dims = vol.dims();
        let dims = self.transformed_dims(src_dims);
        let channels = vol.channels();
        let mut out = Volume::zeros(dims, channels);
        for v in src_dims.iter() {
            let t = self.apply(v, src_dims);
            for c in 0..channels {
                out.set(t.x, t.y, t.z, c, vol.get(v.x, v.y, v.z, c));
            }
        }
        out
    }

    pub fn transform_segmentation(&self, seg: &SegmentationVolume) -> SegmentationVolume {
        let src_dims = seg.dims();
        let dims = self.transformed_dims(src_dims);
        let mut out = SegmentationVolume::zeros(dims);
        for v in src_dims.iter() {
            out.set_id(self.apply(v, src_dims), seg.id(v));
        }
        out
    }

    /// Image of a half-open box under the transform.
    pub fn transform_box(&self, b: &BoundingBox, src_dims: Dims) -> BoundingBox {
        if b.is_empty() {
            return *b;
        }
        let last = VoxelCoord::new(b.hi.x - 1, b.hi.y - 1, b.hi.z - 1);
        let a = self.apply(b.lo, src_dims);
        let c = self.apply(last, src_dims);
        let lo = VoxelCoord::new(a.x.min(c.x), a.y.min(c.y), a.z.min(c.z));
        let hi = VoxelCoord::new(a.x.max(c.x) + 1, a.y.max(c.y) + 1, a.z.max(c.z) + 1);
        BoundingBox::new(lo, hi)
    }
}

/// The orbit of `(img, seg)` under the 8-element augmentation group.
///
/// Element 0 is the untransformed input. Edge labels are not transformed
/// here; callers regenerate them from each returned segmentation so that the
/// edge-anchoring convention stays intact.
pub fn augment_eightfold(
    seg: &SegmentationVolume,
    img: &Volume,
) -> Result<Vec<(Volume, SegmentationVolume)>> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "augmentation expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    if img.dims() != seg.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image dims {} != segmentation dims {}",
            img.dims(),
            seg.dims()
        )));
    }
    Ok(DihedralElement::all()
        .iter()
        .map(|e| (e.transform_volume(img), e.transform_segmentation(seg)))
        .collect())
}
