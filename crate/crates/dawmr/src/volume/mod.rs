//! Core 3d data model: dense multi-channel volumes, segmentations, affinity
//! graphs, edge label masks, and the training catalog built from them.

mod augment;
mod catalog;
pub mod io;
mod synthetic;

pub use augment::{augment_eightfold, DihedralElement};
pub use catalog::{
    subsample_locations, subsample_locations_within, CatalogEntry, SubvolumeCatalog,
};
pub use synthetic::{
    generate_synthetic, generate_synthetic_detailed, SyntheticParams, SyntheticVolume,
};

use crate::{Error, Result};

/// Voxel counts along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Dims {
        Dims { x, y, z }
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn contains(&self, v: VoxelCoord) -> bool {
        v.x < self.x && v.y < self.y && v.z < self.z
    }

    /// Linear index of a voxel, ignoring channels.
    #[inline]
    pub fn linear(&self, v: VoxelCoord) -> usize {
        (v.z * self.y + v.y) * self.x + v.x
    }

    pub fn coord_of(&self, linear: usize) -> VoxelCoord {
        let x = linear % self.x;
        let y = (linear / self.x) % self.y;
        let z = linear / (self.x * self.y);
        VoxelCoord { x, y, z }
    }

    /// Iterate all voxel coordinates in linear-index order (x fastest).
    pub fn iter(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let d = *self;
        (0..d.voxels()).map(move |i| d.coord_of(i))
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

/// A voxel location. Always non-negative and within its volume's dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    // Ordered z, y, x so the derived Ord matches linear-index order.
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl VoxelCoord {
    pub fn new(x: usize, y: usize, z: usize) -> VoxelCoord {
        VoxelCoord { x, y, z }
    }

    /// Neighbor one step along `axis`, or `None` at the volume border.
    pub fn step(&self, axis: Axis, dims: Dims) -> Option<VoxelCoord> {
        let mut v = *self;
        match axis {
            Axis::X => v.x += 1,
            Axis::Y => v.y += 1,
            Axis::Z => v.z += 1,
        }
        dims.contains(v).then_some(v)
    }
}

/// One of the three positive edge directions of an affinity graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn channel(&self) -> usize {
        *self as usize
    }
}

/// Dense multi-channel 3d scalar field.
///
/// Data is stored in index order `((z*Y + y)*X + x)*C + c`: channel fastest,
/// then x, y, z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Volume> {
        if dims.x == 0 || dims.y == 0 || dims.z == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims and channels must be >= 1, got {dims} c={channels}"
            )));
        }
        let expect = dims.voxels() * channels;
        if data.len() != expect {
            return Err(Error::DimensionMismatch(format!(
                "volume {dims} c={channels} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, channels, data })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Volume {
        Volume { dims, channels, data: vec![0.0; dims.voxels() * channels] }
    }

    pub fn filled(dims: Dims, channels: usize, value: f32) -> Volume {
        Volume { dims, channels, data: vec![value; dims.voxels() * channels] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((z * self.dims.y + y) * self.dims.x + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = value;
    }

    /// Single-channel accessor.
    #[inline]
    pub fn value(&self, v: VoxelCoord) -> f32 {
        debug_assert_eq!(self.channels, 1);
        self.data[self.dims.linear(v)]
    }

    /// Copy out the half-open box `b`.
    pub fn crop(&self, b: &BoundingBox) -> Volume {
        let dims = Dims::new(b.hi.x - b.lo.x, b.hi.y - b.lo.y, b.hi.z - b.lo.z);
        let mut out = Volume::zeros(dims, self.channels);
        let row = dims.x * self.channels;
        for z in 0..dims.z {
            for y in 0..dims.y {
                let src = self.index(b.lo.x, b.lo.y + y, b.lo.z + z, 0);
                let dst = out.index(0, y, z, 0);
                out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
            }
        }
        out
    }
}

/// Dense segment-id volume. Id 0 is reserved for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationVolume {
    dims: Dims,
    ids: Vec<u32>,
}

impl SegmentationVolume {
    pub fn new(dims: Dims, ids: Vec<u32>) -> Result<SegmentationVolume> {
        if ids.len() != dims.voxels() {
            return Err(Error::DimensionMismatch(format!(
                "segmentation {dims} needs {} ids, got {}",
                dims.voxels(),
                ids.len()
            )));
        }
        Ok(SegmentationVolume { dims, ids })
    }

    pub fn zeros(dims: Dims) -> SegmentationVolume {
        SegmentationVolume { dims, ids: vec![0; dims.voxels()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    #[inline]
    pub fn id(&self, v: VoxelCoord) -> u32 {
        self.ids[self.dims.linear(v)]
    }

    #[inline]
    pub fn set_id(&mut self, v: VoxelCoord, id: u32) {
        let i = self.dims.linear(v);
        self.ids[i] = id;
    }

    /// Count of distinct nonzero ids.
    pub fn object_count(&self) -> usize {
        let mut seen: Vec<u32> = self.ids.iter().copied().filter(|&i| i != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Copy out the half-open box `b`.
    pub fn crop(&self, b: &BoundingBox) -> SegmentationVolume {
        let dims = Dims::new(b.hi.x - b.lo.x, b.hi.y - b.lo.y, b.hi.z - b.lo.z);
        let mut out = SegmentationVolume::zeros(dims);
        for z in 0..dims.z {
            for y in 0..dims.y {
                let src = self.dims.linear(VoxelCoord::new(b.lo.x, b.lo.y + y, b.lo.z + z));
                let dst = dims.linear(VoxelCoord::new(0, y, z));
                out.ids[dst..dst + dims.x].copy_from_slice(&self.ids[src..src + dims.x]);
            }
        }
        out
    }
}

/// Per-voxel 3-vector of edge affinities in [0, 1].
///
/// Channel `d` at voxel `v` holds the affinity of the edge `(v, v + e_d)`.
/// Edges whose far endpoint falls outside the volume are stored as 0 and are
/// invalid (label 0 in the matching [`LabelMask`]).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph(Volume);

impl AffinityGraph {
    pub fn new(volume: Volume) -> Result<AffinityGraph> {
        if volume.channels() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "affinity graph needs 3 channels, got {}",
                volume.channels()
            )));
        }
        Ok(AffinityGraph(volume))
    }

    pub fn zeros(dims: Dims) -> AffinityGraph {
        AffinityGraph(Volume::zeros(dims, 3))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    #[inline]
    pub fn edge(&self, v: VoxelCoord, axis: Axis) -> f32 {
        self.0.get(v.x, v.y, v.z, axis.channel())
    }

    #[inline]
    pub fn set_edge(&mut self, v: VoxelCoord, axis: Axis, value: f32) {
        self.0.set(v.x, v.y, v.z, axis.channel(), value);
    }

    pub fn crop(&self, b: &BoundingBox) -> AffinityGraph {
        AffinityGraph(self.0.crop(b))
    }
}

/// Ternary edge labels: +1 positive, -1 negative, 0 unknown or invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<i8>,
}

impl LabelMask {
    pub fn zeros(dims: Dims) -> LabelMask {
        LabelMask { dims, labels: vec![0; dims.voxels() * 3] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn label(&self, v: VoxelCoord, axis: Axis) -> i8 {
        self.labels[self.dims.linear(v) * 3 + axis.channel()]
    }

    #[inline]
    pub fn set_label(&mut self, v: VoxelCoord, axis: Axis, label: i8) {
        let i = self.dims.linear(v) * 3 + axis.channel();
        self.labels[i] = label;
    }

    /// Labels of all three edges anchored at `v`.
    #[inline]
    pub fn labels_at(&self, v: VoxelCoord) -> [i8; 3] {
        let i = self.dims.linear(v) * 3;
        [self.labels[i], self.labels[i + 1], self.labels[i + 2]]
    }

    /// True if at least one edge at `v` carries a label.
    pub fn is_labeled(&self, v: VoxelCoord) -> bool {
        self.labels_at(v).iter().any(|&l| l != 0)
    }

    /// Keep only labels where `keep` returns true; everything else becomes 0.
    pub fn restricted(&self, keep: impl Fn(VoxelCoord, Axis) -> bool) -> LabelMask {
        let mut out = self.clone();
        for v in self.dims.iter() {
            for axis in Axis::ALL {
                if !keep(v, axis) {
                    out.set_label(v, axis, 0);
                }
            }
        }
        out
    }

    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Half-open axis-aligned box `[lo, hi)` of voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: VoxelCoord,
    pub hi: VoxelCoord,
}

impl BoundingBox {
    pub fn new(lo: VoxelCoord, hi: VoxelCoord) -> BoundingBox {
        BoundingBox { lo, hi }
    }

    pub fn whole(dims: Dims) -> BoundingBox {
        BoundingBox { lo: VoxelCoord::new(0, 0, 0), hi: VoxelCoord::new(dims.x, dims.y, dims.z) }
    }

    pub fn is_empty(&self) -> bool {
        self.hi.x <= self.lo.x || self.hi.y <= self.lo.y || self.hi.z <= self.lo.z
    }

    pub fn contains(&self, v: VoxelCoord) -> bool {
        v.x >= self.lo.x && v.x < self.hi.x
            && v.y >= self.lo.y && v.y < self.hi.y
            && v.z >= self.lo.z && v.z < self.hi.z
    }

    pub fn intersect(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            lo: VoxelCoord::new(
                self.lo.x.max(other.lo.x),
                self.lo.y.max(other.lo.y),
                self.lo.z.max(other.lo.z),
            ),
            hi: VoxelCoord::new(
                self.hi.x.min(other.hi.x),
                self.hi.y.min(other.hi.y),
                self.hi.z.min(other.hi.z),
            ),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let b = *self;
        (b.lo.z..b.hi.z.max(b.lo.z)).flat_map(move |z| {
            (b.lo.y..b.hi.y.max(b.lo.y)).flat_map(move |y| {
                (b.lo.x..b.hi.x.max(b.lo.x)).map(move |x| VoxelCoord::new(x, y, z))
            })
        })
    }

    /// Voxel count, zero when empty.
    pub fn voxels(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.hi.x - self.lo.x) * (self.hi.y - self.lo.y) * (self.hi.z - self.lo.z)
        }
    }

    /// Shrink symmetrically by `margin` per axis; collapses to empty when too
    /// small.
    pub fn shrunk(&self, margin: [usize; 3]) -> BoundingBox {
        let lo = VoxelCoord::new(self.lo.x + margin[0], self.lo.y + margin[1], self.lo.z + margin[2]);
        let hi = VoxelCoord::new(
            self.hi.x.saturating_sub(margin[0]),
            self.hi.y.saturating_sub(margin[1]),
            self.hi.z.saturating_sub(margin[2]),
        );
        let b = BoundingBox { lo, hi };
        if b.is_empty() {
            BoundingBox { lo: VoxelCoord::new(0, 0, 0), hi: VoxelCoord::new(0, 0, 0) }
        } else {
            b
        }
    }
}

/// Derive the ground-truth affinity graph and edge label mask from a
/// segmentation.
///
/// An edge `(v, v + e_d)` is positive (affinity 1, label +1) exactly when both
/// endpoints carry the same nonzero id. It is negative (affinity 0, label -1)
/// when the ids differ or either endpoint is background. Edges leaving the
/// volume are invalid: affinity 0, label 0.
pub fn affinities_from_segmentation(seg: &SegmentationVolume) -> (AffinityGraph, LabelMask) {
    let dims = seg.dims();
    let mut aff = AffinityGraph::zeros(dims);
    let mut mask = LabelMask::zeros(dims);
    for v in dims.iter() {
        let a = seg.id(v);
        for axis in Axis::ALL {
            let Some(u) = v.step(axis, dims) else { continue };
            let b = seg.id(u);
            if a != 0 && a == b {
                aff.set_edge(v, axis, 1.0);
                mask.set_label(v, axis, 1);
            } else {
                mask.set_label(v, axis, -1);
            }
        }
    }
    (aff, mask)
}

/// Downsample by integer block averaging.
///
/// Output dims are `floor(dims / factor)` per axis; each output voxel is the
/// mean of its `factor^3` source block. Trailing voxels beyond the last full
/// block are dropped.
pub fn downsample_average(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let src = vol.dims();
    let dims = Dims::new(src.x / factor, src.y / factor, src.z / factor);
    if dims.x == 0 || dims.y == 0 || dims.z == 0 {
        return Err(Error::InvalidArgument(format!(
            "downsampling {src} by {factor} leaves an empty volume"
        )));
    }
    let channels = vol.channels();
    let mut out = Volume::zeros(dims, channels);
    let norm = 1.0 / (factor * factor * factor) as f64;
    for oz in 0..dims.z {
        for oy in 0..dims.y {
            for ox in 0..dims.x {
                for c in 0..channels {
                    let mut sum = 0.0f64;
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                sum += vol.get(ox * factor + dx, oy * factor + dy, oz * factor + dz, c)
                                    as f64;
                            }
                        }
                    }
                    out.set(ox, oy, oz, c, (sum * norm) as f32);
                }
            }
        }
    }
    Ok(out)
}
