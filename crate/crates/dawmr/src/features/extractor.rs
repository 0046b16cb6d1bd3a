//! Feature assembly: receptive-field and foveated representations over one
//! or more downsampled scales and input channel groups.

use rayon::prelude::*;

use crate::volume::{downsample_average, BoundingBox, Dims, Volume, VoxelCoord};
use crate::{Error, Result};

use super::dictionary::VqCodebook;
use super::patch::extract_patch_into;
use super::ChannelGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Concatenate the raw encodings at every neighborhood offset.
    ReceptiveField,
    /// Concatenate the center encoding with a pooled neighborhood encoding.
    Foveated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Average,
}

/// Elementwise pooling over a set of equal-length encodings.
pub fn pool(encodings: &[&[f32]], mode: Pooling) -> Result<Vec<f32>> {
    let Some(first) = encodings.first() else {
        return Err(Error::InvalidArgument("pooling needs at least one encoding".into()));
    };
    if encodings.iter().any(|e| e.len() != first.len()) {
        return Err(Error::DimensionMismatch("pooled encodings must share a length".into()));
    }
    let mut acc = PoolAcc::new(mode, first.len());
    for e in encodings {
        acc.add(e);
    }
    let mut out = vec![0f32; first.len()];
    acc.finish_into(&mut out);
    Ok(out)
}

enum PoolAcc {
    Max(Vec<f32>),
    Average(Vec<f64>, usize),
}

impl PoolAcc {
    fn new(mode: Pooling, dim: usize) -> PoolAcc {
        match mode {
            Pooling::Max => PoolAcc::Max(vec![f32::NEG_INFINITY; dim]),
            Pooling::Average => PoolAcc::Average(vec![0f64; dim], 0),
        }
    }

    fn add(&mut self, encoding: &[f32]) {
        match self {
            PoolAcc::Max(acc) => {
                for (a, &v) in acc.iter_mut().zip(encoding) {
                    if v > *a {
                        *a = v;
                    }
                }
            }
            PoolAcc::Average(acc, n) => {
                for (a, &v) in acc.iter_mut().zip(encoding) {
                    *a += v as f64;
                }
                *n += 1;
            }
        }
    }

    fn finish_into(self, out: &mut [f32]) {
        match self {
            PoolAcc::Max(acc) => out.copy_from_slice(&acc),
            PoolAcc::Average(acc, n) => {
                let inv = 1.0 / n as f64;
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = (a * inv) as f32;
                }
            }
        }
    }
}

/// Full description of one iteration's feature extraction stage.
///
/// `codebooks` is scale-major: the codebook for scale `s` and group `g` sits
/// at `s * groups.len() + g`. Per-scale output is the concatenation over
/// groups; the final vector concatenates scales in order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractorSpec {
    pub representation: Representation,
    /// Pooling / receptive-field neighborhood side per axis, odd.
    pub neighborhood: [usize; 3],
    pub pooling: Pooling,
    /// Downsampling factors, e.g. `[1]` or `[1, 2]`.
    pub scales: Vec<usize>,
    pub groups: Vec<ChannelGroup>,
    pub codebooks: Vec<VqCodebook>,
}

impl FeatureExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("at least one scale required".into()));
        }
        if self.scales.contains(&0) {
            return Err(Error::InvalidArgument("scales must be >= 1".into()));
        }
        let mut distinct = self.scales.clone();
        distinct.dedup();
        if distinct.len() != self.scales.len() {
            return Err(Error::InvalidArgument("duplicate scales".into()));
        }
        if self.neighborhood.iter().any(|&m| m == 0 || m % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "neighborhood sides must be odd, got {:?}",
                self.neighborhood
            )));
        }
        if self.groups.is_empty() {
            return Err(Error::InvalidArgument("at least one channel group required".into()));
        }
        if self.codebooks.len() != self.scales.len() * self.groups.len() {
            return Err(Error::DimensionMismatch(format!(
                "need {} codebooks ({} scales x {} groups), got {}",
                self.scales.len() * self.groups.len(),
                self.scales.len(),
                self.groups.len(),
                self.codebooks.len()
            )));
        }
        for (i, cb) in self.codebooks.iter().enumerate() {
            let group = self.groups[i % self.groups.len()];
            if cb.dictionary.patch().group != group {
                return Err(Error::DimensionMismatch(format!(
                    "codebook {i} reads {} but slot expects {}",
                    cb.dictionary.patch().group.name(),
                    group.name()
                )));
            }
        }
        Ok(())
    }

    pub fn codebook(&self, scale_idx: usize, group_idx: usize) -> &VqCodebook {
        &self.codebooks[scale_idx * self.groups.len() + group_idx]
    }

    fn half_m(&self) -> [usize; 3] {
        [self.neighborhood[0] / 2, self.neighborhood[1] / 2, self.neighborhood[2] / 2]
    }

    /// Neighborhood size `mx * my * mz`.
    pub fn neighborhood_volume(&self) -> usize {
        self.neighborhood.iter().product()
    }

    /// Total feature dimensionality `d`.
    pub fn feature_dims(&self) -> usize {
        let mult = match self.representation {
            Representation::ReceptiveField => self.neighborhood_volume(),
            Representation::Foveated => 2,
        };
        self.codebooks.iter().map(|cb| cb.encoding_dim() * mult).sum()
    }

    /// Per-axis support `need = half_patch + half_neighborhood`, in scaled
    /// voxels, maximized over a scale's codebooks.
    pub fn need_at_scale(&self, scale_idx: usize) -> [usize; 3] {
        let hm = self.half_m();
        let mut need = [0usize; 3];
        for gi in 0..self.groups.len() {
            let hp = self.codebook(scale_idx, gi).dictionary.patch().half();
            for a in 0..3 {
                need[a] = need[a].max(hp[a] + hm[a]);
            }
        }
        need
    }

    /// Declared field of view in original voxels per axis:
    /// `max over scales of (patch + neighborhood - 1) * scale`.
    pub fn field_of_view(&self) -> [usize; 3] {
        let mut fov = [0usize; 3];
        for (si, &s) in self.scales.iter().enumerate() {
            let need = self.need_at_scale(si);
            for a in 0..3 {
                fov[a] = fov[a].max((2 * need[a] + 1) * s);
            }
        }
        fov
    }

    /// Locations with full support at every scale, as a half-open box in
    /// original voxel coordinates. Empty when the volume is too small.
    pub fn valid_range(&self, dims: Dims) -> BoundingBox {
        self.valid_range_within(dims, BoundingBox::whole(dims))
    }

    /// Like [`valid_range`](Self::valid_range), but requiring the entire
    /// support of each location to fall inside `within` — used when the input
    /// itself is only trustworthy on a sub-box (recursive iterations).
    pub fn valid_range_within(&self, dims: Dims, within: BoundingBox) -> BoundingBox {
        let empty =
            || BoundingBox::new(VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 0, 0));
        if within.is_empty() {
            return empty();
        }
        let wlo = [within.lo.x, within.lo.y, within.lo.z];
        let whi = [within.hi.x.min(dims.x), within.hi.y.min(dims.y), within.hi.z.min(dims.z)];
        let mut lo = [0usize; 3];
        let mut hi = [dims.x, dims.y, dims.z];
        for (si, &s) in self.scales.iter().enumerate() {
            let need = self.need_at_scale(si);
            for a in 0..3 {
                let ds = [dims.x, dims.y, dims.z][a] / s;
                // Support must stay inside the volume at this scale and cover
                // only fully-within downsampled voxels of `within`.
                let lo_cells = wlo[a].div_ceil(s);
                let hi_cells = (whi[a] / s).min(ds);
                if hi_cells < lo_cells + 2 * need[a] + 1 {
                    return empty();
                }
                lo[a] = lo[a].max((lo_cells + need[a]) * s);
                hi[a] = hi[a].min((hi_cells - need[a]) * s);
            }
        }
        let bb = BoundingBox::new(
            VoxelCoord::new(lo[0], lo[1], lo[2]),
            VoxelCoord::new(hi[0], hi[1], hi[2]),
        );
        if bb.is_empty() {
            empty()
        } else {
            bb
        }
    }

    /// Exact set of original voxels that can influence the features at `l`
    /// (union over scales of the support boxes). `l` must have full support.
    pub fn influence_region(&self, dims: Dims, l: VoxelCoord) -> BoundingBox {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (si, &s) in self.scales.iter().enumerate() {
            let need = self.need_at_scale(si);
            let c = [l.x / s, l.y / s, l.z / s];
            for a in 0..3 {
                lo[a] = lo[a].min((c[a] - need[a]) * s);
                hi[a] = hi[a].max((c[a] + need[a] + 1) * s);
            }
        }
        let _ = dims;
        BoundingBox::new(
            VoxelCoord::new(lo[0], lo[1], lo[2]),
            VoxelCoord::new(hi[0], hi[1], hi[2]),
        )
    }
}

/// Dimensionality calculator for an architecture before any learning:
/// receptive field gives `scales * sum(group encoding dims) * m^3`, foveated
/// `scales * sum(group encoding dims) * 2`.
pub fn representation_dims(
    representation: Representation,
    neighborhood: [usize; 3],
    scale_count: usize,
    group_encoding_dims: &[usize],
) -> usize {
    let per_group: usize = group_encoding_dims.iter().sum();
    let mult = match representation {
        Representation::ReceptiveField => neighborhood.iter().product(),
        Representation::Foveated => 2,
    };
    scale_count * per_group * mult
}

/// The input volumes one iteration reads, keyed by channel group.
#[derive(Debug, Clone, Copy)]
pub struct GroupInputs<'a> {
    image: &'a Volume,
    affinity: Option<&'a Volume>,
}

impl<'a> GroupInputs<'a> {
    pub fn image_only(image: &'a Volume) -> Result<GroupInputs<'a>> {
        if image.channels() != 1 {
            return Err(Error::DimensionMismatch("image input must have 1 channel".into()));
        }
        Ok(GroupInputs { image, affinity: None })
    }

    pub fn with_affinity(image: &'a Volume, affinity: &'a Volume) -> Result<GroupInputs<'a>> {
        if image.channels() != 1 {
            return Err(Error::DimensionMismatch("image input must have 1 channel".into()));
        }
        if affinity.channels() != 3 {
            return Err(Error::DimensionMismatch("affinity input must have 3 channels".into()));
        }
        if image.dims() != affinity.dims() {
            return Err(Error::DimensionMismatch(format!(
                "image dims {} != affinity dims {}",
                image.dims(),
                affinity.dims()
            )));
        }
        Ok(GroupInputs { image, affinity: Some(affinity) })
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    pub fn image_ref(&self) -> &'a Volume {
        self.image
    }

    pub fn affinity_ref(&self) -> Option<&'a Volume> {
        self.affinity
    }

    fn get(&self, group: ChannelGroup) -> Result<&'a Volume> {
        match group {
            ChannelGroup::Image => Ok(self.image),
            ChannelGroup::Affinity => self.affinity.ok_or_else(|| {
                Error::InvalidArgument("spec reads the affinity group but no affinity input given".into())
            }),
        }
    }
}

struct EncodedVolume {
    dims: Dims,
    enc_dim: usize,
    data: Vec<f32>,
}

impl EncodedVolume {
    #[inline]
    fn at(&self, v: VoxelCoord) -> &[f32] {
        let i = self.dims.linear(v) * self.enc_dim;
        &self.data[i..i + self.enc_dim]
    }
}

/// Prepared per-volume state for repeated feature extraction: the per-scale
/// downsampled inputs and, optionally, a dense cache of every voxel's
/// encoding per (scale, group).
///
/// The cached and uncached paths produce bit-identical features.
pub struct FeatureContext<'s> {
    spec: &'s FeatureExtractorSpec,
    input_dims: Dims,
    /// `[scale][group]` downsampled volumes.
    scaled: Vec<Vec<Volume>>,
    /// `[scale * groups + group]`, present when built with `cached`.
    encoded: Option<Vec<EncodedVolume>>,
}

impl<'s> FeatureContext<'s> {
    pub fn new(spec: &'s FeatureExtractorSpec, inputs: &GroupInputs<'_>) -> Result<FeatureContext<'s>> {
        FeatureContext::build(spec, inputs, false)
    }

    /// Build with a dense encoding cache; preferred for whole-volume work.
    pub fn cached(spec: &'s FeatureExtractorSpec, inputs: &GroupInputs<'_>) -> Result<FeatureContext<'s>> {
        FeatureContext::build(spec, inputs, true)
    }

    fn build(
        spec: &'s FeatureExtractorSpec,
        inputs: &GroupInputs<'_>,
        cache: bool,
    ) -> Result<FeatureContext<'s>> {
        spec.validate()?;
        let mut scaled = Vec::with_capacity(spec.scales.len());
        for &s in &spec.scales {
            let mut per_group = Vec::with_capacity(spec.groups.len());
            for &g in &spec.groups {
                per_group.push(downsample_average(inputs.get(g)?, s)?);
            }
            scaled.push(per_group);
        }
        let encoded = if cache {
            let mut all = Vec::with_capacity(spec.codebooks.len());
            for (si, per_group) in scaled.iter().enumerate() {
                for (gi, vol) in per_group.iter().enumerate() {
                    all.push(encode_volume(spec.codebook(si, gi), vol));
                }
            }
            Some(all)
        } else {
            None
        };
        Ok(FeatureContext { spec, input_dims: inputs.dims(), scaled, encoded })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        self.spec
    }

    pub fn valid_range(&self) -> BoundingBox {
        self.spec.valid_range(self.input_dims)
    }

    pub fn features_at(&self, l: VoxelCoord) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.spec.feature_dims());
        self.features_into(l, &mut out)?;
        Ok(out)
    }

    /// Assemble the feature vector `h_l`; `out` is cleared first.
    pub fn features_into(&self, l: VoxelCoord, out: &mut Vec<f32>) -> Result<()> {
        if !self.valid_range().contains(l) {
            return Err(Error::InvalidArgument(format!(
                "location ({}, {}, {}) lacks field-of-view support in {}",
                l.x, l.y, l.z, self.input_dims
            )));
        }
        out.clear();
        let hm = self.spec.half_m();
        let m = self.spec.neighborhood;
        for (si, &s) in self.spec.scales.iter().enumerate() {
            let c = VoxelCoord::new(l.x / s, l.y / s, l.z / s);
            for gi in 0..self.spec.groups.len() {
                let cb = self.spec.codebook(si, gi);
                let ed = cb.encoding_dim();
                let mut scratch = vec![0f32; ed];
                match self.spec.representation {
                    Representation::ReceptiveField => {
                        for dz in 0..m[2] {
                            for dy in 0..m[1] {
                                for dx in 0..m[0] {
                                    let v = VoxelCoord::new(
                                        c.x + dx - hm[0],
                                        c.y + dy - hm[1],
                                        c.z + dz - hm[2],
                                    );
                                    let start = out.len();
                                    out.resize(start + ed, 0.0);
                                    self.encoding_into(si, gi, v, &mut out[start..])?;
                                }
                            }
                        }
                    }
                    Representation::Foveated => {
                        let start = out.len();
                        out.resize(start + ed, 0.0);
                        self.encoding_into(si, gi, c, &mut out[start..])?;
                        let mut acc = PoolAcc::new(self.spec.pooling, ed);
                        for dz in 0..m[2] {
                            for dy in 0..m[1] {
                                for dx in 0..m[0] {
                                    let v = VoxelCoord::new(
                                        c.x + dx - hm[0],
                                        c.y + dy - hm[1],
                                        c.z + dz - hm[2],
                                    );
                                    match &self.encoded {
                                        Some(cache) => {
                                            let ev = &cache[si * self.spec.groups.len() + gi];
                                            acc.add(ev.at(v));
                                        }
                                        None => {
                                            self.encoding_into(si, gi, v, &mut scratch)?;
                                            acc.add(&scratch);
                                        }
                                    }
                                }
                            }
                        }
                        let start = out.len();
                        out.resize(start + ed, 0.0);
                        acc.finish_into(&mut out[start..]);
                    }
                }
            }
        }
        debug_assert_eq!(out.len(), self.spec.feature_dims());
        Ok(())
    }

    /// Encoding of the (scaled) voxel `v` for one codebook slot.
    fn encoding_into(&self, si: usize, gi: usize, v: VoxelCoord, out: &mut [f32]) -> Result<()> {
        match &self.encoded {
            Some(cache) => {
                let ev = &cache[si * self.spec.groups.len() + gi];
                out.copy_from_slice(ev.at(v));
                Ok(())
            }
            None => {
                let cb = self.spec.codebook(si, gi);
                let vol = &self.scaled[si][gi];
                let mut patch = vec![0f32; cb.dictionary.patch().len()];
                extract_patch_into(vol, v, cb.dictionary.patch(), &mut patch)?;
                cb.encode_patch(&patch, out)
            }
        }
    }
}

/// Encode every voxel with full patch support; unsupported border voxels
/// stay zero and are never read by margin-respecting callers.
fn encode_volume(cb: &VqCodebook, vol: &Volume) -> EncodedVolume {
    let dims = vol.dims();
    let enc_dim = cb.encoding_dim();
    let hp = cb.dictionary.patch().half();
    let spec = *cb.dictionary.patch();
    let patch_len = spec.len();
    let mut data = vec![0f32; dims.voxels() * enc_dim];
    data.par_chunks_mut(enc_dim).enumerate().for_each_init(
        || vec![0f32; patch_len],
        |patch, (i, out)| {
            let v = dims.coord_of(i);
            let fits = v.x >= hp[0]
                && v.x + hp[0] < dims.x
                && v.y >= hp[1]
                && v.y + hp[1] < dims.y
                && v.z >= hp[2]
                && v.z + hp[2] < dims.z;
            if fits {
                extract_patch_into(vol, v, &spec, patch).expect("support checked");
                cb.encode_patch(patch, out).expect("dims match by construction");
            }
        },
    );
    EncodedVolume { dims, enc_dim, data }
}

/// One-shot convenience wrapper over [`FeatureContext`].
pub fn extract_features(
    spec: &FeatureExtractorSpec,
    inputs: &GroupInputs<'_>,
    l: VoxelCoord,
) -> Result<Vec<f32>> {
    FeatureContext::new(spec, inputs)?.features_at(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{
        encode, extract_patch, learn_dictionary_omp1, EncoderConfig, PatchSpec,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, channels: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> =
            (0..dims.voxels() * channels).map(|_| rng.gen_range(0.0..255.0)).collect();
        Volume::new(dims, channels, data).unwrap()
    }

    fn image_codebook(patch_side: [usize; 3], k: usize, seed: u64) -> VqCodebook {
        let spec = PatchSpec::new(patch_side, ChannelGroup::Image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<Vec<f32>> = (0..k.max(8) * 10)
            .map(|_| (0..spec.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        VqCodebook {
            dictionary: learn_dictionary_omp1(&patches, &spec, k, 5, seed).unwrap(),
            encoder: EncoderConfig::soft_threshold(0.25),
            whitening: None,
        }
    }

    fn spec_of(
        representation: Representation,
        m: usize,
        scales: Vec<usize>,
        codebooks: Vec<VqCodebook>,
    ) -> FeatureExtractorSpec {
        FeatureExtractorSpec {
            representation,
            neighborhood: [m; 3],
            pooling: Pooling::Max,
            scales,
            groups: vec![ChannelGroup::Image],
            codebooks,
        }
    }

    #[test]
    fn pool_of_single_encoding_is_identity() {
        let e = vec![1.0f32, -2.0, 3.0];
        assert_eq!(pool(&[&e], Pooling::Max).unwrap(), e);
        assert_eq!(pool(&[&e], Pooling::Average).unwrap(), e);
    }

    #[test]
    fn pool_max_is_elementwise() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 2.0];
        assert_eq!(pool(&[&a, &b], Pooling::Max).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool(&[&a, &b], Pooling::Average).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn pool_matches_direct_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let encodings: Vec<Vec<f32>> = (0..125)
            .map(|_| (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let refs: Vec<&[f32]> = encodings.iter().map(|e| e.as_slice()).collect();
        let maxed = pool(&refs, Pooling::Max).unwrap();
        let avged = pool(&refs, Pooling::Average).unwrap();
        for j in 0..8 {
            let mut mx = f32::NEG_INFINITY;
            let mut sum = 0f64;
            for e in &encodings {
                mx = mx.max(e[j]);
                sum += e[j] as f64;
            }
            assert_eq!(maxed[j], mx);
            assert_eq!(avged[j], (sum / 125.0) as f32);
        }
    }

    #[test]
    fn pool_rejects_empty_and_ragged() {
        assert!(pool(&[], Pooling::Max).is_err());
        let a = [1.0f32, 2.0];
        let b = [1.0f32];
        assert!(pool(&[&a, &b], Pooling::Max).is_err());
    }

    #[test]
    fn degenerate_receptive_field_is_the_center_encoding() {
        let cb = image_codebook([3, 3, 3], 4, 1);
        let spec = spec_of(Representation::ReceptiveField, 1, vec![1], vec![cb.clone()]);
        let vol = random_volume(Dims::new(9, 9, 9), 1, 2);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let l = VoxelCoord::new(4, 4, 4);
        let h = extract_features(&spec, &inputs, l).unwrap();
        assert_eq!(h.len(), 2 * 4);
        let patch = extract_patch(&vol, l, cb.dictionary.patch()).unwrap();
        let f = encode(&cb.dictionary, &cb.encoder, &patch).unwrap();
        assert_eq!(h, f);
    }

    #[test]
    fn receptive_field_concatenates_in_offset_order() {
        let cb = image_codebook([3, 3, 3], 2, 3);
        let spec = spec_of(Representation::ReceptiveField, 3, vec![1], vec![cb.clone()]);
        let vol = random_volume(Dims::new(11, 11, 11), 1, 4);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let l = VoxelCoord::new(5, 5, 5);
        let h = extract_features(&spec, &inputs, l).unwrap();
        let ed = cb.encoding_dim();
        assert_eq!(h.len(), 27 * ed);
        let mut at = 0;
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = VoxelCoord::new(l.x + dx - 1, l.y + dy - 1, l.z + dz - 1);
                    let patch = extract_patch(&vol, v, cb.dictionary.patch()).unwrap();
                    let f = encode(&cb.dictionary, &cb.encoder, &patch).unwrap();
                    assert_eq!(&h[at..at + ed], f.as_slice(), "offset ({dx},{dy},{dz})");
                    at += ed;
                }
            }
        }
    }

    #[test]
    fn foveated_pooled_half_dominates_center_half() {
        let cb = image_codebook([5, 5, 5], 6, 5);
        let spec = spec_of(Representation::Foveated, 5, vec![1], vec![cb]);
        let vol = random_volume(Dims::new(16, 16, 16), 1, 6);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let h = extract_features(&spec, &inputs, VoxelCoord::new(8, 8, 8)).unwrap();
        let ed = h.len() / 2;
        for j in 0..ed {
            assert!(h[ed + j] >= h[j], "pooled[{j}] < center[{j}]");
        }
    }

    #[test]
    fn cached_and_uncached_paths_agree_bitwise() {
        let cb1 = image_codebook([5, 5, 5], 4, 7);
        let cb2 = image_codebook([5, 5, 5], 4, 8);
        let spec = FeatureExtractorSpec {
            representation: Representation::Foveated,
            neighborhood: [3; 3],
            pooling: Pooling::Average,
            scales: vec![1, 2],
            groups: vec![ChannelGroup::Image],
            codebooks: vec![cb1, cb2],
        };
        let vol = random_volume(Dims::new(24, 24, 24), 1, 9);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let plain = FeatureContext::new(&spec, &inputs).unwrap();
        let cached = FeatureContext::cached(&spec, &inputs).unwrap();
        let range = plain.valid_range();
        assert!(!range.is_empty());
        for l in range.iter().step_by(7) {
            assert_eq!(plain.features_at(l).unwrap(), cached.features_at(l).unwrap());
        }
    }

    #[test]
    fn multiscale_features_match_manual_assembly() {
        let cb1 = image_codebook([3, 3, 3], 3, 10);
        let cb2 = image_codebook([3, 3, 3], 3, 11);
        let spec = FeatureExtractorSpec {
            representation: Representation::Foveated,
            neighborhood: [3; 3],
            pooling: Pooling::Max,
            scales: vec![1, 2],
            groups: vec![ChannelGroup::Image],
            codebooks: vec![cb1.clone(), cb2.clone()],
        };
        let vol = random_volume(Dims::new(20, 20, 20), 1, 12);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let l = VoxelCoord::new(10, 9, 11);
        let h = extract_features(&spec, &inputs, l).unwrap();

        let mut expect = Vec::new();
        for (cb, s) in [(&cb1, 1usize), (&cb2, 2usize)] {
            let ds = downsample_average(&vol, s).unwrap();
            let c = VoxelCoord::new(l.x / s, l.y / s, l.z / s);
            let enc_at = |v: VoxelCoord| {
                let patch = extract_patch(&ds, v, cb.dictionary.patch()).unwrap();
                encode(&cb.dictionary, &cb.encoder, &patch).unwrap()
            };
            expect.extend(enc_at(c));
            let mut offs = Vec::new();
            for dz in 0..3usize {
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        offs.push(enc_at(VoxelCoord::new(c.x + dx - 1, c.y + dy - 1, c.z + dz - 1)));
                    }
                }
            }
            let refs: Vec<&[f32]> = offs.iter().map(|e| e.as_slice()).collect();
            expect.extend(pool(&refs, Pooling::Max).unwrap());
        }
        assert_eq!(h, expect);
    }

    #[test]
    fn out_of_margin_location_is_an_error() {
        let cb = image_codebook([5, 5, 5], 2, 13);
        let spec = spec_of(Representation::Foveated, 5, vec![1], vec![cb]);
        let vol = random_volume(Dims::new(12, 12, 12), 1, 14);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        assert!(extract_features(&spec, &inputs, VoxelCoord::new(3, 6, 6)).is_err());
        assert!(extract_features(&spec, &inputs, VoxelCoord::new(6, 6, 6)).is_ok());
    }

    #[test]
    fn table_one_dimensions_and_fovs() {
        let m5 = [5usize; 3];
        let rf = Representation::ReceptiveField;
        let fv = Representation::Foveated;
        // 5^3 RF: dict 32 -> 2k = 64, 1 scale, m = 5.
        assert_eq!(representation_dims(rf, m5, 1, &[64]), 8000);
        // SS: dict 4000, m = 1.
        assert_eq!(representation_dims(rf, [1; 3], 1, &[8000]), 8000);
        // SS-FV-2d: dict 2000.
        assert_eq!(representation_dims(fv, [5, 5, 1], 1, &[4000]), 8000);
        // SS-FV: dict 2000.
        assert_eq!(representation_dims(fv, m5, 1, &[4000]), 8000);
        // MS-FV: two scales, dict 1000 each.
        assert_eq!(representation_dims(fv, m5, 2, &[2000]), 8000);
    }

    #[test]
    fn field_of_view_matches_reference_architectures() {
        // Spot-check the geometry calculators with tiny dictionaries; fov
        // depends only on patch, neighborhood, and scales.
        let make = |rep, m: [usize; 3], scales: Vec<usize>, patch: [usize; 3]| {
            let cbs: Vec<VqCodebook> = (0..scales.len())
                .map(|i| {
                    let mut cb = image_codebook([1, 1, 1], 2, 20 + i as u64);
                    cb.dictionary = {
                        let spec = PatchSpec::new(patch, ChannelGroup::Image).unwrap();
                        let mut rng = ChaCha8Rng::seed_from_u64(30 + i as u64);
                        let patches: Vec<Vec<f32>> = (0..spec.len().max(4) * 2)
                            .map(|_| (0..spec.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                            .collect();
                        learn_dictionary_omp1(&patches, &spec, 2, 2, 0).unwrap()
                    };
                    cb
                })
                .collect();
            FeatureExtractorSpec {
                representation: rep,
                neighborhood: m,
                pooling: Pooling::Max,
                scales,
                groups: vec![ChannelGroup::Image],
                codebooks: cbs,
            }
        };
        let rf = Representation::ReceptiveField;
        let fv = Representation::Foveated;
        assert_eq!(make(rf, [5; 3], vec![1], [5; 3]).field_of_view(), [9, 9, 9]);
        assert_eq!(make(rf, [1; 3], vec![1], [5; 3]).field_of_view(), [5, 5, 5]);
        assert_eq!(make(fv, [5, 5, 1], vec![1], [5, 5, 1]).field_of_view(), [9, 9, 1]);
        assert_eq!(make(fv, [5; 3], vec![1], [5; 3]).field_of_view(), [9, 9, 9]);
        assert_eq!(make(fv, [5; 3], vec![1, 2], [5; 3]).field_of_view(), [18, 18, 18]);
    }

    #[test]
    fn features_are_sensitive_to_some_fov_boundary_voxel() {
        // Complements the containment property: with a random dictionary, at
        // least one voxel on the influence-region boundary must be able to
        // change the features.
        let cb1 = image_codebook([5, 5, 5], 4, 30);
        let cb2 = image_codebook([5, 5, 5], 4, 31);
        let spec = FeatureExtractorSpec {
            representation: Representation::Foveated,
            neighborhood: [5; 3],
            pooling: Pooling::Max,
            scales: vec![1, 2],
            groups: vec![ChannelGroup::Image],
            codebooks: vec![cb1, cb2],
        };
        let dims = Dims::new(40, 40, 40);
        let vol = random_volume(dims, 1, 32);
        let inputs = GroupInputs::image_only(&vol).unwrap();
        let l = VoxelCoord::new(20, 19, 21);
        let region = spec.influence_region(dims, l);
        let baseline = extract_features(&spec, &inputs, l).unwrap();
        let on_boundary = |v: VoxelCoord| {
            v.x == region.lo.x
                || v.x == region.hi.x - 1
                || v.y == region.lo.y
                || v.y == region.hi.y - 1
                || v.z == region.lo.z
                || v.z == region.hi.z - 1
        };
        let mut sensitive = false;
        'outer: for v in region.iter().filter(|&v| on_boundary(v)) {
            for value in [1500.0f32, -1500.0] {
                let mut perturbed = vol.clone();
                perturbed.set(v.x, v.y, v.z, 0, value);
                let pin = GroupInputs::image_only(&perturbed).unwrap();
                if extract_features(&spec, &pin, l).unwrap() != baseline {
                    sensitive = true;
                    break 'outer;
                }
            }
        }
        assert!(sensitive, "no fov-boundary voxel can influence the features");
    }

    #[test]
    fn influence_region_width_equals_declared_fov() {
        let cb1 = image_codebook([5, 5, 5], 2, 15);
        let cb2 = image_codebook([5, 5, 5], 2, 16);
        let spec = FeatureExtractorSpec {
            representation: Representation::Foveated,
            neighborhood: [5; 3],
            pooling: Pooling::Max,
            scales: vec![1, 2],
            groups: vec![ChannelGroup::Image],
            codebooks: vec![cb1, cb2],
        };
        let dims = Dims::new(48, 48, 48);
        let range = spec.valid_range(dims);
        for l in range.iter().step_by(11) {
            let region = spec.influence_region(dims, l);
            assert_eq!(region.hi.x - region.lo.x, spec.field_of_view()[0]);
            assert!(region.contains(l));
        }
    }
}
