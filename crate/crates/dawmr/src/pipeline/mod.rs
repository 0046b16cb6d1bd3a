//! Full network orchestration: per-iteration training (dictionaries, feature
//! precompute, normalizer, MLP), recursive stacking on affinity outputs, LED
//! weighting, inference, and field-of-view accounting.

pub mod bundle;
mod led;
mod shard;

pub use led::{
    compute_led_mask, merge_masks, LedMask, DEFAULT_LED_FRACTION, DEFAULT_LED_MULTIPLIER,
    DEFAULT_LED_WINDOW,
};
pub use shard::{
    precompute_features, read_shard, record_bytes, write_shard, FeatureRecord, FeatureStore,
    SHARD_HEADER_BYTES, SHARD_MAGIC, SHARD_VERSION,
};

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::features::{
    extract_patch, fit_normalizer, fit_whitening, learn_dictionary_kmeans, learn_dictionary_omp1,
    representation_dims, ChannelGroup, EncoderConfig, FeatureContext, FeatureExtractorSpec,
    FeatureNormalizer, GroupInputs, PatchSpec, Pooling, Representation, VqCodebook,
};
use crate::metrics::{
    auc_edge, balanced_accuracy, rand_curve, MetricsReport, ThresholdSweep,
    DEFAULT_SWEEP_QUANTILES,
};
use crate::mlp::{train as train_mlp, BalancedSampler, FeatureSource, MlpNet, MlpParams, TrainConfig};
use crate::volume::{
    affinities_from_segmentation, augment_eightfold, downsample_average, subsample_locations_within,
    AffinityGraph, BoundingBox, CatalogEntry, DihedralElement, Dims, SegmentationVolume,
    SubvolumeCatalog, Volume, VoxelCoord,
};
use crate::{derive_seed, Error, Result};

/// Dictionary learning method paired with its encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// OMP-1 dictionary with soft-threshold reverse-polarity encoding.
    Omp1Soft,
    /// K-means dictionary with triangle encoding.
    KmeansTriangle,
}

/// Architecture template for one iteration's feature extraction stage.
#[derive(Debug, Clone)]
pub struct ArchitectureConfig {
    pub patch_side: [usize; 3],
    pub representation: Representation,
    pub neighborhood: [usize; 3],
    pub pooling: Pooling,
    pub scales: Vec<usize>,
    /// Per-scale dictionary budget, split equally across channel groups.
    pub dict_size: usize,
    pub encoder: EncoderKind,
    pub alpha: f32,
    pub whitening: bool,
    pub epsilon_zca: f64,
    pub epsilon_cn: f64,
    /// Patches sampled per codebook during dictionary learning.
    pub dict_patches: usize,
    pub dict_epochs: usize,
}

impl Default for ArchitectureConfig {
    /// The multiscale foveated defaults: 5^3 patches, 5^3 max pooling,
    /// scales [1, 2], dictionary 1000 per scale.
    fn default() -> Self {
        ArchitectureConfig {
            patch_side: [5; 3],
            representation: Representation::Foveated,
            neighborhood: [5; 3],
            pooling: Pooling::Max,
            scales: vec![1, 2],
            dict_size: 1000,
            encoder: EncoderKind::Omp1Soft,
            alpha: 0.25,
            whitening: false,
            epsilon_zca: 0.1,
            epsilon_cn: 1.0,
            dict_patches: 10_000,
            dict_epochs: 10,
        }
    }
}

impl ArchitectureConfig {
    /// Channel groups read by iteration `i` (1-based): the image alone first,
    /// then image plus the previous iteration's affinity output.
    pub fn groups_for_iteration(iteration: usize) -> Vec<ChannelGroup> {
        if iteration <= 1 {
            vec![ChannelGroup::Image]
        } else {
            vec![ChannelGroup::Image, ChannelGroup::Affinity]
        }
    }

    /// Per-group dictionary size for an iteration; the per-scale budget is
    /// divided equally between the groups.
    pub fn dict_size_per_group(&self, iteration: usize) -> Result<usize> {
        let groups = Self::groups_for_iteration(iteration).len();
        if !self.dict_size.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "dict_size {} is not divisible by {} channel groups",
                self.dict_size, groups
            )));
        }
        Ok(self.dict_size / groups)
    }

    fn encoder_config(&self) -> EncoderConfig {
        match self.encoder {
            EncoderKind::Omp1Soft => EncoderConfig::soft_threshold(self.alpha),
            EncoderKind::KmeansTriangle => EncoderConfig::triangle(),
        }
    }

    fn encoding_dim(&self, k: usize) -> usize {
        self.encoder_config().encoding_dim(k)
    }

    /// Declared per-axis field of view: `max over scales of
    /// (patch + neighborhood - 1) * scale`.
    pub fn field_of_view(&self) -> [usize; 3] {
        let mut fov = [0usize; 3];
        for &s in &self.scales {
            for (a, f) in fov.iter_mut().enumerate() {
                *f = (*f).max((self.patch_side[a] + self.neighborhood[a] - 1) * s);
            }
        }
        fov
    }

    /// Feature dimensionality the extractor will produce at iteration `i`.
    pub fn feature_dims(&self, iteration: usize) -> Result<usize> {
        let groups = Self::groups_for_iteration(iteration);
        let k = self.dict_size_per_group(iteration)?;
        let per_group: Vec<usize> = groups.iter().map(|_| self.encoding_dim(k)).collect();
        Ok(representation_dims(
            self.representation,
            self.neighborhood,
            self.scales.len(),
            &per_group,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        PatchSpec::new(self.patch_side, ChannelGroup::Image)?;
        if self.neighborhood.iter().any(|&m| m == 0 || m % 2 == 0) {
            return Err(Error::InvalidArgument("neighborhood sides must be odd".into()));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::InvalidArgument("scales must be non-empty and >= 1".into()));
        }
        if self.dict_size == 0 {
            return Err(Error::InvalidArgument("dict_size must be >= 1".into()));
        }
        if self.dict_patches < self.dict_size {
            return Err(Error::InvalidArgument(
                "dict_patches must be at least dict_size".into(),
            ));
        }
        if self.dict_epochs == 0 {
            return Err(Error::InvalidArgument("dict_epochs must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// LED weighting parameters.
#[derive(Debug, Clone)]
pub struct LedConfig {
    pub window: usize,
    pub fraction: f64,
    pub multiplier: f64,
    /// Share of the update budget used by the preview classifier.
    pub preview_fraction: f64,
}

impl Default for LedConfig {
    fn default() -> Self {
        LedConfig {
            window: DEFAULT_LED_WINDOW,
            fraction: DEFAULT_LED_FRACTION,
            multiplier: DEFAULT_LED_MULTIPLIER,
            preview_fraction: 0.2,
        }
    }
}

/// Everything needed to train a full (possibly recursive) network.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub iterations: usize,
    pub led: Option<LedConfig>,
    pub augment: bool,
    pub subsample_fraction: f64,
    /// Records used to fit the feature normalizer.
    pub normalizer_sample: usize,
    pub shard_count: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            iterations: 1,
            led: None,
            augment: false,
            subsample_fraction: 1.0,
            normalizer_sample: 100_000,
            shard_count: 8,
            workers: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::InvalidArgument("subsample_fraction must be in (0, 1]".into()));
        }
        if self.normalizer_sample < 2 {
            return Err(Error::InvalidArgument("normalizer_sample must be >= 2".into()));
        }
        if self.shard_count == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument("shard_count and workers must be >= 1".into()));
        }
        if let Some(led) = &self.led {
            if led.window == 0 || led.window % 2 == 0 {
                return Err(Error::InvalidArgument("led_window must be odd".into()));
            }
            if !(led.fraction > 0.0 && led.fraction < 1.0) {
                return Err(Error::InvalidArgument("led_frac must be in (0, 1)".into()));
            }
            if led.multiplier < 1.0 {
                return Err(Error::InvalidArgument("led_multiplier must be >= 1".into()));
            }
            if !(led.preview_fraction > 0.0 && led.preview_fraction <= 1.0) {
                return Err(Error::InvalidArgument("preview fraction must be in (0, 1]".into()));
            }
        }
        // Check the dictionary split up front for every iteration depth.
        for i in 1..=self.iterations {
            self.arch.dict_size_per_group(i)?;
        }
        Ok(())
    }
}

/// One trained recursion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationModel {
    /// 1-based recursion index; stage 1 reads the image only.
    pub index: usize,
    pub spec: FeatureExtractorSpec,
    pub normalizer: FeatureNormalizer,
    pub mlp: MlpParams,
}

/// An affinity prediction plus the box of voxels with full field-of-view
/// support; voxels outside `valid` hold affinity 0 and are not trustworthy.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub affinities: AffinityGraph,
    pub valid: BoundingBox,
}

/// One stage of an inference chain. Implemented by [`IterationModel`]; tests
/// substitute stubs to exercise the recursion plumbing in isolation.
pub trait InferStage {
    fn needs_affinity(&self) -> bool;
    fn infer_within(&self, inputs: &GroupInputs<'_>, support: BoundingBox) -> Result<Prediction>;
}

impl IterationModel {
    pub fn infer(&self, inputs: &GroupInputs<'_>) -> Result<Prediction> {
        self.infer_within(inputs, BoundingBox::whole(inputs.dims()))
    }

    fn predict_box(
        &self,
        ctx: &FeatureContext<'_>,
        net: &MlpNet,
        out_box: BoundingBox,
        offset: VoxelCoord,
        out: &mut AffinityGraph,
    ) {
        let coords: Vec<VoxelCoord> = out_box.iter().collect();
        let results: Vec<[f32; 3]> = coords
            .par_iter()
            .map_init(
                || Vec::with_capacity(self.spec.feature_dims()),
                |buf, &l| {
                    ctx.features_into(l, buf).expect("support checked by valid range");
                    self.normalizer.apply_in_place(buf);
                    net.predict_one(buf)
                },
            )
            .collect();
        for (l, o) in coords.iter().zip(results) {
            let g = VoxelCoord::new(l.x + offset.x, l.y + offset.y, l.z + offset.z);
            for (axis, &value) in crate::volume::Axis::ALL.iter().zip(&o) {
                out.set_edge(g, *axis, value);
            }
        }
    }

    /// Evaluate in aligned tiles with margins; bit-identical to the
    /// monolithic path by construction (tile crops are aligned to the scale
    /// lattice, so every downsampled block sees the same source voxels).
    pub fn infer_tiled(
        &self,
        inputs: &GroupInputs<'_>,
        support: BoundingBox,
        tile: usize,
    ) -> Result<Prediction> {
        if tile == 0 {
            return Err(Error::InvalidArgument("tile size must be >= 1".into()));
        }
        let dims = inputs.dims();
        let valid = self.spec.valid_range_within(dims, support);
        let mut out = AffinityGraph::zeros(dims);
        if valid.is_empty() {
            return Ok(Prediction { affinities: out, valid });
        }
        let align = self.spec.scales.iter().fold(1usize, |a, &s| lcm(a, s));
        let net = MlpNet::from_params(&self.mlp);
        let mut tz = valid.lo.z;
        while tz < valid.hi.z {
            let mut ty = valid.lo.y;
            while ty < valid.hi.y {
                let mut tx = valid.lo.x;
                while tx < valid.hi.x {
                    let out_box = BoundingBox::new(
                        VoxelCoord::new(tx, ty, tz),
                        VoxelCoord::new(
                            (tx + tile).min(valid.hi.x),
                            (ty + tile).min(valid.hi.y),
                            (tz + tile).min(valid.hi.z),
                        ),
                    );
                    let crop_box = self.tile_input_box(dims, &out_box, align);
                    let img_crop = inputs.image_ref().crop(&crop_box);
                    let aff_crop = inputs.affinity_ref().map(|a| a.crop(&crop_box));
                    let crop_inputs = match &aff_crop {
                        Some(a) => GroupInputs::with_affinity(&img_crop, a)?,
                        None => GroupInputs::image_only(&img_crop)?,
                    };
                    let ctx = FeatureContext::cached(&self.spec, &crop_inputs)?;
                    let local = BoundingBox::new(
                        VoxelCoord::new(
                            out_box.lo.x - crop_box.lo.x,
                            out_box.lo.y - crop_box.lo.y,
                            out_box.lo.z - crop_box.lo.z,
                        ),
                        VoxelCoord::new(
                            out_box.hi.x - crop_box.lo.x,
                            out_box.hi.y - crop_box.lo.y,
                            out_box.hi.z - crop_box.lo.z,
                        ),
                    );
                    self.predict_box(&ctx, &net, local, crop_box.lo, &mut out);
                    tx += tile;
                }
                ty += tile;
            }
            tz += tile;
        }
        Ok(Prediction { affinities: out, valid })
    }

    /// Input voxels a tile of output locations depends on, expanded to the
    /// scale lattice.
    fn tile_input_box(&self, dims: Dims, out_box: &BoundingBox, align: usize) -> BoundingBox {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let lo_l = [out_box.lo.x, out_box.lo.y, out_box.lo.z];
        let hi_l = [out_box.hi.x - 1, out_box.hi.y - 1, out_box.hi.z - 1];
        for (si, &s) in self.spec.scales.iter().enumerate() {
            let need = self.spec.need_at_scale(si);
            for a in 0..3 {
                lo[a] = lo[a].min((lo_l[a] / s - need[a]) * s);
                hi[a] = hi[a].max((hi_l[a] / s + need[a] + 1) * s);
            }
        }
        let d = [dims.x, dims.y, dims.z];
        for a in 0..3 {
            lo[a] -= lo[a] % align;
            hi[a] = hi[a].div_ceil(align).saturating_mul(align).min(d[a]);
        }
        BoundingBox::new(VoxelCoord::new(lo[0], lo[1], lo[2]), VoxelCoord::new(hi[0], hi[1], hi[2]))
    }
}

impl InferStage for IterationModel {
    fn needs_affinity(&self) -> bool {
        self.index >= 2
    }

    fn infer_within(&self, inputs: &GroupInputs<'_>, support: BoundingBox) -> Result<Prediction> {
        let dims = inputs.dims();
        let valid = self.spec.valid_range_within(dims, support);
        let mut out = AffinityGraph::zeros(dims);
        if !valid.is_empty() {
            let ctx = FeatureContext::cached(&self.spec, inputs)?;
            let net = MlpNet::from_params(&self.mlp);
            self.predict_box(&ctx, &net, valid, VoxelCoord::new(0, 0, 0), &mut out);
        }
        Ok(Prediction { affinities: out, valid })
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Run a chain of stages on one image: stage `i + 1` receives stage `i`'s
/// affinity output next to the raw image, and the trustworthy region shrinks
/// by each stage's field of view.
pub fn infer_chain(stages: &[&dyn InferStage], image: &Volume) -> Result<Vec<Prediction>> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("empty inference chain".into()));
    }
    let mut predictions: Vec<Prediction> = Vec::with_capacity(stages.len());
    let mut support = BoundingBox::whole(image.dims());
    let mut prev_affinity: Option<Volume> = None;
    for stage in stages {
        let pred = if stage.needs_affinity() {
            let aff = prev_affinity.as_ref().ok_or_else(|| {
                Error::InvalidArgument("stage needs an affinity input but none is available".into())
            })?;
            stage.infer_within(&GroupInputs::with_affinity(image, aff)?, support)?
        } else {
            stage.infer_within(&GroupInputs::image_only(image)?, support)?
        };
        support = pred.valid;
        prev_affinity = Some(pred.affinities.volume().clone());
        predictions.push(pred);
    }
    Ok(predictions)
}

/// A full trained network: ordered recursion stages plus the cumulative LED
/// masks (per training subvolume) that shaped training.
#[derive(Debug, Clone)]
pub struct DawmrModel {
    pub iterations: Vec<IterationModel>,
    pub led_masks: Vec<Option<LedMask>>,
}

impl DawmrModel {
    /// Per-stage predictions on a raw image; the last entry is the final
    /// output.
    pub fn infer(&self, image: &Volume) -> Result<Vec<Prediction>> {
        let stages: Vec<&dyn InferStage> =
            self.iterations.iter().map(|m| m as &dyn InferStage).collect();
        infer_chain(&stages, image)
    }

    /// Total field of view per axis, summed over iterations (the reporting
    /// convention of the originating architecture tables).
    pub fn field_of_view(&self) -> [usize; 3] {
        let mut total = [0usize; 3];
        for m in &self.iterations {
            let f = m.spec.field_of_view();
            for a in 0..3 {
                total[a] += f[a];
            }
        }
        total
    }

    /// Strict receptive-field composition: window sizes compose as
    /// `w1 + sum(wi - 1)`.
    pub fn field_of_view_strict(&self) -> [usize; 3] {
        let mut total = [0usize; 3];
        for (i, m) in self.iterations.iter().enumerate() {
            let f = m.spec.field_of_view();
            for a in 0..3 {
                total[a] += if i == 0 { f[a] } else { f[a] - 1 };
            }
        }
        total
    }
}

/// Expand a catalog by the eightfold augmentation orbit, regenerating labels
/// from each transformed segmentation.
pub fn prepare_catalog(catalog: &SubvolumeCatalog, augment: bool) -> Result<SubvolumeCatalog> {
    if catalog.is_empty() {
        return Err(Error::InvalidArgument("catalog has no subvolumes".into()));
    }
    if !augment {
        return Ok(catalog.clone());
    }
    let mut entries = Vec::with_capacity(catalog.entries.len() * 8);
    for entry in &catalog.entries {
        let orbit = augment_eightfold(&entry.segmentation, &entry.image)?;
        for (element, (img, seg)) in DihedralElement::all().iter().zip(orbit) {
            let region = element.transform_box(&entry.region, entry.image.dims());
            entries.push(CatalogEntry::new(img, seg, region)?);
        }
    }
    Ok(SubvolumeCatalog::new(entries))
}

struct PreparedIteration {
    spec: FeatureExtractorSpec,
    normalizer: FeatureNormalizer,
    store: FeatureStore,
    /// Catalog entry index of each record, aligned with `store`.
    origins: Vec<u32>,
}

fn entry_inputs<'a>(entry: &'a CatalogEntry, affinity: Option<&'a Volume>) -> Result<GroupInputs<'a>> {
    match affinity {
        Some(aff) => GroupInputs::with_affinity(&entry.image, aff),
        None => GroupInputs::image_only(&entry.image),
    }
}

/// Learn the codebooks for one iteration of the architecture, sampling
/// patches across all catalog entries. `affinities` (one volume per entry)
/// is required from iteration 2 on.
pub fn learn_codebooks_for(
    catalog: &SubvolumeCatalog,
    cfg: &PipelineConfig,
    iteration: usize,
    affinities: Option<&[Volume]>,
) -> Result<Vec<VqCodebook>> {
    let supports: Vec<BoundingBox> =
        catalog.entries.iter().map(|e| BoundingBox::whole(e.image.dims())).collect();
    learn_codebooks(catalog, &supports, affinities, cfg, iteration)
}

/// Learn the codebooks for one iteration across all catalog entries.
fn learn_codebooks(
    catalog: &SubvolumeCatalog,
    supports: &[BoundingBox],
    affinities: Option<&[Volume]>,
    cfg: &PipelineConfig,
    iteration: usize,
) -> Result<Vec<VqCodebook>> {
    let arch = &cfg.arch;
    let groups = ArchitectureConfig::groups_for_iteration(iteration);
    let k = arch.dict_size_per_group(iteration)?;
    // Downsampled volumes, lazily built per (entry, scale index, group).
    let mut scaled: HashMap<(usize, usize, usize), Volume> = HashMap::new();
    let mut codebooks = Vec::with_capacity(arch.scales.len() * groups.len());
    for (si, &scale) in arch.scales.iter().enumerate() {
        for (gi, &group) in groups.iter().enumerate() {
            let spec = PatchSpec::new(arch.patch_side, group)?;
            let hp = spec.half();
            // Eligible entries and their patch-center boxes at this scale.
            let mut eligible: Vec<(usize, BoundingBox)> = Vec::new();
            for (e, entry) in catalog.entries.iter().enumerate() {
                let dims = entry.image.dims();
                let sup = supports[e];
                let mut lo = [0usize; 3];
                let mut hi = [0usize; 3];
                let mut ok = true;
                for a in 0..3 {
                    let wlo = [sup.lo.x, sup.lo.y, sup.lo.z][a];
                    let whi = [sup.hi.x, sup.hi.y, sup.hi.z][a].min([dims.x, dims.y, dims.z][a]);
                    let lo_cells = wlo.div_ceil(scale);
                    let hi_cells = whi / scale;
                    if hi_cells < lo_cells + 2 * hp[a] + 1 {
                        ok = false;
                        break;
                    }
                    lo[a] = lo_cells + hp[a];
                    hi[a] = hi_cells - hp[a];
                }
                if ok {
                    eligible.push((
                        e,
                        BoundingBox::new(
                            VoxelCoord::new(lo[0], lo[1], lo[2]),
                            VoxelCoord::new(hi[0], hi[1], hi[2]),
                        ),
                    ));
                }
            }
            if eligible.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no subvolume is large enough to sample {}x{}x{} patches at scale {scale}",
                    arch.patch_side[0], arch.patch_side[1], arch.patch_side[2]
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                iteration as u64,
                &format!("dict-{si}-{gi}"),
            ));
            let mut patches = Vec::with_capacity(arch.dict_patches);
            for _ in 0..arch.dict_patches {
                let (e, window) = eligible[rng.gen_range(0..eligible.len())];
                let key = (e, si, gi);
                if let std::collections::hash_map::Entry::Vacant(slot) = scaled.entry(key) {
                    let vol = match group {
                        ChannelGroup::Image => &catalog.entries[e].image,
                        ChannelGroup::Affinity => affinities
                            .and_then(|a| a.get(e))
                            .ok_or_else(|| Error::InvalidArgument(
                                "iteration >= 2 needs affinity inputs for dictionary learning".into(),
                            ))?,
                    };
                    slot.insert(downsample_average(vol, scale)?);
                }
                let center = VoxelCoord::new(
                    rng.gen_range(window.lo.x..window.hi.x),
                    rng.gen_range(window.lo.y..window.hi.y),
                    rng.gen_range(window.lo.z..window.hi.z),
                );
                patches.push(extract_patch(&scaled[&key], center, &spec)?);
            }
            let whitening = if arch.whitening {
                let t = fit_whitening(&patches, arch.epsilon_zca, true, arch.epsilon_cn)?;
                for p in &mut patches {
                    *p = t.apply(p);
                }
                Some(t)
            } else {
                None
            };
            let seed = derive_seed(cfg.seed, iteration as u64, &format!("dict-learn-{si}-{gi}"));
            let dictionary = match arch.encoder {
                EncoderKind::Omp1Soft => {
                    learn_dictionary_omp1(&patches, &spec, k, arch.dict_epochs, seed)?
                }
                EncoderKind::KmeansTriangle => {
                    learn_dictionary_kmeans(&patches, &spec, k, arch.dict_epochs, seed)?
                }
            };
            codebooks.push(VqCodebook { dictionary, encoder: arch.encoder_config(), whitening });
        }
    }
    Ok(codebooks)
}

fn prepare_iteration(
    catalog: &SubvolumeCatalog,
    supports: &[BoundingBox],
    affinities: Option<&[Volume]>,
    cfg: &PipelineConfig,
    iteration: usize,
    work_dir: &Path,
) -> Result<PreparedIteration> {
    let codebooks = learn_codebooks(catalog, supports, affinities, cfg, iteration)?;
    let spec = FeatureExtractorSpec {
        representation: cfg.arch.representation,
        neighborhood: cfg.arch.neighborhood,
        pooling: cfg.arch.pooling,
        scales: cfg.arch.scales.clone(),
        groups: ArchitectureConfig::groups_for_iteration(iteration),
        codebooks,
    };
    spec.validate()?;

    // Locations: labeled, inside the margin-clipped region, subsampled.
    let regions: Vec<BoundingBox> = catalog
        .entries
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            entry
                .region
                .intersect(&spec.valid_range_within(entry.image.dims(), supports[e]))
        })
        .collect();
    let picked = subsample_locations_within(
        catalog,
        &regions,
        cfg.subsample_fraction,
        derive_seed(cfg.seed, iteration as u64, "subsample"),
    )?;
    if picked.is_empty() {
        return Err(Error::InvalidArgument(
            "insufficient labeled interior after field-of-view clipping".into(),
        ));
    }

    // Parallel feature precompute into shard files, per entry.
    let mut store = FeatureStore::new(spec.feature_dims());
    let mut origins: Vec<u32> = Vec::new();
    for (e, entry) in catalog.entries.iter().enumerate() {
        let locations: Vec<VoxelCoord> =
            picked.iter().filter(|(pe, _)| *pe == e).map(|(_, l)| *l).collect();
        if locations.is_empty() {
            continue;
        }
        let inputs = entry_inputs(entry, affinities.map(|a| &a[e]))?;
        let ctx = FeatureContext::cached(&spec, &inputs)?;
        let paths = precompute_features(
            &ctx,
            &entry.mask,
            &locations,
            work_dir,
            &format!("iter{iteration}_entry{e}"),
            cfg.shard_count,
            cfg.workers,
        )?;
        let before = FeatureSource::len(&store);
        for p in &paths {
            store.append_shard(p)?;
        }
        let added = FeatureSource::len(&store) - before;
        origins.extend(std::iter::repeat_n(e as u32, added));
    }

    // Fit the normalizer on a deterministic record sample, then standardize
    // the store in place.
    let n = FeatureSource::len(&store);
    let sample: Vec<usize> = if n <= cfg.normalizer_sample {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            iteration as u64,
            "normalizer",
        ));
        let mut idx = rand::seq::index::sample(&mut rng, n, cfg.normalizer_sample).into_vec();
        idx.sort_unstable();
        idx
    };
    let rows: Vec<&[f32]> = sample
        .iter()
        .map(|&i| FeatureSource::features(&store, i))
        .collect();
    let normalizer = fit_normalizer(&rows, crate::features::DEFAULT_SIGMA_MIN)?;
    drop(rows);
    store.normalize(&normalizer);

    Ok(PreparedIteration { spec, normalizer, store, origins })
}

fn led_record_weights(
    prepared: &PreparedIteration,
    masks: &[Option<LedMask>],
    multiplier: f64,
) -> Option<Vec<f64>> {
    if masks.iter().all(|m| m.is_none()) {
        return None;
    }
    let n = FeatureSource::len(&prepared.store);
    let mut weights = vec![1.0f64; n];
    for (i, w) in weights.iter_mut().enumerate() {
        let entry = prepared.origins[i] as usize;
        if let Some(mask) = &masks[entry] {
            if mask.is_masked(prepared.store.location(i)) {
                *w = multiplier;
            }
        }
    }
    Some(weights)
}

fn train_stage(
    prepared: &PreparedIteration,
    cfg: &PipelineConfig,
    iteration: usize,
    weights: Option<Vec<f64>>,
    updates: usize,
    tag: &str,
) -> Result<MlpParams> {
    let mut sampler = BalancedSampler::new(
        prepared.store.all_labels(),
        weights.as_deref(),
        derive_seed(cfg.seed, iteration as u64, &format!("sampler{tag}")),
    )?;
    let train_cfg = TrainConfig {
        updates,
        seed: derive_seed(cfg.seed, iteration as u64, &format!("mlp{tag}")),
        ..cfg.train.clone()
    };
    train_mlp(&prepared.store, &train_cfg, &mut sampler)
}

/// Train one iteration (the full stack: dictionaries, features, normalizer,
/// MLP). Equivalent to [`train_recursive`] with one iteration.
pub fn train_iteration(
    catalog: &SubvolumeCatalog,
    cfg: &PipelineConfig,
    work_dir: &Path,
) -> Result<IterationModel> {
    let single = PipelineConfig { iterations: 1, ..cfg.clone() };
    let model = train_recursive(catalog, &single, work_dir)?;
    Ok(model.iterations.into_iter().next().expect("one iteration"))
}

/// Train the full recursive network: each iteration learns fresh
/// unsupervised and supervised parameters, consumes the previous iteration's
/// affinity output, and (with LED enabled) oversamples locations whose
/// neighborhoods a preview classifier got mostly wrong.
pub fn train_recursive(
    catalog: &SubvolumeCatalog,
    cfg: &PipelineConfig,
    work_dir: &Path,
) -> Result<DawmrModel> {
    cfg.validate()?;
    let working = prepare_catalog(catalog, cfg.augment)?;
    let entries = working.entries.len();
    let mut supports: Vec<BoundingBox> =
        working.entries.iter().map(|e| BoundingBox::whole(e.image.dims())).collect();
    let mut affinity_inputs: Option<Vec<Volume>> = None;
    let mut cumulative: Vec<Option<LedMask>> = vec![None; entries];
    let mut models: Vec<IterationModel> = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let prepared = prepare_iteration(
            &working,
            &supports,
            affinity_inputs.as_deref(),
            cfg,
            iteration,
            work_dir,
        )?;

        if let Some(led) = &cfg.led {
            let preview_updates =
                ((led.preview_fraction * cfg.train.updates as f64).round() as usize).max(1);
            let preview_weights = led_record_weights(&prepared, &cumulative, led.multiplier);
            let preview_mlp =
                train_stage(&prepared, cfg, iteration, preview_weights, preview_updates, "-preview")?;
            let preview = IterationModel {
                index: iteration,
                spec: prepared.spec.clone(),
                normalizer: prepared.normalizer.clone(),
                mlp: preview_mlp,
            };
            for e in 0..entries {
                let inputs =
                    entry_inputs(&working.entries[e], affinity_inputs.as_ref().map(|a| &a[e]))?;
                let pred = preview.infer_within(&inputs, supports[e])?;
                if pred.valid.is_empty() {
                    continue;
                }
                let truth = working.entries[e].mask.restricted(|v, _| pred.valid.contains(v));
                let mask = compute_led_mask(
                    &pred.affinities,
                    &truth,
                    led.window,
                    led.fraction,
                    led.multiplier,
                )?;
                cumulative[e] = Some(match &cumulative[e] {
                    Some(prev) => merge_masks(prev, &mask)?,
                    None => mask,
                });
            }
        }

        let weights = cfg
            .led
            .as_ref()
            .and_then(|led| led_record_weights(&prepared, &cumulative, led.multiplier));
        let mlp = train_stage(&prepared, cfg, iteration, weights, cfg.train.updates, "")?;
        let model = IterationModel {
            index: iteration,
            spec: prepared.spec,
            normalizer: prepared.normalizer,
            mlp,
        };

        if iteration < cfg.iterations {
            let mut next_affs = Vec::with_capacity(entries);
            let mut next_supports = Vec::with_capacity(entries);
            for e in 0..entries {
                let inputs =
                    entry_inputs(&working.entries[e], affinity_inputs.as_ref().map(|a| &a[e]))?;
                let pred = model.infer_within(&inputs, supports[e])?;
                next_supports.push(pred.valid);
                next_affs.push(pred.affinities.into_volume());
            }
            supports = next_supports;
            affinity_inputs = Some(next_affs);
        }
        models.push(model);
    }
    Ok(DawmrModel { iterations: models, led_masks: cumulative })
}

/// Evaluate a prediction against a ground-truth segmentation: both are
/// cropped to the prediction's valid box, labels are re-derived there, and
/// the Rand-Index sweep uses the requested quantile count.
pub fn evaluate_prediction(
    pred: &Prediction,
    truth: &SegmentationVolume,
    quantiles: usize,
) -> Result<MetricsReport> {
    if pred.affinities.dims() != truth.dims() {
        return Err(Error::DimensionMismatch("prediction / ground truth dims differ".into()));
    }
    if pred.valid.is_empty() {
        return Err(Error::InvalidArgument("prediction has no valid region to evaluate".into()));
    }
    let aff = pred.affinities.crop(&pred.valid);
    let seg = truth.crop(&pred.valid);
    let (_, mask) = affinities_from_segmentation(&seg);
    let sweep = ThresholdSweep::from_affinities(&aff, quantiles.max(1))?;
    Ok(MetricsReport {
        balanced_accuracy: balanced_accuracy(&aff, &mask, 0.5)?,
        auc_edge: auc_edge(&aff, &mask)?,
        rand_curve: rand_curve(&aff, &seg, &sweep)?,
    })
}

/// Default quantile count for evaluation sweeps.
pub const EVAL_SWEEP_QUANTILES: usize = DEFAULT_SWEEP_QUANTILES;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_synthetic, SyntheticParams};

    fn tiny_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            arch: ArchitectureConfig {
                patch_side: [3; 3],
                neighborhood: [3; 3],
                scales: vec![1],
                dict_size: 4,
                dict_patches: 300,
                dict_epochs: 3,
                ..ArchitectureConfig::default()
            },
            train: TrainConfig {
                updates: 100,
                hidden: vec![8],
                ..TrainConfig::default()
            },
            iterations: 1,
            subsample_fraction: 0.3,
            shard_count: 3,
            workers: 2,
            seed,
            ..PipelineConfig::default()
        }
    }

    fn tiny_catalog(seed: u64) -> SubvolumeCatalog {
        let params = SyntheticParams {
            num_seeds: 4,
            boundary_width: 1.0,
            noise_sigma: 10.0,
            blur_sigma: 0.5,
        };
        let (img, seg) = generate_synthetic(Dims::new(16, 16, 16), &params, seed).unwrap();
        SubvolumeCatalog::new(vec![CatalogEntry::whole(img, seg).unwrap()])
    }

    #[test]
    fn degenerate_training_run_completes_with_finite_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let model =
            train_iteration(&tiny_catalog(1), &tiny_config(2), dir.path()).unwrap();
        assert_eq!(model.index, 1);
        assert_eq!(model.mlp.input_dim(), model.spec.feature_dims());
        for layer in model.mlp.weights.iter().chain(&model.mlp.biases) {
            assert!(layer.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn single_iteration_recursive_equals_train_iteration() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let catalog = tiny_catalog(3);
        let cfg = tiny_config(4);
        let single = train_iteration(&catalog, &cfg, dir_a.path()).unwrap();
        let recursive = train_recursive(&catalog, &cfg, dir_b.path()).unwrap();
        assert_eq!(recursive.iterations.len(), 1);
        assert_eq!(single, recursive.iterations[0]);
    }

    #[test]
    fn recursive_training_is_bit_deterministic() {
        let catalog = tiny_catalog(5);
        let mut cfg = tiny_config(6);
        cfg.iterations = 2;
        cfg.train.updates = 50;
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            train_recursive(&catalog, &cfg, dir.path()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iterations.len(), 2);
        for (ma, mb) in a.iterations.iter().zip(&b.iterations) {
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn iteration_two_reads_both_channel_groups() {
        let catalog = tiny_catalog(7);
        let mut cfg = tiny_config(8);
        cfg.iterations = 2;
        cfg.train.updates = 50;
        let dir = tempfile::tempdir().unwrap();
        let model = train_recursive(&catalog, &cfg, dir.path()).unwrap();
        assert_eq!(model.iterations[0].spec.groups, vec![ChannelGroup::Image]);
        assert_eq!(
            model.iterations[1].spec.groups,
            vec![ChannelGroup::Image, ChannelGroup::Affinity]
        );
        // Equal split of the per-scale dictionary budget.
        for cb in &model.iterations[1].spec.codebooks {
            assert_eq!(cb.dictionary.k(), cfg.arch.dict_size / 2);
        }
    }

    #[test]
    fn field_of_view_arithmetic_matches_reference_tables() {
        let arch = ArchitectureConfig::default(); // MS-FV shape
        assert_eq!(arch.feature_dims(1).unwrap(), 8000);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(9);
        cfg.arch.patch_side = [5; 3];
        cfg.arch.neighborhood = [5; 3];
        cfg.arch.scales = vec![1, 2];
        cfg.arch.dict_size = 4;
        let catalog = {
            let params = SyntheticParams {
                num_seeds: 6,
                boundary_width: 1.0,
                noise_sigma: 5.0,
                blur_sigma: 0.0,
            };
            let (img, seg) = generate_synthetic(Dims::new(40, 40, 40), &params, 11).unwrap();
            SubvolumeCatalog::new(vec![CatalogEntry::whole(img, seg).unwrap()])
        };
        cfg.subsample_fraction = 0.02;
        let model = train_iteration(&catalog, &cfg, dir.path()).unwrap();
        assert_eq!(model.spec.field_of_view(), [18, 18, 18]);
        let chain = DawmrModel {
            iterations: vec![model.clone(), model.clone(), model],
            led_masks: Vec::new(),
        };
        assert_eq!(chain.field_of_view(), [54, 54, 54]);
        assert_eq!(chain.field_of_view_strict(), [52, 52, 52]);
    }

    /// Inference stub that copies its affinity input's center value.
    struct CopyAffinityStage {
        margin: usize,
    }

    impl InferStage for CopyAffinityStage {
        fn needs_affinity(&self) -> bool {
            true
        }

        fn infer_within(&self, inputs: &GroupInputs<'_>, support: BoundingBox) -> Result<Prediction> {
            let aff = inputs
                .affinity_ref()
                .ok_or_else(|| Error::InvalidArgument("stub needs affinity".into()))?;
            let valid = support.shrunk([self.margin; 3]);
            let mut out = AffinityGraph::zeros(aff.dims());
            for v in valid.iter() {
                for axis in crate::volume::Axis::ALL {
                    out.set_edge(v, axis, aff.get(v.x, v.y, v.z, axis.channel()));
                }
            }
            Ok(Prediction { affinities: out, valid })
        }
    }

    #[test]
    fn copy_stub_makes_recursion_a_fixed_point() {
        let catalog = tiny_catalog(12);
        let cfg = tiny_config(13);
        let dir = tempfile::tempdir().unwrap();
        let stage1 = train_iteration(&catalog, &cfg, dir.path()).unwrap();
        let stub = CopyAffinityStage { margin: 2 };
        let image = &catalog.entries[0].image;
        let preds = infer_chain(&[&stage1 as &dyn InferStage, &stub], image).unwrap();
        assert_eq!(preds.len(), 2);
        let first = &preds[0];
        let second = &preds[1];
        assert!(!second.valid.is_empty());
        for v in second.valid.iter() {
            for axis in crate::volume::Axis::ALL {
                assert_eq!(second.affinities.edge(v, axis), first.affinities.edge(v, axis));
            }
        }
    }

    #[test]
    fn tiled_inference_is_bit_identical_to_monolithic() {
        let catalog = tiny_catalog(14);
        let mut cfg = tiny_config(15);
        cfg.arch.scales = vec![1, 2];
        cfg.arch.dict_size = 4;
        let dir = tempfile::tempdir().unwrap();
        let params = SyntheticParams {
            num_seeds: 5,
            boundary_width: 1.0,
            noise_sigma: 10.0,
            blur_sigma: 0.5,
        };
        let (img, seg) = generate_synthetic(Dims::new(28, 28, 28), &params, 16).unwrap();
        let big = SubvolumeCatalog::new(vec![CatalogEntry::whole(img, seg).unwrap()]);
        let model = train_iteration(&big, &cfg, dir.path()).unwrap();
        let _ = catalog;
        let image = &big.entries[0].image;
        let inputs = GroupInputs::image_only(image).unwrap();
        let whole = model.infer(&inputs).unwrap();
        for tile in [5, 9, 64] {
            let tiled = model
                .infer_tiled(&inputs, BoundingBox::whole(image.dims()), tile)
                .unwrap();
            assert_eq!(tiled.valid, whole.valid);
            assert_eq!(
                tiled.affinities.volume().data(),
                whole.affinities.volume().data(),
                "tile size {tile}"
            );
        }
    }

    #[test]
    fn model_bundle_round_trips_and_predicts_identically() {
        let catalog = tiny_catalog(20);
        let mut cfg = tiny_config(21);
        cfg.iterations = 2;
        cfg.train.updates = 60;
        let dir = tempfile::tempdir().unwrap();
        let model = train_recursive(&catalog, &cfg, dir.path()).unwrap();
        let bundle_dir = dir.path().join("bundle");
        bundle::save_model(&model, &bundle_dir).unwrap();
        let back = bundle::load_model(&bundle_dir).unwrap();
        assert_eq!(model.iterations, back.iterations);

        let image = &catalog.entries[0].image;
        let a = model.infer(image).unwrap();
        let b = back.infer(image).unwrap();
        assert_eq!(a, b);

        // Saving the reloaded model reproduces the files byte for byte.
        let bundle_dir2 = dir.path().join("bundle2");
        bundle::save_model(&back, &bundle_dir2).unwrap();
        for entry in std::fs::read_dir(&bundle_dir).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(bundle_dir.join(&name)).unwrap();
            let y = std::fs::read(bundle_dir2.join(&name)).unwrap();
            assert_eq!(x, y, "file {name:?} changed across a save/load/save cycle");
        }
    }

    #[test]
    fn evaluate_prediction_reports_all_metrics() {
        let catalog = tiny_catalog(17);
        let cfg = tiny_config(18);
        let dir = tempfile::tempdir().unwrap();
        let model = train_iteration(&catalog, &cfg, dir.path()).unwrap();
        let entry = &catalog.entries[0];
        let inputs = GroupInputs::image_only(&entry.image).unwrap();
        let pred = model.infer(&inputs).unwrap();
        let report = evaluate_prediction(&pred, &entry.segmentation, 50).unwrap();
        assert!(report.balanced_accuracy.mean.is_some());
        assert!(report.rand_curve.max_ri <= 1.0);
        assert!(!report.rand_curve.points.is_empty());
    }
}
