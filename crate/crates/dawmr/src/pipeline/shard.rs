//! Sharded binary feature cache: features are precomputed once, in parallel,
//! and streamed back during MLP training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::features::{FeatureContext, FeatureNormalizer};
use crate::mlp::FeatureSource;
use crate::volume::{LabelMask, VoxelCoord};
use crate::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"DWFS";
pub const SHARD_VERSION: u32 = 1;
/// Header: magic + version + feature dim (u32) + record count (u64).
pub const SHARD_HEADER_BYTES: usize = 4 + 4 + 4 + 8;

/// Bytes per record: 3 x u32 coordinates, 3 x i8 labels, 1 pad byte, then
/// the f32 feature vector.
pub fn record_bytes(dim: usize) -> usize {
    12 + 3 + 1 + 4 * dim
}

/// One record of the feature cache.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub location: VoxelCoord,
    pub labels: [i8; 3],
    pub features: Vec<f32>,
}

/// In-memory concatenation of shard records with a shared feature dim.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    dim: usize,
    locations: Vec<VoxelCoord>,
    labels: Vec<[i8; 3]>,
    features: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> FeatureStore {
        FeatureStore { dim, ..FeatureStore::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, location: VoxelCoord, labels: [i8; 3], features: &[f32]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "record has {} features, store holds {}",
                features.len(),
                self.dim
            )));
        }
        self.locations.push(location);
        self.labels.push(labels);
        self.features.extend_from_slice(features);
        Ok(())
    }

    pub fn location(&self, index: usize) -> VoxelCoord {
        self.locations[index]
    }

    pub fn all_labels(&self) -> &[[i8; 3]] {
        &self.labels
    }

    /// Standardize every stored feature vector in place.
    pub fn normalize(&mut self, normalizer: &FeatureNormalizer) {
        for row in self.features.chunks_mut(self.dim) {
            normalizer.apply_in_place(row);
        }
    }

    /// Append every record of a shard file; the dims must agree.
    pub fn append_shard(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = read_shard(path)?;
        for r in records {
            self.push(r.location, r.labels, &r.features)?;
        }
        Ok(())
    }

    pub fn load_shards(paths: &[PathBuf]) -> Result<FeatureStore> {
        if paths.is_empty() {
            return Err(Error::InvalidArgument("no shard files given".into()));
        }
        let dim = read_shard_header(&paths[0])?.0;
        let mut store = FeatureStore::new(dim);
        for p in paths {
            store.append_shard(p)?;
        }
        Ok(store)
    }
}

impl FeatureSource for FeatureStore {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, index: usize) -> &[f32] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    fn labels(&self, index: usize) -> [i8; 3] {
        self.labels[index]
    }
}

pub fn write_shard(path: impl AsRef<Path>, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SHARD_MAGIC)?;
    w.write_u32::<LittleEndian>(SHARD_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(records.len() as u64)?;
    for r in records {
        debug_assert_eq!(r.features.len(), dim);
        w.write_u32::<LittleEndian>(r.location.x as u32)?;
        w.write_u32::<LittleEndian>(r.location.y as u32)?;
        w.write_u32::<LittleEndian>(r.location.z as u32)?;
        for &l in &r.labels {
            w.write_i8(l)?;
        }
        w.write_u8(0)?; // pad to 4-byte alignment
        for &f in &r.features {
            w.write_f32::<LittleEndian>(f)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_shard_header(path: impl AsRef<Path>) -> Result<(usize, u64)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::malformed(path, "file shorter than header"))?;
    if &magic != SHARD_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DWFS" });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SHARD_VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()?;
    Ok((dim, count))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let (dim, count) = read_shard_header(path)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut skip = [0u8; SHARD_HEADER_BYTES];
    r.read_exact(&mut skip)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x = r.read_u32::<LittleEndian>().map_err(|_| Error::malformed(path, "truncated record"))?;
        let y = r.read_u32::<LittleEndian>()?;
        let z = r.read_u32::<LittleEndian>()?;
        let labels = [r.read_i8()?, r.read_i8()?, r.read_i8()?];
        let _pad = r.read_u8()?;
        let mut features = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut features)
            .map_err(|_| Error::malformed(path, "truncated features"))?;
        out.push(FeatureRecord {
            location: VoxelCoord::new(x as usize, y as usize, z as usize),
            labels,
            features,
        });
    }
    Ok(out)
}

/// Partition `locations` round-robin by sorted order into `shard_count`
/// shards, extract features independently per shard with `workers` threads,
/// and write one file per shard under `dir`.
///
/// Output bytes are identical for any worker count: shard membership depends
/// only on the sorted location order, and each shard is written sequentially
/// by exactly one task from the shared read-only context.
pub fn precompute_features(
    ctx: &FeatureContext<'_>,
    truth: &LabelMask,
    locations: &[VoxelCoord],
    dir: &Path,
    base_name: &str,
    shard_count: usize,
    workers: usize,
) -> Result<Vec<PathBuf>> {
    if shard_count == 0 || workers == 0 {
        return Err(Error::InvalidArgument("shard_count and workers must be >= 1".into()));
    }
    let range = ctx.valid_range();
    for &l in locations {
        if !range.contains(l) {
            return Err(Error::InvalidArgument(format!(
                "location ({}, {}, {}) violates the field-of-view margin",
                l.x, l.y, l.z
            )));
        }
    }
    let mut sorted: Vec<VoxelCoord> = locations.to_vec();
    sorted.sort_unstable();
    let shard_count = shard_count.min(sorted.len()).max(1);
    let mut shards: Vec<Vec<VoxelCoord>> = vec![Vec::new(); shard_count];
    for (i, l) in sorted.iter().enumerate() {
        shards[i % shard_count].push(*l);
    }

    std::fs::create_dir_all(dir)?;
    let dim = ctx.spec().feature_dims();
    let paths: Vec<PathBuf> = (0..shard_count)
        .map(|i| dir.join(format!("{base_name}_shard{i:04}.dwfs")))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| {
        shards
            .par_iter()
            .zip(&paths)
            .map(|(locs, path)| {
                let mut records = Vec::with_capacity(locs.len());
                let mut buf = Vec::with_capacity(dim);
                for &l in locs {
                    ctx.features_into(l, &mut buf)?;
                    records.push(FeatureRecord {
                        location: l,
                        labels: truth.labels_at(l),
                        features: buf.clone(),
                    });
                }
                write_shard(path, dim, &records)
            })
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(paths)
}
