//! Dictionary learning: OMP-1 (1-sparse alternating minimization) and Lloyd
//! K-means, plus the on-disk codebook format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

use super::encoder::{EncoderConfig, EncoderMethod};
use super::whitening::WhiteningTransform;
use super::{ChannelGroup, PatchSpec};

pub const DEFAULT_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictionaryMethod {
    Omp1 = 1,
    KMeans = 2,
}

/// A learned dictionary of `k` unit-norm atoms over flattened patches.
///
/// K-means dictionaries additionally retain the raw (unnormalized) centroids,
/// which the triangle encoder needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    k: usize,
    dim: usize,
    patch: PatchSpec,
    method: DictionaryMethod,
    /// `k x dim` row-major; every row has L2 norm 1 (within 1e-6).
    atoms: Vec<f32>,
    /// Raw centroids for K-means dictionaries, same layout as `atoms`.
    centroids: Option<Vec<f32>>,
}

impl Dictionary {
    /// Build a dictionary from explicit atoms (`k x dim` row-major). Atoms
    /// must already be unit-norm within 1e-6.
    pub fn from_atoms(atoms: Vec<f32>, spec: PatchSpec, k: usize) -> Result<Dictionary> {
        let dim = spec.len();
        if atoms.len() != k * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {k} x {dim} atom values, got {}",
                atoms.len()
            )));
        }
        for j in 0..k {
            let norm: f64 = atoms[j * dim..(j + 1) * dim]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("atom {j} has norm {norm}, not 1")));
            }
        }
        Ok(Dictionary { k, dim, patch: spec, method: DictionaryMethod::Omp1, atoms, centroids: None })
    }

    /// Build a K-means-style dictionary from explicit raw centroids; unit
    /// atoms are derived by normalization.
    pub fn from_centroids(centroids: Vec<f32>, spec: PatchSpec, k: usize) -> Result<Dictionary> {
        let dim = spec.len();
        if centroids.len() != k * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {k} x {dim} centroid values, got {}",
                centroids.len()
            )));
        }
        let atoms = normalized_atoms(&centroids, k, dim);
        Ok(Dictionary {
            k,
            dim,
            patch: spec,
            method: DictionaryMethod::KMeans,
            atoms,
            centroids: Some(centroids),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self) -> &PatchSpec {
        &self.patch
    }

    pub fn method(&self) -> DictionaryMethod {
        self.method
    }

    pub fn atom(&self, j: usize) -> &[f32] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f32] {
        &self.atoms
    }

    pub fn centroid(&self, j: usize) -> Option<&[f32]> {
        self.centroids.as_ref().map(|c| &c[j * self.dim..(j + 1) * self.dim])
    }

    pub fn centroids(&self) -> Option<&[f32]> {
        self.centroids.as_deref()
    }
}

fn validate_patches(patches: &[Vec<f32>], spec: &PatchSpec, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("dictionary size must be >= 1".into()));
    }
    if patches.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least k={k} patches, got {}",
            patches.len()
        )));
    }
    let dim = spec.len();
    if patches.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "patches must all have length {dim} for patch {:?}",
            spec.side
        )));
    }
    Ok(dim)
}

/// Unit-normalize `row` in f64, falling back to a basis vector for
/// zero-norm rows so the unit-norm invariant always holds.
fn normalized_row(row: &[f64], fallback_axis: usize) -> Vec<f32> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        row.iter().map(|&v| (v / norm) as f32).collect()
    } else {
        let mut out = vec![0f32; row.len()];
        out[fallback_axis % row.len()] = 1.0;
        out
    }
}

fn normalized_atoms(rows: &[f32], k: usize, dim: usize) -> Vec<f32> {
    let mut atoms = vec![0f32; k * dim];
    for j in 0..k {
        let row: Vec<f64> = rows[j * dim..(j + 1) * dim].iter().map(|&v| v as f64).collect();
        atoms[j * dim..(j + 1) * dim].copy_from_slice(&normalized_row(&row, j));
    }
    atoms
}

/// Draw `k` distinct patch indices.
fn distinct_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Learn an OMP-1 dictionary: alternate 1-sparse assignment
/// `j*(x) = argmax_j |d_j . x|` with code `s = d_j* . x`, and the atom update
/// `d_j <- normalize(sum of s x over assigned patches)`. Dead atoms are
/// re-seeded from random patches. Runs `epochs` full passes.
pub fn learn_dictionary_omp1(
    patches: &[Vec<f32>],
    spec: &PatchSpec,
    k: usize,
    epochs: usize,
    seed: u64,
) -> Result<Dictionary> {
    learn_dictionary_omp1_traced(patches, spec, k, epochs, seed).map(|(d, _)| d)
}

/// Like [`learn_dictionary_omp1`], also returning the 1-sparse reconstruction
/// error `sum ||x - s d_j*(x)||^2` measured at the start of each epoch.
pub fn learn_dictionary_omp1_traced(
    patches: &[Vec<f32>],
    spec: &PatchSpec,
    k: usize,
    epochs: usize,
    seed: u64,
) -> Result<(Dictionary, Vec<f64>)> {
    let dim = validate_patches(patches, spec, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms: Vec<Vec<f64>> = distinct_indices(&mut rng, patches.len(), k)
        .into_iter()
        .enumerate()
        .map(|(j, i)| {
            let row: Vec<f64> = patches[i].iter().map(|&v| v as f64).collect();
            normalized_row(&row, j).iter().map(|&v| v as f64).collect()
        })
        .collect();

    let mut errors = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        let mut err = 0f64;
        for x in patches {
            let mut best = 0usize;
            let mut best_abs = -1f64;
            let mut best_dot = 0f64;
            for (j, atom) in atoms.iter().enumerate() {
                let dot: f64 = atom.iter().zip(x).map(|(a, &v)| a * v as f64).sum();
                if dot.abs() > best_abs {
                    best_abs = dot.abs();
                    best_dot = dot;
                    best = j;
                }
            }
            let norm2: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
            err += norm2 - best_dot * best_dot;
            counts[best] += 1;
            for (s, &v) in sums[best].iter_mut().zip(x) {
                *s += best_dot * v as f64;
            }
        }
        errors.push(err);

        for j in 0..k {
            let norm = sums[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[j] > 0 && norm > 1e-12 {
                for (a, s) in atoms[j].iter_mut().zip(&sums[j]) {
                    *a = s / norm;
                }
            } else {
                // Dead atom: re-seed from a random patch.
                let i = rng.gen_range(0..patches.len());
                let row: Vec<f64> = patches[i].iter().map(|&v| v as f64).collect();
                atoms[j] = normalized_row(&row, j).iter().map(|&v| v as f64).collect();
            }
        }
    }

    let mut flat = vec![0f32; k * dim];
    for (j, atom) in atoms.iter().enumerate() {
        for (o, &v) in flat[j * dim..(j + 1) * dim].iter_mut().zip(atom) {
            *o = v as f32;
        }
    }
    let atoms = normalized_atoms(&flat, k, dim);
    Ok((
        Dictionary { k, dim, patch: *spec, method: DictionaryMethod::Omp1, atoms, centroids: None },
        errors,
    ))
}

/// Learn a K-means dictionary with Lloyd iterations. Centroids are retained
/// raw for the triangle encoder; atoms are their unit-normalized copies.
pub fn learn_dictionary_kmeans(
    patches: &[Vec<f32>],
    spec: &PatchSpec,
    k: usize,
    epochs: usize,
    seed: u64,
) -> Result<Dictionary> {
    learn_dictionary_kmeans_traced(patches, spec, k, epochs, seed).map(|(d, _)| d)
}

/// Like [`learn_dictionary_kmeans`], also returning the within-cluster SSE
/// measured at the start of each epoch.
pub fn learn_dictionary_kmeans_traced(
    patches: &[Vec<f32>],
    spec: &PatchSpec,
    k: usize,
    epochs: usize,
    seed: u64,
) -> Result<(Dictionary, Vec<f64>)> {
    let dim = validate_patches(patches, spec, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = distinct_indices(&mut rng, patches.len(), k)
        .into_iter()
        .map(|i| patches[i].iter().map(|&v| v as f64).collect())
        .collect();

    let mut errors = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        let mut sse = 0f64;
        for x in patches {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d: f64 = c
                    .iter()
                    .zip(x)
                    .map(|(cv, &v)| {
                        let diff = cv - v as f64;
                        diff * diff
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            sse += best_d;
            counts[best] += 1;
            for (s, &v) in sums[best].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        errors.push(sse);

        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                let i = rng.gen_range(0..patches.len());
                centroids[j] = patches[i].iter().map(|&v| v as f64).collect();
            }
        }
    }

    let mut raw = vec![0f32; k * dim];
    for (j, c) in centroids.iter().enumerate() {
        for (o, &v) in raw[j * dim..(j + 1) * dim].iter_mut().zip(c) {
            *o = v as f32;
        }
    }
    let atoms = normalized_atoms(&raw, k, dim);
    Ok((
        Dictionary {
            k,
            dim,
            patch: *spec,
            method: DictionaryMethod::KMeans,
            atoms,
            centroids: Some(raw),
        },
        errors,
    ))
}

/// One vector-quantization stage: a dictionary, its encoder, and the
/// whitening transform applied to patches before everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook {
    pub dictionary: Dictionary,
    pub encoder: EncoderConfig,
    pub whitening: Option<WhiteningTransform>,
}

impl VqCodebook {
    pub fn encoding_dim(&self) -> usize {
        self.encoder.encoding_dim(self.dictionary.k())
    }

    /// Whiten (if configured) and encode a raw patch.
    pub fn encode_patch(&self, patch: &[f32], out: &mut [f32]) -> Result<()> {
        match &self.whitening {
            Some(w) if w.enabled => {
                let whitened = w.apply(patch);
                super::encoder::encode_into(&self.dictionary, &self.encoder, &whitened, out)
            }
            _ => super::encoder::encode_into(&self.dictionary, &self.encoder, patch, out),
        }
    }
}

// --- file format ---------------------------------------------------------
//
// Little-endian: magic "DWDC", version u32 = 1, k u32, patch dims 3 x u32,
// channels u32, method u8 (1 = omp1, 2 = kmeans), alpha f64, whitening flag
// u8, optional whitening payload (eps_zca f64, eps_cn f64, means dim x f64,
// matrix dim^2 x f64), then atom rows k x dim f32. For kmeans dictionaries
// the stored rows are the raw centroids; unit atoms are recomputed on load.
// The encoder method is paired with the learning method (omp1 -> soft
// threshold, kmeans -> triangle).

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DWDC";
pub const CODEBOOK_VERSION: u32 = 1;

impl VqCodebook {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        let d = &self.dictionary;
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_u32::<LittleEndian>(CODEBOOK_VERSION)?;
        w.write_u32::<LittleEndian>(d.k as u32)?;
        for s in d.patch.side {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
        w.write_u32::<LittleEndian>(d.patch.group.channels() as u32)?;
        w.write_u8(d.method as u8)?;
        w.write_f64::<LittleEndian>(self.encoder.alpha as f64)?;
        match &self.whitening {
            Some(t) if t.enabled => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(t.epsilon_zca)?;
                w.write_f64::<LittleEndian>(if t.contrast_normalize { t.epsilon_cn } else { -1.0 })?;
                for &m in &t.mean {
                    w.write_f64::<LittleEndian>(m)?;
                }
                for &m in &t.matrix {
                    w.write_f64::<LittleEndian>(m)?;
                }
            }
            _ => w.write_u8(0)?,
        }
        let rows = match d.method {
            DictionaryMethod::Omp1 => &d.atoms,
            DictionaryMethod::KMeans => d.centroids.as_ref().expect("kmeans keeps centroids"),
        };
        for &v in rows {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VqCodebook> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::malformed(path, "file shorter than header"))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "DWDC" });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::BadVersion { path: path.into(), found: version });
        }
        let k = r.read_u32::<LittleEndian>()? as usize;
        let side = [
            r.read_u32::<LittleEndian>()? as usize,
            r.read_u32::<LittleEndian>()? as usize,
            r.read_u32::<LittleEndian>()? as usize,
        ];
        let channels = r.read_u32::<LittleEndian>()? as usize;
        let group = match channels {
            1 => ChannelGroup::Image,
            3 => ChannelGroup::Affinity,
            other => return Err(Error::malformed(path, format!("unsupported channel count {other}"))),
        };
        let spec = PatchSpec::new(side, group)
            .map_err(|e| Error::malformed(path, format!("bad patch spec: {e}")))?;
        let method = match r.read_u8()? {
            1 => DictionaryMethod::Omp1,
            2 => DictionaryMethod::KMeans,
            other => return Err(Error::malformed(path, format!("unknown method tag {other}"))),
        };
        let alpha = r.read_f64::<LittleEndian>()? as f32;
        let dim = spec.len();
        let whitening = match r.read_u8()? {
            0 => None,
            1 => {
                let epsilon_zca = r.read_f64::<LittleEndian>()?;
                let eps_cn_tag = r.read_f64::<LittleEndian>()?;
                let mut mean = vec![0f64; dim];
                r.read_f64_into::<LittleEndian>(&mut mean)
                    .map_err(|_| Error::malformed(path, "truncated whitening means"))?;
                let mut matrix = vec![0f64; dim * dim];
                r.read_f64_into::<LittleEndian>(&mut matrix)
                    .map_err(|_| Error::malformed(path, "truncated whitening matrix"))?;
                Some(WhiteningTransform {
                    enabled: true,
                    dim,
                    mean,
                    matrix,
                    epsilon_zca,
                    contrast_normalize: eps_cn_tag >= 0.0,
                    epsilon_cn: eps_cn_tag.max(0.0),
                })
            }
            other => return Err(Error::malformed(path, format!("bad whitening flag {other}"))),
        };
        let mut rows = vec![0f32; k * dim];
        r.read_f32_into::<LittleEndian>(&mut rows)
            .map_err(|_| Error::malformed(path, "truncated atom payload"))?;
        let (atoms, centroids, encoder_method) = match method {
            DictionaryMethod::Omp1 => (rows, None, EncoderMethod::SoftThresholdPolarity),
            DictionaryMethod::KMeans => (
                normalized_atoms(&rows, k, dim),
                Some(rows),
                EncoderMethod::TriangleKmeans,
            ),
        };
        Ok(VqCodebook {
            dictionary: Dictionary { k, dim, patch: spec, method, atoms, centroids },
            encoder: EncoderConfig { method: encoder_method, alpha },
            whitening,
        })
    }
}
