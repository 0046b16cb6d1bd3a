//! Model bundle: a directory with a plain-text manifest plus per-iteration
//! codebook, normalizer, and MLP files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::features::{
    ChannelGroup, FeatureExtractorSpec, FeatureNormalizer, Pooling, Representation, VqCodebook,
};
use crate::mlp::{read_model, write_model};
use crate::{Error, Result};

use super::{DawmrModel, IterationModel};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const NORMALIZER_MAGIC: &[u8; 4] = b"DWNR";
pub const NORMALIZER_VERSION: u32 = 1;

pub fn write_normalizer(n: &FeatureNormalizer, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(NORMALIZER_MAGIC)?;
    w.write_u32::<LittleEndian>(NORMALIZER_VERSION)?;
    w.write_u32::<LittleEndian>(n.dim() as u32)?;
    w.write_f32::<LittleEndian>(n.sigma_min())?;
    for &m in n.mean() {
        w.write_f32::<LittleEndian>(m)?;
    }
    for &s in n.std() {
        w.write_f32::<LittleEndian>(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_normalizer(path: impl AsRef<Path>) -> Result<FeatureNormalizer> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::malformed(path, "file shorter than header"))?;
    if &magic != NORMALIZER_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DWNR" });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != NORMALIZER_VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let sigma_min = r.read_f32::<LittleEndian>()?;
    let mut mean = vec![0f32; dim];
    r.read_f32_into::<LittleEndian>(&mut mean)
        .map_err(|_| Error::malformed(path, "truncated means"))?;
    let mut std = vec![0f32; dim];
    r.read_f32_into::<LittleEndian>(&mut std)
        .map_err(|_| Error::malformed(path, "truncated stds"))?;
    FeatureNormalizer::new(mean, std, sigma_min).map_err(|e| Error::malformed(path, e.to_string()))
}

fn representation_name(r: Representation) -> &'static str {
    match r {
        Representation::ReceptiveField => "rf",
        Representation::Foveated => "foveated",
    }
}

fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::Max => "max",
        Pooling::Average => "average",
    }
}

/// Write the bundle into `dir` (created if missing).
pub fn save_model(model: &DawmrModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("dawmr-bundle\n");
    manifest.push_str("version = 1\n");
    manifest.push_str(&format!("iterations = {}\n", model.iterations.len()));
    for m in &model.iterations {
        let i = m.index;
        manifest.push_str(&format!("\n[iteration {i}]\n"));
        manifest.push_str(&format!("index = {i}\n"));
        manifest.push_str(&format!(
            "representation = {}\n",
            representation_name(m.spec.representation)
        ));
        manifest.push_str(&format!(
            "neighborhood = {},{},{}\n",
            m.spec.neighborhood[0], m.spec.neighborhood[1], m.spec.neighborhood[2]
        ));
        manifest.push_str(&format!("pooling = {}\n", pooling_name(m.spec.pooling)));
        manifest.push_str(&format!(
            "scales = {}\n",
            m.spec.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        manifest.push_str(&format!(
            "groups = {}\n",
            m.spec.groups.iter().map(|g| g.name().to_string()).collect::<Vec<_>>().join(",")
        ));
        let mut codebook_files = Vec::new();
        for (ci, cb) in m.spec.codebooks.iter().enumerate() {
            let name = format!("iter{i}_codebook{ci}.dwdc");
            cb.save(dir.join(&name))?;
            codebook_files.push(name);
        }
        manifest.push_str(&format!("codebooks = {}\n", codebook_files.join(",")));
        let norm_name = format!("iter{i}_normalizer.dwnr");
        write_normalizer(&m.normalizer, dir.join(&norm_name))?;
        manifest.push_str(&format!("normalizer = {norm_name}\n"));
        let mlp_name = format!("iter{i}_mlp.dwmp");
        write_model(&m.mlp, dir.join(&mlp_name))?;
        manifest.push_str(&format!("mlp = {mlp_name}\n"));
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

fn manifest_value<'a>(
    lines: &'a [(usize, String, String)],
    section: usize,
    key: &str,
) -> Result<&'a str> {
    lines
        .iter()
        .find(|(s, k, _)| *s == section && k == key)
        .map(|(_, _, v)| v.as_str())
        .ok_or_else(|| Error::Config(format!("manifest missing key `{key}` in section {section}")))
}

/// Load a bundle written by [`save_model`].
pub fn load_model(dir: impl AsRef<Path>) -> Result<DawmrModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("dawmr-bundle") {
        return Err(Error::malformed(&path, "not a dawmr model bundle"));
    }
    // (section, key, value); section 0 is the preamble.
    let mut table: Vec<(usize, String, String)> = Vec::new();
    let mut section = 0usize;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section += 1;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(&path, format!("bad manifest line: {line}")))?;
        table.push((section, k.trim().to_string(), v.trim().to_string()));
    }
    let version: u32 = manifest_value(&table, 0, "version")?
        .parse()
        .map_err(|_| Error::malformed(&path, "bad version"))?;
    if version != 1 {
        return Err(Error::BadVersion { path: path.clone(), found: version });
    }
    let count: usize = manifest_value(&table, 0, "iterations")?
        .parse()
        .map_err(|_| Error::malformed(&path, "bad iteration count"))?;

    let parse_triple = |v: &str| -> Result<[usize; 3]> {
        let parts: Vec<usize> = v.split(',').filter_map(|p| p.trim().parse().ok()).collect();
        if parts.len() != 3 {
            return Err(Error::malformed(&path, format!("expected three values: {v}")));
        }
        Ok([parts[0], parts[1], parts[2]])
    };

    let mut iterations = Vec::with_capacity(count);
    for s in 1..=count {
        let index: usize = manifest_value(&table, s, "index")?
            .parse()
            .map_err(|_| Error::malformed(&path, "bad index"))?;
        let representation = match manifest_value(&table, s, "representation")? {
            "rf" => Representation::ReceptiveField,
            "foveated" => Representation::Foveated,
            other => {
                return Err(Error::malformed(&path, format!("unknown representation {other}")))
            }
        };
        let neighborhood = parse_triple(manifest_value(&table, s, "neighborhood")?)?;
        let pooling = match manifest_value(&table, s, "pooling")? {
            "max" => Pooling::Max,
            "average" => Pooling::Average,
            other => return Err(Error::malformed(&path, format!("unknown pooling {other}"))),
        };
        let scales: Vec<usize> = manifest_value(&table, s, "scales")?
            .split(',')
            .filter_map(|p| p.trim().parse().ok())
            .collect();
        let groups: Vec<ChannelGroup> = manifest_value(&table, s, "groups")?
            .split(',')
            .map(|g| match g.trim() {
                "image" => Ok(ChannelGroup::Image),
                "affinity" => Ok(ChannelGroup::Affinity),
                other => Err(Error::malformed(&path, format!("unknown group {other}"))),
            })
            .collect::<Result<_>>()?;
        let codebooks: Vec<VqCodebook> = manifest_value(&table, s, "codebooks")?
            .split(',')
            .map(|name| VqCodebook::load(dir.join(name.trim())))
            .collect::<Result<_>>()?;
        let normalizer = read_normalizer(dir.join(manifest_value(&table, s, "normalizer")?))?;
        let mlp = read_model(dir.join(manifest_value(&table, s, "mlp")?))?;
        let spec = FeatureExtractorSpec {
            representation,
            neighborhood,
            pooling,
            scales,
            groups,
            codebooks,
        };
        spec.validate()?;
        if mlp.input_dim() != spec.feature_dims() {
            return Err(Error::malformed(
                &path,
                format!(
                    "iteration {index}: mlp expects {} features, spec produces {}",
                    mlp.input_dim(),
                    spec.feature_dims()
                ),
            ));
        }
        iterations.push(IterationModel { index, spec, normalizer, mlp });
    }
    Ok(DawmrModel { iterations, led_masks: Vec::new() })
}
