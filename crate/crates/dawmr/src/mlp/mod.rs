//! Multilayer perceptron over the three affinity edges: rectified-linear
//! hidden layers, sigmoid outputs, inverted dropout, and cross-entropy with
//! inverse-margin targets.
//!
//! Parameters are stored as f32 (matching the file format); all math runs in
//! f64 on an upcast copy, so serialization is lossless and training is
//! bit-reproducible.

mod net;
mod sampler;
mod train;

pub use net::{
    cross_entropy, DropoutMasks, ForwardPass, Gradients, MlpNet, TrainExample, LOG_CLAMP,
};
pub use sampler::BalancedSampler;
pub use train::{train, FeatureSource, SliceSource};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

/// Training hyperparameters. Defaults: learning rate 0.02, minibatch 40,
/// 5e5 updates, hidden dropout 0.5, input dropout 0, inverse margin 0.1.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub updates: usize,
    pub dropout_hidden: f64,
    pub dropout_input: f64,
    pub inverse_margin: f64,
    /// Hidden layer widths, e.g. `[200]`.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 40,
            updates: 500_000,
            dropout_hidden: 0.5,
            dropout_input: 0.0,
            inverse_margin: 0.1,
            hidden: vec![200],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_hidden) || !(0.0..1.0).contains(&self.dropout_input) {
            return Err(Error::InvalidArgument("dropout rates must be in [0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.inverse_margin) {
            return Err(Error::InvalidArgument("inverse margin must be in [0, 0.5)".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layers must be non-empty and >= 1".into()));
        }
        Ok(())
    }
}

/// Trained MLP parameters: layer sizes `[d, h1, ..., hL, 3]` with per-layer
/// weight matrices (row-major, `out x in`) and bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
    pub dropout_hidden: f64,
    pub dropout_input: f64,
    pub inverse_margin: f64,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || *self.layer_sizes.last().unwrap() != 3 {
            return Err(Error::InvalidArgument(
                "layer sizes must chain from input to a 3-unit output".into(),
            ));
        }
        if self.weights.len() != self.layer_sizes.len() - 1 || self.biases.len() != self.weights.len() {
            return Err(Error::DimensionMismatch("layer count mismatch".into()));
        }
        for i in 0..self.weights.len() {
            let rows = self.layer_sizes[i + 1];
            let cols = self.layer_sizes[i];
            if self.weights[i].len() != rows * cols || self.biases[i].len() != rows {
                return Err(Error::DimensionMismatch(format!("layer {i} shape mismatch")));
            }
            if self.weights[i].iter().chain(&self.biases[i]).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Inference over a batch; order-preserving, no dropout. Outputs are
    /// clamped to the open interval (0, 1) at f32 precision.
    pub fn predict(&self, features: &[&[f32]]) -> Result<Vec<[f32; 3]>> {
        let net = MlpNet::from_params(self);
        let mut out = Vec::with_capacity(features.len());
        for &x in features {
            if x.len() != self.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "feature length {} != input dim {}",
                    x.len(),
                    self.input_dim()
                )));
            }
            out.push(net.predict_one(x));
        }
        Ok(out)
    }
}

// --- file format ---------------------------------------------------------
//
// Little-endian: magic "DWMP", version u32 = 1, layer count u32 (number of
// sizes), sizes u32 each, dropout_hidden f64, dropout_input f64,
// inverse_margin f64, then per layer weights (out x in f32 row-major)
// followed by biases (out f32).

pub const MODEL_MAGIC: &[u8; 4] = b"DWMP";
pub const MODEL_VERSION: u32 = 1;

pub fn write_model(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    params.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    w.write_u32::<LittleEndian>(params.layer_sizes.len() as u32)?;
    for &s in &params.layer_sizes {
        w.write_u32::<LittleEndian>(s as u32)?;
    }
    w.write_f64::<LittleEndian>(params.dropout_hidden)?;
    w.write_f64::<LittleEndian>(params.dropout_input)?;
    w.write_f64::<LittleEndian>(params.inverse_margin)?;
    for i in 0..params.weights.len() {
        for &v in &params.weights[i] {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in &params.biases[i] {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::malformed(path, "file shorter than header"))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DWMP" });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MODEL_VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::malformed(path, format!("implausible layer count {count}")));
    }
    let mut layer_sizes = Vec::with_capacity(count);
    for _ in 0..count {
        layer_sizes.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let dropout_hidden = r.read_f64::<LittleEndian>()?;
    let dropout_input = r.read_f64::<LittleEndian>()?;
    let inverse_margin = r.read_f64::<LittleEndian>()?;
    let mut weights = Vec::with_capacity(count - 1);
    let mut biases = Vec::with_capacity(count - 1);
    for i in 0..count - 1 {
        let rows = layer_sizes[i + 1];
        let cols = layer_sizes[i];
        let mut wv = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut wv)
            .map_err(|_| Error::malformed(path, "truncated weights"))?;
        let mut bv = vec![0f32; rows];
        r.read_f32_into::<LittleEndian>(&mut bv)
            .map_err(|_| Error::malformed(path, "truncated biases"))?;
        weights.push(wv);
        biases.push(bv);
    }
    let params =
        MlpParams { layer_sizes, weights, biases, dropout_hidden, dropout_input, inverse_margin };
    params.validate().map_err(|e| Error::malformed(path, e.to_string()))?;
    Ok(params)
}
