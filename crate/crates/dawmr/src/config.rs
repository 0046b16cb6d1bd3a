//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Unknown keys are rejected; every value is validated against the module it
//! configures.

use std::collections::BTreeMap;
use std::path::Path;

use crate::features::{Pooling, Representation};

use crate::pipeline::{EncoderKind, LedConfig, PipelineConfig};
use crate::{Error, Result};

/// Parsed run configuration, convertible into a [`PipelineConfig`].
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// Declared feature dimensionality, when present; validated against the
    /// architecture arithmetic.
    pub feature_dims: Option<usize>,
}

const KNOWN_KEYS: &[&str] = &[
    "patch_size",
    "neighborhood",
    "scales",
    "representation",
    "pooling",
    "dict_size",
    "encoder",
    "alpha",
    "whitening",
    "epsilon_zca",
    "epsilon_cn",
    "dict_patches",
    "dict_epochs",
    "feature_dims",
    "hidden_layers",
    "hidden_units",
    "learning_rate",
    "batch_size",
    "updates",
    "dropout_hidden",
    "dropout_input",
    "inverse_margin",
    "iterations",
    "led",
    "led_window",
    "led_frac",
    "led_multiplier",
    "augment",
    "subsample_fraction",
    "normalizer_sample",
    "seed",
    "shard_count",
    "workers",
];

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "an integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(bad(key, value, "`on` or `off`")),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> =
        value.split(',').map(|p| parse_usize(key, p.trim())).collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok([parts[0]; 3]),
        3 => Ok([parts[0], parts[1], parts[2]]),
        _ => Err(bad(key, value, "`n` or `nx,ny,nz`")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }

        let mut cfg = RunConfig::default();
        let mut hidden_layers = 1usize;
        let mut hidden_units = 200usize;
        let mut led_on = false;
        let mut led = LedConfig::default();
        for (key, value) in &entries {
            let (key, value) = (key.as_str(), value.as_str());
            let arch = &mut cfg.pipeline.arch;
            match key {
                "patch_size" => arch.patch_side = parse_triple(key, value)?,
                "neighborhood" => arch.neighborhood = parse_triple(key, value)?,
                "scales" => {
                    arch.scales = value
                        .split(',')
                        .map(|p| parse_usize(key, p.trim()))
                        .collect::<Result<_>>()?;
                }
                "representation" => {
                    arch.representation = match value {
                        "rf" => Representation::ReceptiveField,
                        "foveated" => Representation::Foveated,
                        _ => return Err(bad(key, value, "`rf` or `foveated`")),
                    };
                }
                "pooling" => {
                    arch.pooling = match value {
                        "max" => Pooling::Max,
                        "average" => Pooling::Average,
                        _ => return Err(bad(key, value, "`max` or `average`")),
                    };
                }
                "dict_size" => arch.dict_size = parse_usize(key, value)?,
                "encoder" => {
                    arch.encoder = match value {
                        "omp1_soft" => EncoderKind::Omp1Soft,
                        "kmeans_triangle" => EncoderKind::KmeansTriangle,
                        _ => return Err(bad(key, value, "`omp1_soft` or `kmeans_triangle`")),
                    };
                }
                "alpha" => arch.alpha = parse_f64(key, value)? as f32,
                "whitening" => arch.whitening = parse_switch(key, value)?,
                "epsilon_zca" => arch.epsilon_zca = parse_f64(key, value)?,
                "epsilon_cn" => arch.epsilon_cn = parse_f64(key, value)?,
                "dict_patches" => arch.dict_patches = parse_usize(key, value)?,
                "dict_epochs" => arch.dict_epochs = parse_usize(key, value)?,
                "feature_dims" => cfg.feature_dims = Some(parse_usize(key, value)?),
                "hidden_layers" => hidden_layers = parse_usize(key, value)?,
                "hidden_units" => hidden_units = parse_usize(key, value)?,
                "learning_rate" => cfg.pipeline.train.learning_rate = parse_f64(key, value)?,
                "batch_size" => cfg.pipeline.train.batch_size = parse_usize(key, value)?,
                "updates" => cfg.pipeline.train.updates = parse_f64(key, value)? as usize,
                "dropout_hidden" => cfg.pipeline.train.dropout_hidden = parse_f64(key, value)?,
                "dropout_input" => cfg.pipeline.train.dropout_input = parse_f64(key, value)?,
                "inverse_margin" => cfg.pipeline.train.inverse_margin = parse_f64(key, value)?,
                "iterations" => cfg.pipeline.iterations = parse_usize(key, value)?,
                "led" => led_on = parse_switch(key, value)?,
                "led_window" => led.window = parse_usize(key, value)?,
                "led_frac" => led.fraction = parse_f64(key, value)?,
                "led_multiplier" => led.multiplier = parse_f64(key, value)?,
                "augment" => cfg.pipeline.augment = parse_switch(key, value)?,
                "subsample_fraction" => cfg.pipeline.subsample_fraction = parse_f64(key, value)?,
                "normalizer_sample" => cfg.pipeline.normalizer_sample = parse_usize(key, value)?,
                "seed" => cfg.pipeline.seed = value.parse().map_err(|_| bad(key, value, "a u64"))?,
                "shard_count" => cfg.pipeline.shard_count = parse_usize(key, value)?,
                "workers" => cfg.pipeline.workers = parse_usize(key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        if hidden_layers == 0 || hidden_units == 0 {
            return Err(Error::Config("hidden_layers and hidden_units must be >= 1".into()));
        }
        cfg.pipeline.train.hidden = vec![hidden_units; hidden_layers];
        cfg.pipeline.led = led_on.then_some(led);
        cfg.pipeline.validate()?;
        if let Some(declared) = cfg.feature_dims {
            let computed = cfg.pipeline.arch.feature_dims(1)?;
            if declared != computed {
                return Err(Error::Config(format!(
                    "feature_dims = {declared} but the architecture produces {computed}"
                )));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        RunConfig::parse(&text)
    }
}
