//! Unsupervised feature learning and extraction: patches, optional ZCA
//! whitening, OMP-1 / K-means dictionaries, the two vector-quantization
//! encoders, pooling, and receptive-field / foveated / multiscale assembly.

mod dictionary;
mod encoder;
mod extractor;
mod normalizer;
mod patch;
mod whitening;

pub use dictionary::{
    learn_dictionary_kmeans, learn_dictionary_kmeans_traced, learn_dictionary_omp1,
    learn_dictionary_omp1_traced, Dictionary, DictionaryMethod, VqCodebook,
    DEFAULT_EPOCHS as DEFAULT_DICT_EPOCHS,
};
pub use encoder::{encode, EncoderConfig, EncoderMethod};
pub use extractor::{
    extract_features, pool, representation_dims, FeatureContext, FeatureExtractorSpec,
    GroupInputs, Pooling, Representation,
};
pub use normalizer::{fit_normalizer, FeatureNormalizer, DEFAULT_SIGMA_MIN};
pub use patch::extract_patch;
pub use whitening::{fit_whitening, WhiteningTransform};

use crate::{Error, Result};

/// Which input volume a patch (and the dictionary trained on it) reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelGroup {
    /// The raw single-channel image.
    Image,
    /// The 3-channel affinity graph produced by the previous iteration.
    Affinity,
}

impl ChannelGroup {
    pub fn channels(&self) -> usize {
        match self {
            ChannelGroup::Image => 1,
            ChannelGroup::Affinity => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ChannelGroup::Image => "image",
            ChannelGroup::Affinity => "affinity",
        }
    }
}

/// Patch geometry: odd side lengths per axis plus the channel group it reads.
/// All channels of the group are read jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub side: [usize; 3],
    pub group: ChannelGroup,
}

impl PatchSpec {
    pub fn new(side: [usize; 3], group: ChannelGroup) -> Result<PatchSpec> {
        if side.iter().any(|&s| s == 0 || s % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "patch sides must be odd and >= 1, got {side:?}"
            )));
        }
        Ok(PatchSpec { side, group })
    }

    pub fn cube(side: usize, group: ChannelGroup) -> Result<PatchSpec> {
        PatchSpec::new([side; 3], group)
    }

    /// Flattened patch length, channels included.
    pub fn len(&self) -> usize {
        self.side[0] * self.side[1] * self.side[2] * self.group.channels()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Half-extent per axis; patches cover `center ± half`.
    pub fn half(&self) -> [usize; 3] {
        [self.side[0] / 2, self.side[1] / 2, self.side[2] / 2]
    }
}
