//! Minibatch SGD training loop.

use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

use super::net::{DropoutMasks, MlpNet, TrainExample, Workspace};
use super::sampler::BalancedSampler;
use super::{Gradients, MlpParams, TrainConfig};

/// Random-access source of training records.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn feature_dim(&self) -> usize;
    fn features(&self, index: usize) -> &[f32];
    fn labels(&self, index: usize) -> [i8; 3];
}

/// In-memory source over parallel slices.
pub struct SliceSource<'a> {
    pub dim: usize,
    pub features: &'a [f32],
    pub labels: &'a [[i8; 3]],
}

impl FeatureSource for SliceSource<'_> {
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

/// Run exactly `config.updates` SGD steps `w <- w - lr * g` with balanced,
/// optionally weighted minibatches. Fully deterministic given
/// `(source, config, sampler)`.
pub fn train(
    source: &dyn FeatureSource,
    config: &TrainConfig,
    sampler: &mut BalancedSampler,
) -> Result<MlpParams> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty training source".into()));
    }
    let d = source.feature_dim();
    let mut sizes = vec![d];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(3);

    let mut net = MlpNet::init(sizes.clone(), crate::derive_seed(config.seed, 0, "mlp-init"));
    let mut dropout_rng = {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, 0, "mlp-dropout"))
    };
    let use_dropout = config.dropout_hidden > 0.0 || config.dropout_input > 0.0;

    let mut ws = Workspace::for_net(&net);
    let mut grads = Gradients::zeros_like(&net);
    let margin = config.inverse_margin;
    for _ in 0..config.updates {
        let indices = sampler.next_batch(config.batch_size);
        let batch: Vec<TrainExample<'_>> = indices
            .iter()
            .map(|&i| {
                let labels = source.labels(i);
                let mut targets = [0.0f64; 3];
                let mut valid = [false; 3];
                for j in 0..3 {
                    match labels[j] {
                        1 => {
                            targets[j] = 1.0 - margin;
                            valid[j] = true;
                        }
                        -1 => {
                            targets[j] = margin;
                            valid[j] = true;
                        }
                        _ => {}
                    }
                }
                TrainExample { features: source.features(i), targets, valid }
            })
            .collect();
        let masks: Option<Vec<DropoutMasks>> = use_dropout.then(|| {
            batch
                .iter()
                .map(|_| {
                    DropoutMasks::draw(
                        &mut dropout_rng,
                        &net.sizes,
                        config.dropout_input,
                        config.dropout_hidden,
                    )
                })
                .collect()
        });
        net.accumulate_batch(&batch, masks.as_deref(), &mut ws, &mut grads)?;
        let lr = config.learning_rate;
        for layer in 0..net.weights.len() {
            for (w, g) in net.weights[layer].iter_mut().zip(&grads.weights[layer]) {
                *w -= lr * g;
            }
            for (b, g) in net.biases[layer].iter_mut().zip(&grads.biases[layer]) {
                *b -= lr * g;
            }
        }
    }
    Ok(net.to_params(config.dropout_hidden, config.dropout_input, config.inverse_margin))
}
