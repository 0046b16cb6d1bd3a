//! f64 math core: forward pass, cross-entropy loss, backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

use super::MlpParams;

/// Floor for log arguments inside the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Working-precision network. `weights[i]` is `sizes[i+1] x sizes[i]`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-example dropout masks, `true` = keep. Surviving hidden activations are
/// scaled by `1 / (1 - rate)` so inference needs no rescaling.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub input: Option<Vec<bool>>,
    pub hidden: Vec<Vec<bool>>,
    pub input_rate: f64,
    pub hidden_rate: f64,
}

impl DropoutMasks {
    /// Draw fresh masks from `rng`; `input` is only masked when
    /// `input_rate > 0`.
    pub fn draw(rng: &mut ChaCha8Rng, sizes: &[usize], input_rate: f64, hidden_rate: f64) -> DropoutMasks {
        let input = if input_rate > 0.0 {
            Some((0..sizes[0]).map(|_| rng.gen::<f64>() >= input_rate).collect())
        } else {
            None
        };
        let hidden = sizes[1..sizes.len() - 1]
            .iter()
            .map(|&h| (0..h).map(|_| rng.gen::<f64>() >= hidden_rate).collect())
            .collect();
        DropoutMasks { input, hidden, input_rate, hidden_rate }
    }
}

/// Activations from a forward pass: `activations[0]` is the (possibly
/// input-masked) input, each hidden entry is post-ReLU post-dropout, and the
/// last entry holds the three sigmoid outputs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn outputs(&self) -> &[f64] {
        self.activations.last().expect("non-empty")
    }
}

/// One training example: normalized features, margin-mapped targets, and
/// which of the three outputs carry a label.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub features: &'a [f32],
    pub targets: [f64; 3],
    pub valid: [bool; 3],
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Gradients {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn for_net(net: &MlpNet) -> Workspace {
        Workspace {
            acts: net.sizes.iter().map(|&s| vec![0.0; s]).collect(),
            deltas: net.sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// Cross-entropy with clamped logs: `-(t ln o + (1 - t) ln(1 - o))`.
pub fn cross_entropy(output: f64, target: f64) -> f64 {
    -(target * output.max(LOG_CLAMP).ln() + (1.0 - target) * (1.0 - output).max(LOG_CLAMP).ln())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MlpNet {
    /// Random initialization: weights uniform in `+-1/sqrt(fan_in)`, biases
    /// zero.
    pub fn init(sizes: Vec<usize>, seed: u64) -> MlpNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let bound = 1.0 / (sizes[i] as f64).sqrt();
            weights.push(
                (0..sizes[i + 1] * sizes[i]).map(|_| rng.gen_range(-bound..bound)).collect(),
            );
            biases.push(vec![0.0; sizes[i + 1]]);
        }
        MlpNet { sizes, weights, biases }
    }

    pub fn from_params(params: &MlpParams) -> MlpNet {
        MlpNet {
            sizes: params.layer_sizes.clone(),
            weights: params
                .weights
                .iter()
                .map(|w| w.iter().map(|&v| v as f64).collect())
                .collect(),
            biases: params
                .biases
                .iter()
                .map(|b| b.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn to_params(&self, dropout_hidden: f64, dropout_input: f64, inverse_margin: f64) -> MlpParams {
        MlpParams {
            layer_sizes: self.sizes.clone(),
            weights: self.weights.iter().map(|w| w.iter().map(|&v| v as f32).collect()).collect(),
            biases: self.biases.iter().map(|b| b.iter().map(|&v| v as f32).collect()).collect(),
            dropout_hidden,
            dropout_input,
            inverse_margin,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Forward pass. With `masks`, masked units output zero and surviving
    /// hidden activations are scaled by `1 / (1 - rate)`; without masks this
    /// is the inference path.
    pub fn forward(&self, x: &[f32], masks: Option<&DropoutMasks>) -> Result<ForwardPass> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input length {} != expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network input".into()));
        }
        let mut ws = Workspace::for_net(self);
        self.forward_into(x, masks, &mut ws);
        Ok(ForwardPass { activations: ws.acts })
    }

    fn forward_into(&self, x: &[f32], masks: Option<&DropoutMasks>, ws: &mut Workspace) {
        for (a, &v) in ws.acts[0].iter_mut().zip(x) {
            *a = v as f64;
        }
        if let Some(m) = masks {
            if let Some(mask) = &m.input {
                let scale = 1.0 / (1.0 - m.input_rate);
                for (a, &keep) in ws.acts[0].iter_mut().zip(mask) {
                    *a = if keep { *a * scale } else { 0.0 };
                }
            }
        }
        let depth = self.depth();
        for layer in 0..depth {
            let (prev, rest) = ws.acts.split_at_mut(layer + 1);
            let input = &prev[layer];
            let out = &mut rest[0];
            let rows = self.sizes[layer + 1];
            let cols = self.sizes[layer];
            let w = &self.weights[layer];
            let b = &self.biases[layer];
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = b[r];
                for (wv, av) in row.iter().zip(input.iter()) {
                    acc += wv * av;
                }
                out[r] = acc;
            }
            if layer + 1 < self.sizes.len() - 1 {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
                if let Some(m) = masks {
                    let scale = 1.0 / (1.0 - m.hidden_rate);
                    for (v, &keep) in out.iter_mut().zip(&m.hidden[layer]) {
                        *v = if keep { *v * scale } else { 0.0 };
                    }
                }
            } else {
                for v in out.iter_mut() {
                    *v = sigmoid(*v);
                }
            }
        }
    }

    /// Mean cross-entropy over the batch's valid outputs plus gradients by
    /// backpropagation. Invalid outputs contribute neither loss nor gradient.
    /// `masks`, when present, must carry one entry per example.
    pub fn loss_and_gradient(
        &self,
        batch: &[TrainExample<'_>],
        masks: Option<&[DropoutMasks]>,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let mut ws = Workspace::for_net(self);
        let loss = self.accumulate_batch(batch, masks, &mut ws, &mut grads)?;
        Ok((loss, grads))
    }

    pub(crate) fn accumulate_batch(
        &self,
        batch: &[TrainExample<'_>],
        masks: Option<&[DropoutMasks]>,
        ws: &mut Workspace,
        grads: &mut Gradients,
    ) -> Result<f64> {
        if let Some(m) = masks {
            if m.len() != batch.len() {
                return Err(Error::DimensionMismatch("one dropout mask set per example".into()));
            }
        }
        grads.clear();
        let n_valid: usize =
            batch.iter().map(|e| e.valid.iter().filter(|&&v| v).count()).sum();
        if n_valid == 0 {
            return Ok(0.0);
        }
        let inv = 1.0 / n_valid as f64;
        let mut loss = 0.0;
        let depth = self.depth();
        for (i, example) in batch.iter().enumerate() {
            let mask = masks.map(|m| &m[i]);
            self.forward_into(example.features, mask, ws);
            // Output delta: (o - t) * inv on valid edges; exact composite of
            // sigmoid and cross-entropy.
            {
                let out = &ws.acts[depth];
                let delta = &mut ws.deltas[depth];
                for j in 0..3 {
                    if example.valid[j] {
                        loss += cross_entropy(out[j], example.targets[j]) * inv;
                        delta[j] = (out[j] - example.targets[j]) * inv;
                    } else {
                        delta[j] = 0.0;
                    }
                }
            }
            for layer in (0..depth).rev() {
                let rows = self.sizes[layer + 1];
                let cols = self.sizes[layer];
                let w = &self.weights[layer];
                // Parameter gradients.
                {
                    let delta = &ws.deltas[layer + 1];
                    let input = &ws.acts[layer];
                    let gw = &mut grads.weights[layer];
                    let gb = &mut grads.biases[layer];
                    for r in 0..rows {
                        let d = delta[r];
                        if d != 0.0 {
                            let grow = &mut gw[r * cols..(r + 1) * cols];
                            for (g, av) in grow.iter_mut().zip(input.iter()) {
                                *g += d * av;
                            }
                            gb[r] += d;
                        }
                    }
                }
                if layer == 0 {
                    break;
                }
                // delta for acts[layer] = W^T delta, gated by ReLU and dropout.
                {
                    let (lower, upper) = ws.deltas.split_at_mut(layer + 1);
                    let prev = &mut lower[layer];
                    let delta = &upper[0];
                    prev.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..rows {
                        let d = delta[r];
                        if d != 0.0 {
                            let row = &w[r * cols..(r + 1) * cols];
                            for (p, wv) in prev.iter_mut().zip(row.iter()) {
                                *p += wv * d;
                            }
                        }
                    }
                    // Activation gate: act > 0 captures both ReLU and any
                    // dropout zeroing; surviving units carry the 1/(1-rate)
                    // scale inside the stored activation, so multiply the
                    // gate accordingly.
                    let act = &ws.acts[layer];
                    let scale = match masks.map(|m| &m[i]) {
                        Some(m) => 1.0 / (1.0 - m.hidden_rate),
                        None => 1.0,
                    };
                    for (p, &a) in prev.iter_mut().zip(act.iter()) {
                        if a <= 0.0 {
                            *p = 0.0;
                        } else if masks.is_some() {
                            *p *= scale;
                        }
                    }
                }
            }
        }
        Ok(loss)
    }

    /// Inference for one example; outputs clamped strictly inside (0, 1).
    pub fn predict_one(&self, x: &[f32]) -> [f32; 3] {
        let mut ws = Workspace::for_net(self);
        self.forward_into(x, None, &mut ws);
        let out = &ws.acts[self.depth()];
        let clamp = |v: f64| (v as f32).clamp(1e-7, 1.0 - 1e-7);
        [clamp(out[0]), clamp(out[1]), clamp(out[2])]
    }
}
