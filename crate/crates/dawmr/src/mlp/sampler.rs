//! Balanced minibatch sampling over two record pools.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Splits labeled records into a negative-containing pool (at least one
/// labeled edge is negative) and an all-positive pool, then draws minibatches
/// alternating between the two. Records with no labeled edge are dropped.
///
/// Optional per-record weight multipliers (>= 1) bias the draw within each
/// pool; LED weighting uses this to oversample hard locations.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    negative_pool: Vec<usize>,
    positive_pool: Vec<usize>,
    negative_dist: Option<WeightedIndex<f64>>,
    positive_dist: Option<WeightedIndex<f64>>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    /// `labels[i]` are the three edge labels of record `i`; `weights`, when
    /// given, must be parallel to `labels` with every entry >= 1.
    pub fn new(labels: &[[i8; 3]], weights: Option<&[f64]>, seed: u64) -> Result<BalancedSampler> {
        if let Some(w) = weights {
            if w.len() != labels.len() {
                return Err(Error::DimensionMismatch("one weight per record".into()));
            }
            if w.iter().any(|&v| v < 1.0 || !v.is_finite() || v.is_nan()) {
                return Err(Error::InvalidArgument("sampler weights must be >= 1".into()));
            }
        }
        let mut negative_pool = Vec::new();
        let mut positive_pool = Vec::new();
        let mut negative_weights = Vec::new();
        let mut positive_weights = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let labeled = l.iter().any(|&v| v != 0);
            if !labeled {
                continue;
            }
            let w = weights.map(|w| w[i]).unwrap_or(1.0);
            if l.iter().any(|&v| v < 0) {
                negative_pool.push(i);
                negative_weights.push(w);
            } else {
                positive_pool.push(i);
                positive_weights.push(w);
            }
        }
        if negative_pool.is_empty() && positive_pool.is_empty() {
            return Err(Error::InvalidArgument("no labeled records to sample".into()));
        }
        let negative_dist =
            (!negative_pool.is_empty()).then(|| WeightedIndex::new(&negative_weights).expect("weights >= 1"));
        let positive_dist =
            (!positive_pool.is_empty()).then(|| WeightedIndex::new(&positive_weights).expect("weights >= 1"));
        Ok(BalancedSampler {
            negative_pool,
            positive_pool,
            negative_dist,
            positive_dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `(negative-containing, all-positive)` pool sizes.
    pub fn pool_sizes(&self) -> (usize, usize) {
        (self.negative_pool.len(), self.positive_pool.len())
    }

    /// Draw record indices for one minibatch, alternating pools (negative
    /// first); an empty pool falls back to the other.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        for j in 0..batch_size {
            let use_negative = if self.negative_pool.is_empty() {
                false
            } else if self.positive_pool.is_empty() {
                true
            } else {
                j % 2 == 0
            };
            let (pool, dist) = if use_negative {
                (&self.negative_pool, self.negative_dist.as_ref().expect("non-empty pool"))
            } else {
                (&self.positive_pool, self.positive_dist.as_ref().expect("non-empty pool"))
            };
            out.push(pool[dist.sample(&mut self.rng)]);
        }
        out
    }
}
