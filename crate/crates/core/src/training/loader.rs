use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// One batch drawn from a [`CyclicLoader`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    /// Position of the batch within the current pass.
    pub batch_index: usize,
    /// Dataset indices in the batch.
    pub samples: Vec<usize>,
}

/// Endless batch iterator over `n_samples` dataset indices. After the last
/// batch of a pass it wraps to the first, optionally with a fresh shuffle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLoader {
    n_samples: usize,
    batch_size: usize,
    shuffle: bool,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl CyclicLoader {
    /// With `shuffle`, the order is permuted at construction and on every
    /// wrap; otherwise samples come in index order.
    pub fn new(n_samples: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            bail!(Config, "loader has no samples");
        }
        if batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n_samples).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        Ok(CyclicLoader { n_samples, batch_size, shuffle, order, cursor: 0, rng })
    }

    /// Batches per pass (the last one may be short).
    pub fn len(&self) -> usize {
        self.n_samples.div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn next_batch(&mut self) -> Draw {
        let start = self.cursor * self.batch_size;
        let end = (start + self.batch_size).min(self.n_samples);
        let draw = Draw { batch_index: self.cursor, samples: self.order[start..end].to_vec() };
        self.cursor += 1;
        if self.cursor == self.len() {
            self.cursor = 0;
            if self.shuffle {
                self.order.shuffle(&mut self.rng);
            }
        }
        draw
    }
}
