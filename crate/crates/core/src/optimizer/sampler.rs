//! Training-batch sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Picks the next batch of training positions.
pub trait BatchSampler {
    fn next_batch(&mut self, pool: usize, size: usize) -> Result<Vec<usize>>;
}

/// Without-replacement sampling in seeded epochs. Each epoch is a fresh
/// permutation of the pool; a tail too short for a full batch is dropped.
///
/// The whole state is three integers, so it checkpoints exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

impl EpochSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            cursor: 0,
        }
    }

    fn permutation(&self, pool: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(&mut rng);
        order
    }
}

impl BatchSampler for EpochSampler {
    fn next_batch(&mut self, pool: usize, size: usize) -> Result<Vec<usize>> {
        if size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if size > pool {
            return Err(Error::Config(format!(
                "batch size {size} exceeds the {pool} training instances"
            )));
        }
        if self.cursor + size > pool {
            self.epoch += 1;
            self.cursor = 0;
        }
        let batch = self.permutation(pool)[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn same_seed_same_batch() {
        let a = EpochSampler::new(7).next_batch(30, 5).unwrap();
        let b = EpochSampler::new(7).next_batch(30, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_batches_partition_ten_then_new_epoch() {
        let mut s = EpochSampler::new(3);
        let first = s.next_batch(10, 5).unwrap();
        let second = s.next_batch(10, 5).unwrap();
        let all: HashSet<_> = first.iter().chain(&second).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s.epoch, 0);
        s.next_batch(10, 5).unwrap();
        assert_eq!((s.epoch, s.cursor), (1, 5));
    }

    #[test]
    fn oversize_batch_is_config_error() {
        assert!(matches!(EpochSampler::new(0).next_batch(3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn epochs_reshuffle() {
        let s = EpochSampler::new(11);
        let next = EpochSampler { epoch: 1, ..s };
        assert_ne!(s.permutation(50), next.permutation(50));
    }
}
