use crate::rng::SplitMix64;

const EPOCH_STREAM: u64 = 0xB47C_0000;

/// Deterministic mini-batches over a fixed index set. Epoch `e` visits the
/// indices in the order of a Fisher–Yates permutation drawn from stream
/// `EPOCH_STREAM + e` of the seed.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl BatchIterator {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64, drop_last: bool) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self {
            indices,
            batch_size,
            seed,
            drop_last,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.indices.len() / self.batch_size
        } else {
            self.indices.len().div_ceil(self.batch_size)
        }
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = SplitMix64::stream(self.seed, EPOCH_STREAM + epoch);
        let mut order = self.indices.clone();
        rng.shuffle(&mut order);
        order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_index_once() {
        let it = BatchIterator::new((10..110).collect(), 64, 5, false);
        let batches = it.epoch(0);
        assert_eq!(batches.len(), 2);
        assert_eq!(it.batches_per_epoch(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (10..110).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_and_determinism() {
        let it = BatchIterator::new((0..100).collect(), 64, 5, true);
        assert_eq!(it.epoch(3).len(), 1);
        assert_eq!(it.epoch(3), it.epoch(3));
        assert_ne!(it.epoch(3), it.epoch(4));
        let other = BatchIterator::new((0..100).collect(), 64, 6, true);
        assert_ne!(it.epoch(3), other.epoch(3));
    }
}
