use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::Rng;

/// Minibatches drawn without replacement, reshuffled every epoch. The
/// incomplete tail of an epoch is dropped. When the batch size covers the
/// whole dataset every batch is the full dataset in row order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, min_batch: usize) -> Result<Self> {
        let effective = batch_size.min(n);
        if effective < min_batch.max(1) {
            return Err(Error::BatchSize {
                got: effective,
                min: min_batch.max(1),
            });
        }
        Ok(BatchSampler {
            n,
            batch_size: effective,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size == self.n
    }

    pub fn next_indices(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.is_full_batch() {
            return (0..self.n).collect();
        }
        if self.order.is_empty() || self.cursor + self.batch_size > self.n {
            self.order = rng.permutation(self.n);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        idx
    }

    pub fn next_batch(&mut self, data: &DomainDataset, rng: &mut Rng) -> Result<Batch> {
        debug_assert_eq!(data.len(), self.n);
        data.batch(&self.next_indices(rng))
    }
}
