//! Ring buffer of latent states for cross-trajectory comparisons.
//!
//! Stores the frozen features (for lazy recomputation under the current
//! encoder), the flattened bisimulation latents, the action taken at that
//! state, and the (trajectory, time) provenance. Eviction is FIFO.
//! Entries go stale as the encoder trains; `refresh` recomputes every
//! stored latent, and the training loop calls it once per epoch.

use std::collections::VecDeque;

use crate::autodiff::Tensor;
use crate::rng::Rng;
use crate::Result;

#[derive(Clone, Debug)]
pub struct BufferEntry {
    /// Frozen feature grid `[n_patches, d_z]`.
    pub z: Tensor,
    /// Flattened bisimulation latent (length `n_patches · d_w`).
    pub w_flat: Vec<f64>,
    pub action: [f64; 2],
    pub traj: usize,
    pub t: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BisimBuffer {
    capacity: usize,
    entries: VecDeque<BufferEntry>,
}

impl BisimBuffer {
    pub fn new(capacity: usize) -> BisimBuffer {
        BisimBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, entry: BufferEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn get(&self, idx: usize) -> &BufferEntry {
        &self.entries[idx]
    }

    /// Pair each of `batch_size` elements with a buffer entry: first draw a
    /// comparison set of up to `comparison_size` distinct entries, then
    /// match each batch element to a uniform draw from that set.
    pub fn sample_pairs(
        &self,
        rng: &mut Rng,
        comparison_size: usize,
        batch_size: usize,
    ) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        let m = comparison_size.min(self.len());
        // sample m distinct indices without replacement
        let mut pool: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut pool);
        pool.truncate(m);
        (0..batch_size)
            .map(|_| pool[rng.uniform_usize(m)])
            .collect()
    }

    /// Recompute every stored latent with the current encoder.
    pub fn refresh(&mut self, mut encode: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<()> {
        for e in self.entries.iter_mut() {
            e.w_flat = encode(&e.z)?;
        }
        Ok(())
    }
}
