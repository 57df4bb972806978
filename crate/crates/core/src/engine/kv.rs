use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("out of KV memory: need {needed} blocks, {free} free")]
pub struct OutOfMemory {
    pub needed: usize,
    pub free: usize,
}

/// Fixed pool of equally sized KV blocks. Allocation is all-or-nothing and
/// always hands out the lowest free block ids first.
#[derive(Debug, Clone)]
pub struct PagedKvStore {
    block_size: usize,
    total_blocks: usize,
    free: BTreeSet<u32>,
    peak_used: usize,
}

impl PagedKvStore {
    pub fn new(block_size: usize, total_blocks: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        PagedKvStore {
            block_size,
            total_blocks,
            free: (0..total_blocks as u32).collect(),
            peak_used: 0,
        }
    }

    /// A pool large enough for `tokens` tokens.
    pub fn for_tokens(block_size: usize, tokens: usize) -> Self {
        Self::new(block_size, tokens.div_ceil(block_size))
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn total_blocks(&self) -> usize {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn used_blocks(&self) -> usize {
        self.total_blocks - self.free.len()
    }

    pub fn peak_used_blocks(&self) -> usize {
        self.peak_used
    }

    pub fn reset_peak(&mut self) {
        self.peak_used = self.used_blocks();
    }

    pub fn blocks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.block_size)
    }

    pub fn allocate(&mut self, n: usize) -> Result<Vec<u32>, OutOfMemory> {
        if n > self.free.len() {
            return Err(OutOfMemory { needed: n, free: self.free.len() });
        }
        let out: Vec<u32> = (0..n).filter_map(|_| self.free.pop_first()).collect();
        self.peak_used = self.peak_used.max(self.used_blocks());
        Ok(out)
    }

    pub fn release(&mut self, blocks: &[u32]) {
        for &b in blocks {
            debug_assert!((b as usize) < self.total_blocks);
            let fresh = self.free.insert(b);
            debug_assert!(fresh, "block {b} released twice");
        }
    }
}
