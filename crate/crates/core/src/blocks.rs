//! Bitmask sets of block indices.
//!
//! Interventions (the blocks placed on the machine) and causal structures
//! (the blocks that are blickets) are both subsets of a task's blocks, so
//! they share one representation.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest block count a `BlockSet` can address.
pub const MAX_BLOCKS: usize = 16;

/// A subset of block indices stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockSet(u32);

impl BlockSet {
    pub const EMPTY: BlockSet = BlockSet(0);

    pub fn from_bits(bits: u32) -> Self {
        BlockSet(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// All blocks `0..n`.
    pub fn full(n_blocks: usize) -> Self {
        debug_assert!(n_blocks <= MAX_BLOCKS);
        BlockSet(((1u64 << n_blocks) - 1) as u32)
    }

    /// The first `k` blocks, i.e. the lexicographically first `k`-subset.
    pub fn first(k: usize) -> Self {
        Self::full(k)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Result<Self> {
        let mut bits = 0u32;
        for i in indices {
            if i >= MAX_BLOCKS {
                return Err(Error::invalid(format!("block index {i} out of range")));
            }
            bits |= 1 << i;
        }
        Ok(BlockSet(bits))
    }

    pub fn contains(self, block: usize) -> bool {
        block < 32 && self.0 & (1 << block) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection_len(self, other: BlockSet) -> usize {
        (self.0 & other.0).count_ones() as usize
    }

    /// True if every index is below `n_blocks`.
    pub fn fits(self, n_blocks: usize) -> bool {
        n_blocks >= 32 || self.0 >> n_blocks == 0
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..32).filter(move |i| bits & (1 << i) != 0)
    }

    /// Every subset of `n_blocks` blocks in bitmask order, starting at the empty set.
    pub fn power_set(n_blocks: usize) -> impl Iterator<Item = BlockSet> {
        (0..1u32 << n_blocks).map(BlockSet)
    }

    /// Applies a relabeling `perm[old] = new`.
    pub fn permute(self, perm: &[usize]) -> BlockSet {
        let mut bits = 0;
        for i in self.indices() {
            bits |= 1 << perm[i];
        }
        BlockSet(bits)
    }
}

impl fmt::Debug for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "∅");
        }
        let letters: String = self
            .indices()
            .map(|i| char::from(b'A' + i as u8))
            .collect();
        write!(f, "{letters}")
    }
}

impl Serialize for BlockSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.indices())
    }
}

impl<'de> Deserialize<'de> for BlockSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let indices = Vec::<usize>::deserialize(deserializer)?;
        BlockSet::from_indices(indices).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_round_trip() {
        let s = BlockSet::from_indices([0, 2, 5]).unwrap();
        assert_eq!(s.indices().collect::<Vec<_>>(), vec![0, 2, 5]);
        assert_eq!(s.len(), 3);
        assert!(s.fits(6));
        assert!(!s.fits(5));
    }

    #[test]
    fn power_set_starts_empty() {
        let all: Vec<_> = BlockSet::power_set(3).collect();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], BlockSet::EMPTY);
        assert_eq!(all[7], BlockSet::full(3));
    }

    #[test]
    fn display_uses_letters() {
        assert_eq!(BlockSet::from_indices([0, 2]).unwrap().to_string(), "AC");
        assert_eq!(BlockSet::EMPTY.to_string(), "∅");
    }

    #[test]
    fn rejects_wide_index() {
        assert!(BlockSet::from_indices([MAX_BLOCKS]).is_err());
    }
}
