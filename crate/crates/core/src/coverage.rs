//! AFL-style edge coverage.
//!
//! Each executed block contributes one edge: `idx = cur_loc ^ prev_loc`,
//! after which `prev_loc = cur_loc >> 1`. Counters saturate at 255 and are
//! compared after bucketing hit counts into powers of two.

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MAP_SIZE_POW2: u32 = 16;
pub const DEFAULT_MAP_SIZE: usize = 1 << DEFAULT_MAP_SIZE_POW2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoverageError {
    #[error("coverage maps differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("map size exponent {0} out of range (1..=24)")]
    BadSize(u32),
}

/// Hit-count bucket for every possible raw counter value.
pub const BUCKETS: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = match i {
            0 => 0,
            1 => 1,
            2 => 2,
            3 => 4,
            4..=7 => 8,
            8..=15 => 16,
            16..=31 => 32,
            32..=127 => 64,
            _ => 128,
        };
        i += 1;
    }
    t
};

/// Location of a block for a map of `mask + 1` cells.
#[inline]
pub fn loc_hash(pc: u32, mask: u32) -> u32 {
    ((pc >> 4) ^ (pc << 8)) & mask
}

/// Raw edge hit counters plus the previous-location register.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    counters: Vec<u8>,
    prev_loc: u32,
    pow2: u32,
}

impl Default for CoverageMap {
    fn default() -> Self {
        CoverageMap::new(DEFAULT_MAP_SIZE_POW2).expect("default size valid")
    }
}

impl CoverageMap {
    pub fn new(pow2: u32) -> Result<CoverageMap, CoverageError> {
        if !(1..=24).contains(&pow2) {
            return Err(CoverageError::BadSize(pow2));
        }
        Ok(CoverageMap { counters: vec![0; 1 << pow2], prev_loc: 0, pow2 })
    }

    pub fn with_size(size: usize) -> Result<CoverageMap, CoverageError> {
        if !size.is_power_of_two() {
            return Err(CoverageError::BadSize(size.trailing_zeros()));
        }
        CoverageMap::new(size.trailing_zeros())
    }

    pub fn size(&self) -> usize {
        self.counters.len()
    }

    pub fn mask(&self) -> u32 {
        (self.counters.len() - 1) as u32
    }

    pub fn size_pow2(&self) -> u32 {
        self.pow2
    }

    pub fn prev_loc(&self) -> u32 {
        self.prev_loc
    }

    pub fn counters(&self) -> &[u8] {
        &self.counters
    }

    /// Location of the block starting at `pc` in this map.
    #[inline]
    pub fn loc(&self, pc: u32) -> u32 {
        loc_hash(pc, self.mask())
    }

    /// Records the transition into the block at `cur_loc` and returns the
    /// counter index that was bumped.
    #[inline]
    pub fn record_edge(&mut self, cur_loc: u32) -> usize {
        debug_assert!(cur_loc <= self.mask());
        let idx = ((cur_loc ^ self.prev_loc) & self.mask()) as usize;
        let c = &mut self.counters[idx];
        *c = c.saturating_add(1);
        self.prev_loc = cur_loc >> 1;
        idx
    }

    /// Zeroes counters and the previous location; called at every test case start.
    pub fn reset(&mut self) {
        self.counters.fill(0);
        self.prev_loc = 0;
    }

    pub fn classify(&self) -> ClassifiedMap {
        let mut out = vec![0u8; self.counters.len()];
        self.classify_into(&mut out);
        ClassifiedMap { buckets: out }
    }

    pub fn classify_into(&self, out: &mut [u8]) {
        assert_eq!(out.len(), self.counters.len());
        // Most of the map is zero; skip eight cells at a time.
        for (src, dst) in self.counters.chunks_exact(8).zip(out.chunks_exact_mut(8)) {
            if u64::from_ne_bytes(src.try_into().unwrap()) == 0 {
                dst.fill(0);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = BUCKETS[*s as usize];
                }
            }
        }
        let tail = self.counters.len() / 8 * 8;
        for i in tail..self.counters.len() {
            out[i] = BUCKETS[self.counters[i] as usize];
        }
    }

    pub fn edge_set(&self) -> BTreeSet<u32> {
        nonzero_indices(&self.counters).collect()
    }

    pub fn from_counters(counters: Vec<u8>) -> Result<CoverageMap, CoverageError> {
        let mut m = CoverageMap::with_size(counters.len())?;
        m.counters = counters;
        Ok(m)
    }
}

fn nonzero_indices(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes.iter().enumerate().filter(|(_, b)| **b != 0).map(|(i, _)| i as u32)
}

/// Bucketed coverage map; equality is byte equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassifiedMap {
    buckets: Vec<u8>,
}

impl ClassifiedMap {
    pub fn empty(size: usize) -> ClassifiedMap {
        ClassifiedMap { buckets: vec![0; size] }
    }

    /// Wraps raw bytes, bucketing each one.
    pub fn from_raw(bytes: &[u8]) -> ClassifiedMap {
        ClassifiedMap { buckets: bytes.iter().map(|b| BUCKETS[*b as usize]).collect() }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buckets
    }

    pub fn size(&self) -> usize {
        self.buckets.len()
    }

    pub fn edge_set(&self) -> BTreeSet<u32> {
        nonzero_indices(&self.buckets).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.buckets.iter().filter(|b| **b != 0).count()
    }

    /// `(index, bucket)` pairs; the unit cmin preserves.
    pub fn tuples(&self) -> impl Iterator<Item = (u32, u8)> + '_ {
        self.buckets.iter().enumerate().filter(|(_, b)| **b != 0).map(|(i, b)| (i as u32, *b))
    }

    /// Indices whose buckets differ.
    pub fn diff(&self, other: &ClassifiedMap) -> Result<BTreeSet<u32>, CoverageError> {
        self.same_size(other)?;
        Ok(self
            .buckets
            .iter()
            .zip(&other.buckets)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i as u32)
            .collect())
    }

    /// True if `self` sets a bucket bit that `seen` lacks.
    pub fn has_new_bits(&self, seen: &ClassifiedMap) -> Result<bool, CoverageError> {
        self.same_size(seen)?;
        Ok(self.buckets.iter().zip(&seen.buckets).any(|(a, s)| a & !s != 0))
    }

    /// Bitwise-max merge (per-bit OR); associative and commutative.
    pub fn merge(&mut self, other: &ClassifiedMap) -> Result<bool, CoverageError> {
        self.same_size(other)?;
        let mut grew = false;
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            let n = *a | *b;
            grew |= n != *a;
            *a = n;
        }
        Ok(grew)
    }

    fn same_size(&self, other: &ClassifiedMap) -> Result<(), CoverageError> {
        if self.buckets.len() != other.buckets.len() {
            return Err(CoverageError::SizeMismatch(self.buckets.len(), other.buckets.len()));
        }
        Ok(())
    }

    /// SHA-256 of the bucket bytes, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(&self.buckets))
    }

    /// Raw map file: exactly `size` bytes, no header.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, &self.buckets)
    }

    pub fn load(path: &Path) -> io::Result<ClassifiedMap> {
        let bytes = std::fs::read(path)?;
        if !bytes.len().is_power_of_two() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "map size is not a power of two"));
        }
        Ok(ClassifiedMap { buckets: bytes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loc_hash_examples() {
        assert_eq!(loc_hash(0x1000, 0xFFFF), 0x0100);
        assert_eq!(loc_hash(0, 0xFFFF), 0);
        assert_eq!(loc_hash(0x1000, 0xFFFF), loc_hash(0x1000, 0xFFFF));
    }

    #[test]
    fn record_edge_examples() {
        let mut m = CoverageMap::default();
        assert_eq!(m.record_edge(0x0100), 0x0100);
        assert_eq!(m.counters()[0x0100], 1);
        assert_eq!(m.prev_loc(), 0x0080);
        assert_eq!(m.record_edge(0x0F00), 0x0F80);
        assert_eq!(m.prev_loc(), 0x0780);
    }

    #[test]
    fn self_loop_uses_two_cells() {
        let mut m = CoverageMap::default();
        let a = m.record_edge(0x40);
        let b = m.record_edge(0x40);
        assert_eq!(a, 0x40);
        assert_eq!(b, 0x40 ^ 0x20);
    }

    #[test]
    fn saturates() {
        let mut m = CoverageMap::default();
        for _ in 0..300 {
            m.record_edge(0);
        }
        assert_eq!(m.counters()[0], 255);
    }

    #[test]
    fn bucket_table_rows() {
        assert_eq!(BUCKETS[0], 0);
        assert_eq!(BUCKETS[5], 8);
        assert_eq!(BUCKETS[200], 128);
        assert_eq!(BUCKETS[3], 4);
        assert_eq!(BUCKETS[16], 32);
        assert_eq!(BUCKETS[127], 64);
    }

    #[test]
    fn bucket_fixed_points() {
        // only the bucket values at the bottom and top of the table map to themselves
        let fixed: Vec<u8> = (0..=255u8).filter(|&b| BUCKETS[b as usize] == b).collect();
        assert_eq!(fixed, vec![0, 1, 2, 64, 128]);
        for b in [4u8, 8, 16, 32] {
            assert_eq!(BUCKETS[b as usize], b * 2);
        }
    }

    #[test]
    fn edge_set_and_diff() {
        let mut raw = vec![0u8; 16];
        raw[3] = 1;
        let m = CoverageMap::from_counters(raw.clone()).unwrap();
        assert_eq!(m.edge_set().into_iter().collect::<Vec<_>>(), vec![3]);
        let c = m.classify();
        assert!(c.diff(&c).unwrap().is_empty());
        raw[3] = 5;
        let a = ClassifiedMap::from_raw(&raw);
        raw[3] = 6;
        let b = ClassifiedMap::from_raw(&raw);
        assert!(a.diff(&b).unwrap().is_empty());
        assert_eq!(a.diff(&ClassifiedMap::empty(32)), Err(CoverageError::SizeMismatch(16, 32)));
    }

    #[test]
    fn classify_handles_small_and_odd_tail() {
        let mut m = CoverageMap::new(2).unwrap();
        // prev_loc stays 0 since 1 >> 1 == 0, so every hit lands on cell 1
        m.record_edge(1);
        m.record_edge(1);
        m.record_edge(1);
        assert_eq!(m.classify().bytes(), &[0, 4, 0, 0]);
    }

    #[test]
    fn bad_sizes() {
        assert!(CoverageMap::new(0).is_err());
        assert!(CoverageMap::with_size(1000).is_err());
        assert_eq!(CoverageMap::with_size(1024).unwrap().size(), 1024);
    }

    proptest! {
        #[test]
        fn classify_matches_table(raw in proptest::collection::vec(any::<u8>(), 64)) {
            let m = CoverageMap::from_counters(raw.clone()).unwrap();
            let c = m.classify();
            for (i, b) in raw.iter().enumerate() {
                prop_assert_eq!(c.bytes()[i], BUCKETS[*b as usize]);
            }
        }

        #[test]
        fn merge_is_commutative_and_associative(
            a in proptest::collection::vec(any::<u8>(), 32),
            b in proptest::collection::vec(any::<u8>(), 32),
            c in proptest::collection::vec(any::<u8>(), 32),
        ) {
            let (a, b, c) = (ClassifiedMap::from_raw(&a), ClassifiedMap::from_raw(&b), ClassifiedMap::from_raw(&c));
            let mut ab = a.clone(); ab.merge(&b).unwrap();
            let mut ba = b.clone(); ba.merge(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let mut ab_c = ab.clone(); ab_c.merge(&c).unwrap();
            let mut bc = b.clone(); bc.merge(&c).unwrap();
            let mut a_bc = a.clone(); a_bc.merge(&bc).unwrap();
            prop_assert_eq!(ab_c, a_bc);
        }

        #[test]
        fn edge_set_monotone(locs in proptest::collection::vec(0u32..0xFFFF, 1..200)) {
            let mut m = CoverageMap::default();
            let mut prev = 0;
            for l in locs {
                m.record_edge(l);
                let n = m.edge_set().len();
                prop_assert!(n >= prev);
                prev = n;
            }
        }
    }
}
