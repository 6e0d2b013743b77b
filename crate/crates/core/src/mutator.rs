//! Seeded havoc and splice mutation.
//!
//! Operators implement [`HavocOp`] and live in a weighted [`HavocRegistry`].
//! An operator is eligible when the current input is at least
//! [`HavocOp::min_len`] bytes long, so an empty input only sees the
//! insert-class operators.

use thiserror::Error;

use crate::rng::Rng;

/// Havoc rounds per selected queue entry; favored entries get twice this.
pub const ENERGY: usize = 256;
pub const ARITH_MAX: u32 = 35;
pub const INTERESTING_8: [u8; 5] = [0x00, 0x01, 0x7F, 0x80, 0xFF];
pub const INTERESTING_16: [u16; 4] = [0x0000, 0x7FFF, 0x8000, 0xFFFF];
const MAX_BLOCK: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MutatorError {
    #[error("splice needs two inputs of at least 2 bytes (got {0} and {1})")]
    TooShort(usize, usize),
}

pub trait HavocOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn min_len(&self) -> usize;
    /// Mutates `data` in place. Implementations may grow `data` past
    /// `max_len`; the caller truncates.
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, max_len: usize);
}

fn block_len(rng: &mut Rng, limit: usize) -> usize {
    rng.range(1, limit.clamp(1, MAX_BLOCK))
}

struct BitFlip;
impl HavocOp for BitFlip {
    fn name(&self) -> &'static str {
        "bitflip"
    }
    fn min_len(&self) -> usize {
        1
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let bit = rng.below(data.len() * 8);
        data[bit / 8] ^= 0x80 >> (bit % 8);
    }
}

struct Interesting8;
impl HavocOp for Interesting8 {
    fn name(&self) -> &'static str {
        "interesting8"
    }
    fn min_len(&self) -> usize {
        1
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let pos = rng.below(data.len());
        data[pos] = INTERESTING_8[rng.below(INTERESTING_8.len())];
    }
}

struct Interesting16;
impl HavocOp for Interesting16 {
    fn name(&self) -> &'static str {
        "interesting16"
    }
    fn min_len(&self) -> usize {
        2
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let pos = rng.below(data.len() - 1);
        let v = INTERESTING_16[rng.below(INTERESTING_16.len())];
        data[pos..pos + 2].copy_from_slice(&v.to_le_bytes());
    }
}

/// Adds or subtracts 1..=35 on a little-endian lane of `WIDTH` bytes.
struct Arith<const WIDTH: usize>;
impl<const WIDTH: usize> HavocOp for Arith<WIDTH> {
    fn name(&self) -> &'static str {
        match WIDTH {
            1 => "arith8",
            2 => "arith16",
            _ => "arith32",
        }
    }
    fn min_len(&self) -> usize {
        WIDTH
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let pos = rng.below(data.len() - WIDTH + 1);
        let delta = rng.range(1, ARITH_MAX as usize) as u32;
        let lane = &mut data[pos..pos + WIDTH];
        let mut buf = [0u8; 4];
        buf[..WIDTH].copy_from_slice(lane);
        let v = u32::from_le_bytes(buf);
        let v = if rng.chance(1, 2) { v.wrapping_add(delta) } else { v.wrapping_sub(delta) };
        lane.copy_from_slice(&v.to_le_bytes()[..WIDTH]);
    }
}

struct RandomByte;
impl HavocOp for RandomByte {
    fn name(&self) -> &'static str {
        "randombyte"
    }
    fn min_len(&self) -> usize {
        1
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let pos = rng.below(data.len());
        // xor with 1..=255 so the byte always changes
        data[pos] ^= rng.range(1, 255) as u8;
    }
}

struct BlockDelete;
impl HavocOp for BlockDelete {
    fn name(&self) -> &'static str {
        "blockdelete"
    }
    fn min_len(&self) -> usize {
        2
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let len = block_len(rng, data.len() - 1);
        let pos = rng.below(data.len() - len + 1);
        data.drain(pos..pos + len);
    }
}

/// Inserts a copy of an existing block, or a run of one random byte when
/// the input is empty (and one time in four otherwise).
struct BlockInsert;
impl HavocOp for BlockInsert {
    fn name(&self) -> &'static str {
        "blockinsert"
    }
    fn min_len(&self) -> usize {
        0
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, max_len: usize) {
        if data.len() >= max_len {
            return;
        }
        let room = max_len - data.len();
        let at = rng.below(data.len() + 1);
        let block: Vec<u8> = if data.is_empty() || rng.chance(1, 4) {
            let len = block_len(rng, room);
            vec![rng.byte(); len]
        } else {
            let len = block_len(rng, data.len().min(room));
            let from = rng.below(data.len() - len + 1);
            data[from..from + len].to_vec()
        };
        data.splice(at..at, block);
    }
}

struct BlockOverwrite;
impl HavocOp for BlockOverwrite {
    fn name(&self) -> &'static str {
        "blockoverwrite"
    }
    fn min_len(&self) -> usize {
        2
    }
    fn apply(&self, data: &mut Vec<u8>, rng: &mut Rng, _: usize) {
        let len = block_len(rng, data.len() - 1);
        let to = rng.below(data.len() - len + 1);
        if rng.chance(1, 4) {
            let b = rng.byte();
            data[to..to + len].fill(b);
        } else {
            let from = rng.below(data.len() - len + 1);
            data.copy_within(from..from + len, to);
        }
    }
}

/// Weighted operator table.
pub struct HavocRegistry {
    ops: Vec<(Box<dyn HavocOp>, u32)>,
}

impl HavocRegistry {
    pub fn empty() -> Self {
        HavocRegistry { ops: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = HavocRegistry::empty();
        r.register(Box::new(BitFlip), 4);
        r.register(Box::new(Interesting8), 2);
        r.register(Box::new(Interesting16), 2);
        r.register(Box::new(Arith::<1>), 2);
        r.register(Box::new(Arith::<2>), 1);
        r.register(Box::new(Arith::<4>), 1);
        r.register(Box::new(RandomByte), 4);
        r.register(Box::new(BlockDelete), 2);
        r.register(Box::new(BlockInsert), 1);
        r.register(Box::new(BlockOverwrite), 1);
        r
    }

    pub fn register(&mut self, op: Box<dyn HavocOp>, weight: u32) {
        assert!(weight > 0, "operator weight must be positive");
        self.ops.push((op, weight));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|(op, _)| op.name()).collect()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn pick(&self, len: usize, rng: &mut Rng) -> Option<usize> {
        let total: u64 = self.ops.iter().filter(|(op, _)| op.min_len() <= len).map(|(_, w)| u64::from(*w)).sum();
        if total == 0 {
            return None;
        }
        let mut x = rng.below(total as usize) as u64;
        for (i, (op, w)) in self.ops.iter().enumerate() {
            if op.min_len() > len {
                continue;
            }
            if x < u64::from(*w) {
                return Some(i);
            }
            x -= u64::from(*w);
        }
        unreachable!("weights sum to total")
    }
}

impl Default for HavocRegistry {
    fn default() -> Self {
        HavocRegistry::builtin()
    }
}

pub struct Mutator {
    rng: Rng,
    ops: HavocRegistry,
    max_len: usize,
    fired: Vec<u64>,
}

impl Mutator {
    pub fn new(seed: u64, max_len: usize) -> Mutator {
        Mutator::with_registry(crate::rng::Rng::new(seed), HavocRegistry::builtin(), max_len)
    }

    pub fn with_registry(rng: Rng, ops: HavocRegistry, max_len: usize) -> Mutator {
        let fired = vec![0; ops.len()];
        Mutator { rng, ops, max_len, fired }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// `(operator name, times applied)` since construction.
    pub fn fire_counts(&self) -> Vec<(&'static str, u64)> {
        self.ops.names().into_iter().zip(self.fired.iter().copied()).collect()
    }

    /// Stacking depth for one havoc round: a power of two in 2..=128.
    pub fn random_stacking(&mut self) -> usize {
        1 << (1 + self.rng.below(7))
    }

    /// Applies `stacking` operators drawn from the eligible set.
    pub fn havoc(&mut self, input: &[u8], stacking: usize) -> Vec<u8> {
        let mut data = input[..input.len().min(self.max_len)].to_vec();
        for _ in 0..stacking.max(1) {
            let Some(i) = self.ops.pick(data.len(), &mut self.rng) else {
                break;
            };
            self.ops.ops[i].0.apply(&mut data, &mut self.rng, self.max_len);
            data.truncate(self.max_len);
            self.fired[i] += 1;
        }
        data
    }

    /// One havoc round with a random stacking depth.
    pub fn mutate(&mut self, input: &[u8]) -> Vec<u8> {
        let stacking = self.random_stacking();
        self.havoc(input, stacking)
    }

    /// Crosses `a` and `b` at random interior points, then runs one havoc
    /// round on the result.
    pub fn splice(&mut self, a: &[u8], b: &[u8]) -> Result<Vec<u8>, MutatorError> {
        if a.len() < 2 || b.len() < 2 {
            return Err(MutatorError::TooShort(a.len(), b.len()));
        }
        let ca = self.rng.range(1, a.len() - 1);
        let cb = self.rng.range(1, b.len() - 1);
        let joined = splice_at(a, b, ca, cb);
        Ok(self.mutate(&joined))
    }
}

/// `a[..ca]` followed by `b[cb..]`.
pub fn splice_at(a: &[u8], b: &[u8], ca: usize, cb: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(ca + b.len().saturating_sub(cb));
    out.extend_from_slice(&a[..ca.min(a.len())]);
    out.extend_from_slice(&b[cb.min(b.len())..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_single_edit() {
        let mut m = Mutator::new(1, 64);
        let out = m.havoc(&[0x41, 0x41, 0x41, 0x41], 1);
        assert_eq!(out, GOLDEN_1);
        let fired: Vec<_> = m.fire_counts().into_iter().filter(|(_, n)| *n > 0).collect();
        assert_eq!(fired.len(), 1);
    }

    // seed 1 draws a block delete of three bytes
    const GOLDEN_1: [u8; 1] = [0x41];

    #[test]
    fn golden_stream() {
        let mut m = Mutator::new(7, 32);
        let outs: Vec<String> = (0..4).map(|_| hex::encode(m.mutate(b"hello world"))).collect();
        assert_eq!(outs, GOLDEN_STREAM);
    }

    const GOLDEN_STREAM: [&str; 4] = ["68656c6c6f20776e726c53", "e8f96c6c2fe77704726c64", "ff7f7c6cfa", "69726c64"];

    #[test]
    fn empty_input_only_inserts() {
        let mut m = Mutator::new(3, 16);
        for _ in 0..200 {
            let out = m.havoc(&[], 1);
            assert!(!out.is_empty());
            assert!(out.len() <= 16);
        }
        for (name, n) in m.fire_counts() {
            assert_eq!(n > 0, name == "blockinsert", "{name}");
        }
    }

    #[test]
    fn empty_input_with_no_insert_op_stays_empty() {
        let mut r = HavocRegistry::empty();
        r.register(Box::new(BitFlip), 1);
        let mut m = Mutator::with_registry(crate::rng::Rng::new(1), r, 8);
        assert!(m.havoc(&[], 4).is_empty());
    }

    #[test]
    fn every_operator_fires() {
        let mut m = Mutator::new(11, 256);
        let seed = b"0123456789abcdef0123456789abcdef";
        for _ in 0..100_000 {
            m.havoc(seed, 1);
        }
        for (name, n) in m.fire_counts() {
            assert!(n > 0, "{name} never fired");
        }
    }

    #[test]
    fn splice_construction_and_errors() {
        assert_eq!(splice_at(&[1, 2, 3, 4], &[9, 9, 9, 9], 2, 2), vec![1, 2, 9, 9]);
        let mut m = Mutator::new(5, 8);
        assert_eq!(m.splice(&[1], &[1, 2]), Err(MutatorError::TooShort(1, 2)));
        assert_eq!(m.splice(&[1, 2], &[]), Err(MutatorError::TooShort(2, 0)));
        let a = [7u8; 8];
        for _ in 0..100 {
            assert!(m.splice(&a, &a).unwrap().len() <= 8);
        }
    }

    #[test]
    fn arith_wraps_little_endian() {
        let mut rng = crate::rng::Rng::new(0);
        let mut data = vec![0xFF, 0xFF];
        for _ in 0..50 {
            let before = u16::from_le_bytes([data[0], data[1]]);
            Arith::<2>.apply(&mut data, &mut rng, 2);
            let after = u16::from_le_bytes([data[0], data[1]]);
            let d = after.wrapping_sub(before) as i16;
            assert!((1..=35).contains(&d.unsigned_abs()), "{before:#x} -> {after:#x}");
        }
    }

    proptest! {
        #[test]
        fn same_seed_same_output(seed: u64, input in proptest::collection::vec(any::<u8>(), 0..64)) {
            let a = Mutator::new(seed, 128).mutate(&input);
            let b = Mutator::new(seed, 128).mutate(&input);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn output_bounded(seed: u64, max_len in 1usize..64, input in proptest::collection::vec(any::<u8>(), 0..100)) {
            let mut m = Mutator::new(seed, max_len);
            for _ in 0..8 {
                let out = m.mutate(&input);
                prop_assert!(out.len() <= max_len);
                prop_assert!(!out.is_empty() || input.is_empty());
            }
        }
    }
}
