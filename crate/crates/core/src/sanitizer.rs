//! Drop-in sanitizing heap allocator.
//!
//! The target's allocator and deallocator are intercepted by address and
//! served from a bump arena. Everything in the arena that is not inside a
//! live chunk is poisoned: trailing redzones, alignment gaps, freed chunks
//! and the untouched tail. Two memory hooks covering the whole arena check
//! every guest access against the ledger, which lives in the machine's
//! attached data rather than in guest memory.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::vmcore::{HookAction, HookEvent, HookId, HookKind, Machine, Perms, VmError};

pub const DEFAULT_ARENA_SIZE: u32 = 1 << 20;
pub const CHUNK_ALIGN: u32 = 16;
/// Hook abort code used when the arena runs out.
pub const ABORT_OOM: u32 = 0x00AB_0001;
/// Hook abort code used when a run produced too many findings.
pub const ABORT_TOO_MANY_FINDINGS: u32 = 0x00AB_0002;
pub const MAX_FINDINGS_PER_RUN: usize = 1024;

/// Redzone bytes placed after a chunk of `size` bytes: a quarter of the
/// size rounded up to 16, kept within 16..=256.
pub fn redzone_policy(size: u32) -> u32 {
    (size.div_ceil(64) * 16).clamp(16, 256)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SanitizerError {
    #[error("arena {base:#x}+{size:#x} is not mapped read/write")]
    ArenaUnmapped { base: u32, size: u32 },
    #[error("invalid allocator ABI: {0}")]
    AbiInvalid(String),
    #[error("sanitizer already installed on this machine")]
    AlreadyInstalled,
    #[error(transparent)]
    Vm(#[from] VmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ReportKind {
    OobRead,
    OobWrite,
    UseAfterFreeRead,
    UseAfterFreeWrite,
    DoubleFree,
    InvalidFree,
    WildAccess,
}

impl ReportKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ReportKind::OobRead => "oobread",
            ReportKind::OobWrite => "oobwrite",
            ReportKind::UseAfterFreeRead => "uafread",
            ReportKind::UseAfterFreeWrite => "uafwrite",
            ReportKind::DoubleFree => "doublefree",
            ReportKind::InvalidFree => "invalidfree",
            ReportKind::WildAccess => "wild",
        }
    }

    pub fn is_write(self) -> bool {
        matches!(self, ReportKind::OobWrite | ReportKind::UseAfterFreeWrite)
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn hex32<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:#010x}"))
}

fn hex32_opt<S: Serializer>(v: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => hex32(v, s),
        None => s.serialize_none(),
    }
}

/// A classified finding: one per offending access or free call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CrashReport {
    pub kind: ReportKind,
    #[serde(serialize_with = "hex32")]
    pub pc: u32,
    #[serde(serialize_with = "hex32")]
    pub addr: u32,
    pub size: u32,
    #[serde(serialize_with = "hex32_opt")]
    pub related_chunk: Option<u32>,
    pub dedup_key: String,
}

impl CrashReport {
    pub fn new(kind: ReportKind, pc: u32, addr: u32, size: u32, related_chunk: Option<u32>, last_loc: u32) -> Self {
        CrashReport { kind, pc, addr, size, related_chunk, dedup_key: dedup_key(kind.short_name(), pc, last_loc) }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for CrashReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at pc={:#010x} addr={:#010x} size={}", self.kind, self.pc, self.addr, self.size)?;
        if let Some(c) = self.related_chunk {
            write!(f, " chunk={c:#010x}")?;
        }
        Ok(())
    }
}

/// Crash dedup key built from kind, faulting pc and last block location.
pub fn dedup_key(kind: &str, pc: u32, last_loc: u32) -> String {
    format!("{kind}-{pc:08x}-{last_loc:04x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkState {
    Live,
    Freed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkRecord {
    pub chunk: u32,
    pub requested: u32,
    /// Usable bytes (`requested`, or 1 for zero-size requests).
    pub size: u32,
    pub redzone: u32,
    /// Poisoned alignment bytes directly before the chunk.
    pub gap: u32,
    pub state: ChunkState,
}

impl ChunkRecord {
    fn end(&self) -> u32 {
        self.chunk + self.size
    }

    fn redzone_end(&self) -> u32 {
        self.end() + self.redzone
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArenaConfig {
    pub base: u32,
    pub size: u32,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        ArenaConfig { base: 0x0100_0000, size: DEFAULT_ARENA_SIZE }
    }
}

/// How the target calls its allocator. Return is always `pc <- lr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AllocAbi {
    pub alloc_addr: u32,
    pub free_addr: u32,
    pub size_reg: u8,
    pub ptr_reg: u8,
    pub ret_reg: u8,
}

/// The out-of-guest heap ledger plus findings of the current run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HeapState {
    pub arena: ArenaConfig,
    pub cursor: u32,
    pub records: BTreeMap<u32, ChunkRecord>,
    pub findings: Vec<CrashReport>,
    pub dropped: u64,
}

impl HeapState {
    pub fn new(arena: ArenaConfig) -> HeapState {
        HeapState { arena, cursor: arena.base, records: BTreeMap::new(), findings: Vec::new(), dropped: 0 }
    }

    fn arena_end(&self) -> u64 {
        u64::from(self.arena.base) + u64::from(self.arena.size)
    }

    /// Serves a chunk, or `None` when the arena is exhausted.
    pub fn alloc(&mut self, requested: u32) -> Option<u32> {
        let size = requested.max(1);
        let redzone = redzone_policy(size);
        let chunk = u64::from(self.cursor).next_multiple_of(u64::from(CHUNK_ALIGN));
        let next = chunk + u64::from(size) + u64::from(redzone);
        if next > self.arena_end() {
            return None;
        }
        let chunk = chunk as u32;
        let gap = chunk - self.cursor;
        self.records.insert(chunk, ChunkRecord { chunk, requested, size, redzone, gap, state: ChunkState::Live });
        self.cursor = next as u32;
        Some(chunk)
    }

    /// Result of freeing `ptr`: `None` on success, or the report kind.
    pub fn free(&mut self, ptr: u32) -> Option<ReportKind> {
        match self.records.get_mut(&ptr) {
            Some(r) if r.state == ChunkState::Live => {
                r.state = ChunkState::Freed;
                None
            }
            Some(_) => Some(ReportKind::DoubleFree),
            None => Some(ReportKind::InvalidFree),
        }
    }

    /// Clears the ledger and rewinds the bump cursor; the whole arena is
    /// poisoned again.
    pub fn reset(&mut self) {
        self.cursor = self.arena.base;
        self.records.clear();
        self.findings.clear();
        self.dropped = 0;
    }

    pub fn live_chunks(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.records.values().filter(|r| r.state == ChunkState::Live)
    }

    fn is_accessible(&self, addr: u32) -> bool {
        match self.records.range(..=addr).next_back() {
            Some((_, r)) => r.state == ChunkState::Live && addr < r.end(),
            None => false,
        }
    }

    /// First poisoned byte of `[addr, addr+len)` within the arena.
    pub fn first_poisoned(&self, addr: u32, len: u32) -> Option<u32> {
        let lo = u64::from(addr).max(u64::from(self.arena.base));
        let hi = (u64::from(addr) + u64::from(len)).min(self.arena_end());
        (lo..hi).map(|a| a as u32).find(|&a| !self.is_accessible(a))
    }

    /// Classifies a poisoned byte: freed chunk body, trailing redzone,
    /// leading gap of the following chunk, or wild.
    pub fn classify(&self, addr: u32, write: bool) -> (ReportKind, Option<u32>) {
        let (oob, uaf) = if write {
            (ReportKind::OobWrite, ReportKind::UseAfterFreeWrite)
        } else {
            (ReportKind::OobRead, ReportKind::UseAfterFreeRead)
        };
        if let Some((_, r)) = self.records.range(..=addr).next_back() {
            if addr < r.end() {
                return (uaf, Some(r.chunk));
            }
            if addr < r.redzone_end() {
                return (oob, Some(r.chunk));
            }
        }
        if let Some((_, next)) = self.records.range(addr..).next() {
            if addr >= next.chunk - next.gap {
                return (oob, Some(next.chunk));
            }
        }
        (ReportKind::WildAccess, None)
    }

    /// Bytes accounted for by chunks, redzones and gaps plus the free tail.
    /// Always equals the arena size.
    pub fn accounted_bytes(&self) -> u64 {
        let used: u64 = self.records.values().map(|r| u64::from(r.gap + r.size + r.redzone)).sum();
        used + (self.arena_end() - u64::from(self.cursor))
    }

    fn push(&mut self, report: CrashReport) -> HookAction {
        if self.findings.len() >= MAX_FINDINGS_PER_RUN {
            self.dropped += 1;
            return HookAction::Abort(ABORT_TOO_MANY_FINDINGS);
        }
        self.findings.push(report);
        HookAction::Continue
    }
}

/// Machine data that can carry a heap ledger.
pub trait HasHeap {
    fn heap(&self) -> Option<&HeapState>;
    fn heap_slot(&mut self) -> &mut Option<HeapState>;
}

impl HasHeap for Option<HeapState> {
    fn heap(&self) -> Option<&HeapState> {
        self.as_ref()
    }
    fn heap_slot(&mut self) -> &mut Option<HeapState> {
        self
    }
}

/// Handle to an installed sanitizer.
#[derive(Debug, Clone)]
pub struct Sanitizer {
    pub arena: ArenaConfig,
    pub abi: AllocAbi,
    hooks: Vec<HookId>,
}

impl Sanitizer {
    pub fn install<D: HasHeap + 'static>(
        m: &mut Machine<D>,
        arena: ArenaConfig,
        abi: AllocAbi,
    ) -> Result<Sanitizer, SanitizerError> {
        if m.data().heap().is_some() {
            return Err(SanitizerError::AlreadyInstalled);
        }
        let rw_mapped = arena.size > 0
            && m.is_mapped(arena.base, arena.size)
            && (0..arena.size.div_ceil(crate::vmcore::PAGE_SIZE))
                .all(|p| m.perms_at(arena.base + p * crate::vmcore::PAGE_SIZE).is_some_and(|x| x.contains(Perms::RW)));
        if !rw_mapped || !arena.base.is_multiple_of(CHUNK_ALIGN) {
            return Err(SanitizerError::ArenaUnmapped { base: arena.base, size: arena.size });
        }
        for (what, addr) in [("alloc", abi.alloc_addr), ("free", abi.free_addr)] {
            if !m.perms_at(addr).is_some_and(|p| p.contains(Perms::EXEC)) {
                return Err(SanitizerError::AbiInvalid(format!("{what} address {addr:#x} is not mapped executable")));
            }
        }
        if abi.alloc_addr == abi.free_addr {
            return Err(SanitizerError::AbiInvalid("alloc and free share an address".into()));
        }
        for (what, r) in [("size", abi.size_reg), ("ptr", abi.ptr_reg), ("ret", abi.ret_reg)] {
            if r > 15 {
                return Err(SanitizerError::AbiInvalid(format!("{what} register r{r} out of range")));
            }
        }

        *m.data_mut().heap_slot() = Some(HeapState::new(arena));
        let end = u64::from(arena.base) + u64::from(arena.size);
        let mut hooks = Vec::new();
        hooks.push(m.add_hook(HookKind::MemRead, arena.base, end, Box::new(check_access::<D>))?);
        hooks.push(m.add_hook(HookKind::MemWrite, arena.base, end, Box::new(check_access::<D>))?);
        hooks.push(m.add_hook(
            HookKind::Intercept,
            abi.alloc_addr,
            0,
            Box::new(move |m: &mut Machine<D>, _ev: &HookEvent| {
                let size = m.cpu.regs[abi.size_reg as usize];
                let heap = m.data_mut().heap_slot().as_mut().expect("heap installed");
                match heap.alloc(size) {
                    Some(chunk) => {
                        m.cpu.regs[abi.ret_reg as usize] = chunk;
                        m.cpu.pc = m.cpu.regs[crate::vmcore::isa::REG_LR as usize];
                        HookAction::Continue
                    }
                    None => HookAction::Abort(ABORT_OOM),
                }
            }),
        )?);
        hooks.push(m.add_hook(
            HookKind::Intercept,
            abi.free_addr,
            0,
            Box::new(move |m: &mut Machine<D>, _ev: &HookEvent| {
                let ptr = m.cpu.regs[abi.ptr_reg as usize];
                let lr = m.cpu.regs[crate::vmcore::isa::REG_LR as usize];
                m.cpu.pc = lr;
                if ptr == 0 {
                    return HookAction::Continue;
                }
                let last_loc = m.last_block_loc();
                let heap = m.data_mut().heap_slot().as_mut().expect("heap installed");
                match heap.free(ptr) {
                    None => HookAction::Continue,
                    Some(kind) => {
                        let related = (kind == ReportKind::DoubleFree).then_some(ptr);
                        let call_site = lr.wrapping_sub(4);
                        heap.push(CrashReport::new(kind, call_site, ptr, 0, related, last_loc))
                    }
                }
            }),
        )?);
        Ok(Sanitizer { arena, abi, hooks })
    }

    /// Re-poisons the arena and clears the ledger.
    pub fn reset<D: HasHeap>(&self, m: &mut Machine<D>) {
        if let Some(h) = m.data_mut().heap_slot().as_mut() {
            h.reset();
        }
    }

    /// Takes the findings accumulated since the last call.
    pub fn take_findings<D: HasHeap>(&self, m: &mut Machine<D>) -> Vec<CrashReport> {
        m.data_mut().heap_slot().as_mut().map(|h| std::mem::take(&mut h.findings)).unwrap_or_default()
    }

    pub fn uninstall<D: HasHeap>(self, m: &mut Machine<D>) -> Result<(), SanitizerError> {
        for id in self.hooks {
            m.remove_hook(id)?;
        }
        *m.data_mut().heap_slot() = None;
        Ok(())
    }
}

fn check_access<D: HasHeap>(m: &mut Machine<D>, ev: &HookEvent) -> HookAction {
    let last_loc = m.last_block_loc();
    let Some(heap) = m.data_mut().heap_slot().as_mut() else {
        return HookAction::Continue;
    };
    let Some(bad) = heap.first_poisoned(ev.addr, ev.size) else {
        return HookAction::Continue;
    };
    let (kind, related) = heap.classify(bad, ev.kind == HookKind::MemWrite);
    heap.push(CrashReport::new(kind, ev.pc, bad, ev.size, related, last_loc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmcore::isa::{encode, Insn};
    use crate::vmcore::StopKind;

    const ARENA: u32 = 0x10_0000;
    const ALLOC: u32 = 0x800;
    const FREE: u32 = 0x900;
    const ABI: AllocAbi = AllocAbi { alloc_addr: ALLOC, free_addr: FREE, size_reg: 1, ptr_reg: 1, ret_reg: 1 };

    fn machine(prog: &[Insn]) -> Machine<Option<HeapState>> {
        let mut m = Machine::new(None);
        m.map_region(0, 0x1000, Perms::RX).unwrap();
        m.map_region(ARENA, 0x1_0000, Perms::RW).unwrap();
        m.map_region(0x20_0000, 0x1000, Perms::RW).unwrap();
        let bytes: Vec<u8> = prog.iter().flat_map(|i| encode(i).to_le_bytes()).collect();
        m.write_mem(0, &bytes).unwrap();
        // real allocator bodies that must never run
        m.write_mem(ALLOC, &encode(&Insn::Ecall { n: 1 }).to_le_bytes()).unwrap();
        m.write_mem(FREE, &encode(&Insn::Ecall { n: 1 }).to_le_bytes()).unwrap();
        Sanitizer::install(&mut m, ArenaConfig { base: ARENA, size: 0x1_0000 }, ABI).unwrap();
        m
    }

    fn call(target: u32, at: u32) -> Insn {
        Insn::Call { off: ((target as i64 - at as i64 - 4) / 4) as i16 }
    }

    fn findings(m: &Machine<Option<HeapState>>) -> Vec<CrashReport> {
        m.data().as_ref().unwrap().findings.clone()
    }

    // alloc(size) -> r5, then run `tail` with r5 as the chunk
    fn alloc_then(size: u16, tail: &[Insn]) -> Vec<Insn> {
        let mut p = vec![Insn::Movi { rd: 1, imm: size }, call(ALLOC, 4), Insn::Mov { rd: 5, rs: 1 }];
        p.extend_from_slice(tail);
        p.push(Insn::Halt);
        p
    }

    #[test]
    fn redzone_policy_values() {
        assert_eq!(redzone_policy(1), 16);
        assert_eq!(redzone_policy(64), 16);
        assert_eq!(redzone_policy(65), 32);
        assert_eq!(redzone_policy(173), 48);
        assert_eq!(redzone_policy(1024), 256);
        assert_eq!(redzone_policy(100_000), 256);
    }

    #[test]
    fn arena_starts_poisoned() {
        let mut m = machine(&[
            Insn::Movi { rd: 2, imm: 0 },
            Insn::Movhi { rd: 2, imm: 0x10 },
            Insn::Ldb { rd: 3, base: 2, off: 0 },
            Insn::Halt,
        ]);
        assert_eq!(m.run(&[], 100).kind, StopKind::Halt { exit_code: 0 });
        let f = findings(&m);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, ReportKind::WildAccess);
        assert_eq!(f[0].addr, ARENA);
    }

    #[test]
    fn in_bounds_and_first_redzone_byte() {
        let mut m = machine(&alloc_then(40, &[Insn::Stb { src: 1, base: 5, off: 39 }]));
        m.run(&[], 100);
        assert!(findings(&m).is_empty());
        assert_eq!(m.cpu.regs[5], ARENA);

        let mut m = machine(&alloc_then(40, &[Insn::Stb { src: 1, base: 5, off: 40 }]));
        m.run(&[], 100);
        let f = findings(&m);
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].kind, f[0].addr, f[0].related_chunk), (ReportKind::OobWrite, ARENA + 40, Some(ARENA)));
        assert_eq!(f[0].pc, 12);
    }

    #[test]
    fn zero_size_clamps_to_one() {
        let mut m =
            machine(&alloc_then(0, &[Insn::Ldb { rd: 2, base: 5, off: 0 }, Insn::Ldb { rd: 2, base: 5, off: 1 }]));
        m.run(&[], 100);
        let f = findings(&m);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, ReportKind::OobRead);
        assert_eq!(f[0].addr, ARENA + 1);
    }

    #[test]
    fn use_after_free_and_double_free() {
        let mut m = machine(&alloc_then(
            8,
            &[
                Insn::Mov { rd: 1, rs: 5 },
                call(FREE, 16),
                Insn::Ldb { rd: 2, base: 5, off: 0 },
                Insn::Stw { src: 2, base: 5, off: 4 },
                Insn::Mov { rd: 1, rs: 5 },
                call(FREE, 32),
            ],
        ));
        assert_eq!(m.run(&[], 100).kind, StopKind::Halt { exit_code: 0 });
        let kinds: Vec<_> = findings(&m).iter().map(|f| (f.kind, f.pc)).collect();
        assert_eq!(
            kinds,
            vec![(ReportKind::UseAfterFreeRead, 20), (ReportKind::UseAfterFreeWrite, 24), (ReportKind::DoubleFree, 32)]
        );
    }

    #[test]
    fn invalid_free_and_null_free() {
        let mut m = machine(&[
            Insn::Movi { rd: 1, imm: 0 },
            Insn::Movhi { rd: 1, imm: 0xDEAD },
            call(FREE, 8),
            Insn::Movi { rd: 1, imm: 0 },
            call(FREE, 16),
            Insn::Halt,
        ]);
        m.run(&[], 100);
        let f = findings(&m);
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].kind, f[0].addr, f[0].pc), (ReportKind::InvalidFree, 0xDEAD_0000, 8));
    }

    #[test]
    fn underflow_hits_leading_gap() {
        // 40 + 16 redzone ends at +56, next chunk starts at +64
        let mut m = machine(&[
            Insn::Movi { rd: 1, imm: 40 },
            call(ALLOC, 4),
            Insn::Movi { rd: 1, imm: 8 },
            call(ALLOC, 12),
            Insn::Stb { src: 1, base: 1, off: -2 },
            Insn::Halt,
        ]);
        m.run(&[], 100);
        assert_eq!(m.cpu.regs[1], ARENA + 64);
        let f = findings(&m);
        assert_eq!((f[0].kind, f[0].related_chunk), (ReportKind::OobWrite, Some(ARENA + 64)));
    }

    #[test]
    fn reset_clears_ledger() {
        let mut m = machine(&alloc_then(8, &[]));
        m.run(&[], 100);
        m.data_mut().as_mut().unwrap().reset();
        m.data_mut().as_mut().unwrap().reset();
        let h = m.data().as_ref().unwrap();
        assert_eq!(h.first_poisoned(ARENA, 1), Some(ARENA));
        assert_eq!(h.classify(ARENA, false).0, ReportKind::WildAccess);
        let mut h = h.clone();
        assert_eq!(h.alloc(8), Some(ARENA));
    }

    #[test]
    fn oom_aborts_run() {
        let mut m = machine(&alloc_then(0xFFFF, &[Insn::Movi { rd: 1, imm: 0xFFFF }, call(ALLOC, 16)]));
        let s = m.run(&[], 100);
        assert_eq!(s.kind, StopKind::HookAbort(ABORT_OOM));
    }

    #[test]
    fn install_errors() {
        let mut m = machine(&[Insn::Halt]);
        assert_eq!(
            Sanitizer::install(&mut m, ArenaConfig { base: ARENA, size: 0x1_0000 }, ABI).unwrap_err(),
            SanitizerError::AlreadyInstalled
        );
        let mut m: Machine<Option<HeapState>> = Machine::new(None);
        m.map_region(0, 0x1000, Perms::RX).unwrap();
        m.map_region(ARENA, 0x1_0000, Perms::RW).unwrap();
        let bad = AllocAbi { free_addr: 0x5000, ..ABI };
        assert!(matches!(
            Sanitizer::install(&mut m, ArenaConfig { base: ARENA, size: 0x1_0000 }, bad),
            Err(SanitizerError::AbiInvalid(_))
        ));
        assert!(matches!(
            Sanitizer::install(&mut m, ArenaConfig { base: 0x40_0000, size: 0x1000 }, ABI),
            Err(SanitizerError::ArenaUnmapped { .. })
        ));
    }

    #[test]
    fn report_json_line() {
        let r = CrashReport::new(ReportKind::OobWrite, 0x120, 0x0100_0040, 1, Some(0x0100_0000), 0x1a2b);
        assert_eq!(
            r.to_json_line(),
            r#"{"kind":"OobWrite","pc":"0x00000120","addr":"0x01000040","size":1,"related_chunk":"0x01000000","dedup_key":"oobwrite-00000120-1a2b"}"#
        );
    }

    #[test]
    fn findings_are_capped() {
        let mut h = HeapState::new(ArenaConfig::default());
        for _ in 0..MAX_FINDINGS_PER_RUN {
            assert_eq!(h.push(CrashReport::new(ReportKind::WildAccess, 0, 0, 1, None, 0)), HookAction::Continue);
        }
        assert_eq!(
            h.push(CrashReport::new(ReportKind::WildAccess, 0, 0, 1, None, 0)),
            HookAction::Abort(ABORT_TOO_MANY_FINDINGS)
        );
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ledger_accounts_for_arena(sizes in proptest::collection::vec(0u32..5000, 0..60)) {
                let mut h = HeapState::new(ArenaConfig { base: 0x1000, size: 0x4_0000 });
                for s in sizes {
                    let before = h.cursor;
                    if let Some(c) = h.alloc(s) {
                        prop_assert_eq!(c % CHUNK_ALIGN, 0);
                        prop_assert!(c >= before);
                    }
                    prop_assert_eq!(h.accounted_bytes(), 0x4_0000);
                }
            }

            #[test]
            fn allocation_is_pure_function_of_requests(sizes in proptest::collection::vec(0u32..3000, 1..40)) {
                let run = |sizes: &[u32]| {
                    let mut h = HeapState::new(ArenaConfig::default());
                    sizes.iter().map(|&s| h.alloc(s)).collect::<Vec<_>>()
                };
                prop_assert_eq!(run(&sizes), run(&sizes));
            }

            #[test]
            fn every_redzone_byte_detected(size in 1u32..600) {
                let mut h = HeapState::new(ArenaConfig::default());
                let c = h.alloc(size).unwrap();
                for off in 0..size {
                    prop_assert_eq!(h.first_poisoned(c + off, 1), None);
                }
                for off in size..size + redzone_policy(size) {
                    let (k, rel) = h.classify(c + off, true);
                    prop_assert_eq!(h.first_poisoned(c + off, 1), Some(c + off));
                    prop_assert_eq!((k, rel), (ReportKind::OobWrite, Some(c)));
                }
            }
        }
    }
}
