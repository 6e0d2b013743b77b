use std::collections::HashMap;
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::Arc;

use super::isa::{self, AluOp, Cond, Disasm, Insn, REG_LR};
use super::memory::{Memory, Perms, RegionHandle, SpanFault};
use super::snapshot::{next_id, RegionImage, Snapshot};
use super::VmError;
use crate::coverage::{loc_hash, CoverageMap};

const MAX_BLOCK_INSNS: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub z: bool,
    /// Signed less-than.
    pub n: bool,
    /// Unsigned less-than.
    pub ult: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct CpuState {
    pub regs: [u32; 16],
    pub pc: u32,
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopKind {
    ExitHit(u32),
    /// `HALT` (exit code 0) or `ECALL 1` (exit code from r1).
    Halt {
        exit_code: u32,
    },
    UnmappedRead(u32),
    UnmappedWrite(u32),
    PermViolation(u32),
    InvalidInstruction(u32),
    BudgetExceeded,
    HookAbort(u32),
}

impl StopKind {
    /// ExitHit and Halt are clean stops; everything else is an error stop.
    pub fn is_clean(&self) -> bool {
        matches!(self, StopKind::ExitHit(_) | StopKind::Halt { .. })
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            StopKind::ExitHit(_) => "exit",
            StopKind::Halt { .. } => "halt",
            StopKind::UnmappedRead(_) => "unmappedread",
            StopKind::UnmappedWrite(_) => "unmappedwrite",
            StopKind::PermViolation(_) => "permviolation",
            StopKind::InvalidInstruction(_) => "invalidinsn",
            StopKind::BudgetExceeded => "budget",
            StopKind::HookAbort(_) => "hookabort",
        }
    }
}

impl fmt::Display for StopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopKind::ExitHit(a) => write!(f, "ExitHit({a:#010x})"),
            StopKind::Halt { exit_code } => write!(f, "Halt(code={exit_code})"),
            StopKind::UnmappedRead(a) => write!(f, "UnmappedRead({a:#010x})"),
            StopKind::UnmappedWrite(a) => write!(f, "UnmappedWrite({a:#010x})"),
            StopKind::PermViolation(a) => write!(f, "PermViolation({a:#010x})"),
            StopKind::InvalidInstruction(a) => write!(f, "InvalidInstruction({a:#010x})"),
            StopKind::BudgetExceeded => write!(f, "BudgetExceeded"),
            StopKind::HookAbort(c) => write!(f, "HookAbort({c:#x})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StopReason {
    pub kind: StopKind,
    pub pc: u32,
    pub instructions: u64,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at pc={:#010x} after {} instructions", self.kind, self.pc, self.instructions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookKind {
    BlockEntry,
    MemRead,
    MemWrite,
    /// Fires before the instruction at the hooked address executes.
    Intercept,
}

/// Arguments passed to a hook callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookEvent {
    pub kind: HookKind,
    pub pc: u32,
    pub addr: u32,
    pub size: u32,
    /// Value being stored, for write hooks.
    pub value: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    /// Stop the run with `StopKind::HookAbort(code)`.
    Abort(u32),
}

pub type HookFn<D> = Box<dyn FnMut(&mut Machine<D>, &HookEvent) -> HookAction + Send>;

struct HookSlot<D> {
    id: HookId,
    kind: HookKind,
    start: u32,
    end: u64,
    cb: Option<HookFn<D>>,
}

/// One line of instruction trace or one byte of guest output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Instruction(String),
    GuestOutput(u8),
}

pub trait TraceSink {
    fn event(&mut self, ev: TraceEvent);
}

impl TraceSink for Vec<TraceEvent> {
    fn event(&mut self, ev: TraceEvent) {
        self.push(ev);
    }
}

struct Block {
    insns: Vec<Insn>,
}

#[derive(Default)]
struct PcHasher(u64);

impl Hasher for PcHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0 << 8) | u64::from(*b);
        }
    }
    fn write_u32(&mut self, v: u32) {
        self.0 = u64::from(v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

type BlockCache = HashMap<u32, Arc<Block>, BuildHasherDefault<PcHasher>>;

enum Step {
    Next,
    Jump(u32),
    Stop(StopKind),
}

/// A guest machine. `D` is host-side state carried along with the guest and
/// captured by snapshots (the sanitizer keeps its ledger there).
pub struct Machine<D = ()> {
    mem: Memory,
    pub cpu: CpuState,
    data: D,
    hooks: Vec<HookSlot<D>>,
    next_hook: u64,
    n_read_hooks: usize,
    n_write_hooks: usize,
    n_block_hooks: usize,
    intercepts: Vec<u32>,
    cache: BlockCache,
    coverage: Option<CoverageMap>,
    last_loc: u32,
    output: Vec<u8>,
    capture_output: bool,
    respect_perms: bool,
    sync_id: Option<u64>,
    exits: Vec<u32>,
    blocks_decoded: u64,
}

impl<D: Default> Default for Machine<D> {
    fn default() -> Self {
        Machine::new(D::default())
    }
}

impl<D> Machine<D> {
    pub fn new(data: D) -> Machine<D> {
        Machine {
            mem: Memory::default(),
            cpu: CpuState::default(),
            data,
            hooks: Vec::new(),
            next_hook: 1,
            n_read_hooks: 0,
            n_write_hooks: 0,
            n_block_hooks: 0,
            intercepts: Vec::new(),
            cache: BlockCache::default(),
            coverage: None,
            last_loc: 0,
            output: Vec::new(),
            capture_output: false,
            respect_perms: false,
            sync_id: None,
            exits: Vec::new(),
            blocks_decoded: 0,
        }
    }

    pub fn data(&self) -> &D {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut D {
        &mut self.data
    }

    // ---- memory -------------------------------------------------------

    pub fn map_region(&mut self, base: u32, size: u32, perms: Perms) -> Result<RegionHandle, VmError> {
        self.mem.map(base, size, perms)
    }

    pub fn unmap_region(&mut self, handle: RegionHandle) -> Result<(), VmError> {
        let removed_exec = self.mem.perms_at(handle.0).is_some_and(|p| p.contains(Perms::EXEC));
        self.mem.unmap(handle)?;
        if removed_exec {
            self.cache.clear();
        }
        Ok(())
    }

    pub fn regions(&self) -> Vec<(u32, u32, Perms)> {
        self.mem.layout()
    }

    pub fn is_mapped(&mut self, addr: u32, len: u32) -> bool {
        self.mem.is_mapped(addr, len)
    }

    pub fn perms_at(&mut self, addr: u32) -> Option<Perms> {
        self.mem.perms_at(addr)
    }

    /// When set, host writes require write permission.
    pub fn set_respect_perms(&mut self, on: bool) {
        self.respect_perms = on;
    }

    /// Host-side read; never triggers hooks.
    pub fn read_mem(&mut self, addr: u32, len: usize) -> Result<Vec<u8>, VmError> {
        let mut out = vec![0; len];
        self.mem.read(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&mut self, addr: u32, out: &mut [u8]) -> Result<(), VmError> {
        self.mem.read(addr, out)
    }

    /// Host-side write; never triggers hooks.
    pub fn write_mem(&mut self, addr: u32, bytes: &[u8]) -> Result<(), VmError> {
        self.mem.write(addr, bytes, self.respect_perms)?;
        if self.mem.touches_exec(addr, bytes.len() as u32) {
            self.cache.clear();
        }
        Ok(())
    }

    pub fn read_u32(&mut self, addr: u32) -> Result<u32, VmError> {
        let mut b = [0u8; 4];
        self.mem.read(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: u32, v: u32) -> Result<(), VmError> {
        self.write_mem(addr, &v.to_le_bytes())
    }

    pub fn write_u16(&mut self, addr: u32, v: u16) -> Result<(), VmError> {
        self.write_mem(addr, &v.to_le_bytes())
    }

    // ---- registers ----------------------------------------------------

    pub fn reg_read(&self, r: u8) -> Result<u32, VmError> {
        self.cpu.regs.get(r as usize).copied().ok_or(VmError::BadRegister(r))
    }

    pub fn reg_write(&mut self, r: u8, v: u32) -> Result<(), VmError> {
        *self.cpu.regs.get_mut(r as usize).ok_or(VmError::BadRegister(r))? = v;
        Ok(())
    }

    pub fn pc(&self) -> u32 {
        self.cpu.pc
    }

    pub fn set_pc(&mut self, pc: u32) {
        self.cpu.pc = pc;
    }

    // ---- instrumentation ----------------------------------------------

    pub fn set_coverage(&mut self, map: Option<CoverageMap>) {
        self.coverage = map;
    }

    pub fn coverage(&self) -> Option<&CoverageMap> {
        self.coverage.as_ref()
    }

    pub fn coverage_mut(&mut self) -> Option<&mut CoverageMap> {
        self.coverage.as_mut()
    }

    /// Location hash of the most recently entered block.
    pub fn last_block_loc(&self) -> u32 {
        self.last_loc
    }

    /// Collect guest `ECALL 0` output in [`Machine::guest_output`] during plain runs.
    pub fn set_capture_output(&mut self, on: bool) {
        self.capture_output = on;
    }

    pub fn guest_output(&self) -> &[u8] {
        &self.output
    }

    pub fn take_guest_output(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.output)
    }

    pub fn cached_blocks(&self) -> usize {
        self.cache.len()
    }

    /// Number of block decodes performed since creation (cache misses).
    pub fn blocks_decoded(&self) -> u64 {
        self.blocks_decoded
    }

    pub fn flush_block_cache(&mut self) {
        self.cache.clear();
    }

    // ---- hooks --------------------------------------------------------

    /// Registers a hook over `[start, end)`. Block-entry hooks ignore the
    /// range; intercept hooks use `start` as the address.
    pub fn add_hook(&mut self, kind: HookKind, start: u32, end: u64, cb: HookFn<D>) -> Result<HookId, VmError> {
        let end = match kind {
            HookKind::Intercept => u64::from(start) + 4,
            HookKind::BlockEntry => u64::from(u32::MAX) + 1,
            _ => end,
        };
        if end <= u64::from(start) || end > 1 << 32 {
            return Err(VmError::BadHookRange { start, end: end as u32 });
        }
        let id = HookId(self.next_hook);
        self.next_hook += 1;
        self.hooks.push(HookSlot { id, kind, start, end, cb: Some(cb) });
        self.reindex_hooks();
        Ok(id)
    }

    pub fn remove_hook(&mut self, id: HookId) -> Result<(), VmError> {
        let idx = self.hooks.iter().position(|h| h.id == id).ok_or(VmError::UnknownHook(id.0))?;
        self.hooks.remove(idx);
        self.reindex_hooks();
        Ok(())
    }

    fn reindex_hooks(&mut self) {
        let count = |k| self.hooks.iter().filter(|h| h.kind == k).count();
        self.n_read_hooks = count(HookKind::MemRead);
        self.n_write_hooks = count(HookKind::MemWrite);
        self.n_block_hooks = count(HookKind::BlockEntry);
        let mut ic: Vec<u32> = self.hooks.iter().filter(|h| h.kind == HookKind::Intercept).map(|h| h.start).collect();
        ic.sort_unstable();
        ic.dedup();
        self.intercepts = ic;
    }

    /// Calls every hook of `kind` whose range intersects `[addr, addr+size)`.
    fn fire(&mut self, ev: HookEvent) -> HookAction {
        let lo = u64::from(ev.addr);
        let hi = lo + u64::from(ev.size.max(1));
        let mut i = 0;
        while i < self.hooks.len() {
            let h = &mut self.hooks[i];
            if h.kind != ev.kind || !(lo < h.end && u64::from(h.start) < hi) {
                i += 1;
                continue;
            }
            let id = h.id;
            let Some(mut cb) = h.cb.take() else {
                i += 1;
                continue;
            };
            let action = cb(self, &ev);
            // the callback may have added or removed hooks
            if let Some(j) = self.hooks.iter().position(|h| h.id == id) {
                self.hooks[j].cb = Some(cb);
                i = j + 1;
            }
            if let HookAction::Abort(_) = action {
                return action;
            }
        }
        HookAction::Continue
    }

    // ---- execution ----------------------------------------------------

    /// Runs from the current pc until an exit address, halt, fault, hook
    /// abort, or `max_instructions` have executed.
    pub fn run(&mut self, exits: &[u32], max_instructions: u64) -> StopReason {
        self.set_exits(exits);
        self.run_inner::<false>(max_instructions, None)
    }

    /// Same as [`Machine::run`], additionally emitting one trace line per
    /// executed instruction and the guest's output bytes.
    pub fn trace_run(&mut self, exits: &[u32], max_instructions: u64, sink: &mut dyn TraceSink) -> StopReason {
        self.set_exits(exits);
        self.run_inner::<true>(max_instructions, Some(sink))
    }

    fn set_exits(&mut self, exits: &[u32]) {
        self.exits.clear();
        self.exits.extend_from_slice(exits);
        self.exits.sort_unstable();
        self.exits.dedup();
    }

    fn decode_block(&mut self, pc: u32) -> Result<Arc<Block>, StopKind> {
        if let Some(b) = self.cache.get(&pc) {
            return Ok(b.clone());
        }
        if !pc.is_multiple_of(4) {
            return Err(StopKind::InvalidInstruction(pc));
        }
        let idx = self.mem.find(pc).ok_or(StopKind::UnmappedRead(pc))?;
        let region = &self.mem.regions[idx];
        if !region.perms.contains(Perms::EXEC) {
            return Err(StopKind::PermViolation(pc));
        }
        let mut insns = Vec::new();
        let mut off = (pc - region.base) as usize;
        while off + 4 <= region.data.len() && insns.len() < MAX_BLOCK_INSNS {
            let w = u32::from_le_bytes(region.data[off..off + 4].try_into().unwrap());
            let insn = isa::decode(w);
            insns.push(insn);
            off += 4;
            if insn.is_control_transfer() {
                break;
            }
        }
        let block = Arc::new(Block { insns });
        self.cache.insert(pc, block.clone());
        self.blocks_decoded += 1;
        Ok(block)
    }

    fn run_inner<const TRACE: bool>(&mut self, max: u64, mut sink: Option<&mut dyn TraceSink>) -> StopReason {
        let mut executed: u64 = 0;
        macro_rules! stop {
            ($kind:expr, $pc:expr) => {
                return StopReason { kind: $kind, pc: $pc, instructions: executed }
            };
        }
        'blocks: loop {
            let start = self.cpu.pc;
            if self.exits.binary_search(&start).is_ok() {
                stop!(StopKind::ExitHit(start), start);
            }
            let block = match self.decode_block(start) {
                Ok(b) => b,
                Err(kind) => stop!(kind, start),
            };

            // block entry: coverage first, then user hooks
            self.last_loc = match self.coverage.as_mut() {
                Some(cov) => {
                    let loc = cov.loc(start);
                    cov.record_edge(loc);
                    loc
                }
                None => loc_hash(start, 0xFFFF),
            };
            if self.n_block_hooks > 0 {
                let ev = HookEvent { kind: HookKind::BlockEntry, pc: start, addr: start, size: 0, value: None };
                if let HookAction::Abort(code) = self.fire(ev) {
                    stop!(StopKind::HookAbort(code), start);
                }
            }

            let end = start.wrapping_add(4 * block.insns.len() as u32);
            let check_exits = range_has(&self.exits, start.wrapping_add(1), end);
            let check_intercepts = range_has(&self.intercepts, start, end);

            for (i, insn) in block.insns.iter().enumerate() {
                let pc = start.wrapping_add(4 * i as u32);
                if check_exits && i > 0 && self.exits.binary_search(&pc).is_ok() {
                    self.cpu.pc = pc;
                    stop!(StopKind::ExitHit(pc), pc);
                }
                if check_intercepts && self.intercepts.binary_search(&pc).is_ok() {
                    if executed >= max {
                        self.cpu.pc = pc;
                        stop!(StopKind::BudgetExceeded, pc);
                    }
                    self.cpu.pc = pc;
                    let ev = HookEvent { kind: HookKind::Intercept, pc, addr: pc, size: 4, value: None };
                    if let HookAction::Abort(code) = self.fire(ev) {
                        stop!(StopKind::HookAbort(code), pc);
                    }
                    if self.cpu.pc != pc {
                        // redirected: the hooked instruction is skipped
                        executed += 1;
                        continue 'blocks;
                    }
                }
                if executed >= max {
                    self.cpu.pc = pc;
                    stop!(StopKind::BudgetExceeded, pc);
                }
                self.cpu.pc = pc;
                let before = if TRACE { Some(self.cpu.clone()) } else { None };
                let step = self.execute(*insn, pc, &mut sink);
                if !matches!(step, Step::Stop(ref k) if !matches!(k, StopKind::Halt { .. })) {
                    executed += 1;
                }
                if TRACE {
                    if let (Some(before), Some(s)) = (before, sink.as_deref_mut()) {
                        s.event(TraceEvent::Instruction(trace_line(pc, *insn, &before, &self.cpu, &step)));
                    }
                }
                match step {
                    Step::Next => self.cpu.pc = pc.wrapping_add(4),
                    Step::Jump(target) => {
                        self.cpu.pc = target;
                        continue 'blocks;
                    }
                    Step::Stop(kind) => {
                        self.cpu.pc = pc;
                        stop!(kind, pc);
                    }
                }
            }
            // block ended without a transfer (region end or length cap)
        }
    }

    #[inline]
    fn execute(&mut self, insn: Insn, pc: u32, sink: &mut Option<&mut dyn TraceSink>) -> Step {
        let r = |m: &Self, i: u8| m.cpu.regs[i as usize];
        match insn {
            Insn::Halt => return Step::Stop(StopKind::Halt { exit_code: 0 }),
            Insn::Movi { rd, imm } => self.cpu.regs[rd as usize] = u32::from(imm),
            Insn::Movhi { rd, imm } => {
                let v = &mut self.cpu.regs[rd as usize];
                *v = (*v & 0xFFFF) | (u32::from(imm) << 16);
            }
            Insn::Mov { rd, rs } => self.cpu.regs[rd as usize] = r(self, rs),
            Insn::Alu { op, rd, rs, rt } => {
                let (a, b) = (r(self, rs), r(self, rt));
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => {
                        self.set_flags(a, b);
                        a.wrapping_sub(b)
                    }
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Xor => a ^ b,
                };
                self.cpu.regs[rd as usize] = v;
            }
            Insn::Shl { rd, rs, sh } => self.cpu.regs[rd as usize] = r(self, rs) << sh,
            Insn::Shr { rd, rs, sh } => self.cpu.regs[rd as usize] = r(self, rs) >> sh,
            Insn::Addi { rd, rs, imm } => self.cpu.regs[rd as usize] = r(self, rs).wrapping_add(imm as i32 as u32),
            Insn::Ldb { rd, base, off } => {
                let addr = r(self, base).wrapping_add(off as i32 as u32);
                match self.load(pc, addr, 1) {
                    Ok(v) => self.cpu.regs[rd as usize] = v,
                    Err(k) => return Step::Stop(k),
                }
            }
            Insn::Ldw { rd, base, off } => {
                let addr = r(self, base).wrapping_add(off as i32 as u32);
                match self.load(pc, addr, 4) {
                    Ok(v) => self.cpu.regs[rd as usize] = v,
                    Err(k) => return Step::Stop(k),
                }
            }
            Insn::Stb { src, base, off } => {
                let addr = r(self, base).wrapping_add(off as i32 as u32);
                if let Err(k) = self.store(pc, addr, 1, r(self, src) & 0xFF) {
                    return Step::Stop(k);
                }
            }
            Insn::Stw { src, base, off } => {
                let addr = r(self, base).wrapping_add(off as i32 as u32);
                if let Err(k) = self.store(pc, addr, 4, r(self, src)) {
                    return Step::Stop(k);
                }
            }
            Insn::Cmp { rs, rt } => {
                let (a, b) = (r(self, rs), r(self, rt));
                self.set_flags(a, b);
            }
            Insn::B { cond, off } => {
                let f = self.cpu.flags;
                let taken = match cond {
                    Cond::Al => true,
                    Cond::Eq => f.z,
                    Cond::Ne => !f.z,
                    Cond::Ult => f.ult,
                    Cond::Uge => !f.ult,
                    Cond::Slt => f.n,
                    Cond::Sge => !f.n,
                };
                return Step::Jump(if taken { isa::branch_target(pc, off) } else { pc.wrapping_add(4) });
            }
            Insn::Call { off } => {
                self.cpu.regs[REG_LR as usize] = pc.wrapping_add(4);
                return Step::Jump(isa::branch_target(pc, off));
            }
            Insn::Callr { rs } => {
                let target = r(self, rs);
                self.cpu.regs[REG_LR as usize] = pc.wrapping_add(4);
                return Step::Jump(target);
            }
            Insn::Ret => return Step::Jump(self.cpu.regs[REG_LR as usize]),
            Insn::Ecall { n: 0 } => {
                let byte = self.cpu.regs[1] as u8;
                match sink.as_deref_mut() {
                    Some(s) => s.event(TraceEvent::GuestOutput(byte)),
                    None if self.capture_output => self.output.push(byte),
                    None => {}
                }
            }
            Insn::Ecall { .. } => return Step::Stop(StopKind::Halt { exit_code: self.cpu.regs[1] }),
            Insn::Invalid(_) => return Step::Stop(StopKind::InvalidInstruction(pc)),
        }
        Step::Next
    }

    fn set_flags(&mut self, a: u32, b: u32) {
        self.cpu.flags = Flags { z: a == b, n: (a as i32) < (b as i32), ult: a < b };
    }

    #[inline]
    fn load(&mut self, pc: u32, addr: u32, size: u32) -> Result<u32, StopKind> {
        self.mem.check_span(addr, size, Perms::READ).map_err(|f| match f {
            SpanFault::Unmapped(a) => StopKind::UnmappedRead(a),
            SpanFault::Perm(a) => StopKind::PermViolation(a),
        })?;
        if self.n_read_hooks > 0 {
            let ev = HookEvent { kind: HookKind::MemRead, pc, addr, size, value: None };
            if let HookAction::Abort(code) = self.fire(ev) {
                return Err(StopKind::HookAbort(code));
            }
        }
        let mut b = [0u8; 4];
        self.mem.copy_out(addr, &mut b[..size as usize]);
        Ok(u32::from_le_bytes(b))
    }

    #[inline]
    fn store(&mut self, pc: u32, addr: u32, size: u32, value: u32) -> Result<(), StopKind> {
        self.mem.check_span(addr, size, Perms::WRITE).map_err(|f| match f {
            SpanFault::Unmapped(a) => StopKind::UnmappedWrite(a),
            SpanFault::Perm(a) => StopKind::PermViolation(a),
        })?;
        if self.n_write_hooks > 0 {
            let ev = HookEvent { kind: HookKind::MemWrite, pc, addr, size, value: Some(value) };
            if let HookAction::Abort(code) = self.fire(ev) {
                return Err(StopKind::HookAbort(code));
            }
        }
        self.mem.copy_in(addr, &value.to_le_bytes()[..size as usize]);
        if self.mem.touches_exec(addr, size) {
            self.cache.clear();
        }
        Ok(())
    }

    // ---- snapshots ----------------------------------------------------

    /// Captures memory, registers and attached data.
    pub fn snapshot(&mut self) -> Snapshot<D>
    where
        D: Clone,
    {
        let id = next_id();
        let regions = self
            .mem
            .regions
            .iter_mut()
            .map(|r| {
                r.clear_dirty();
                RegionImage { base: r.base, size: r.size, perms: r.perms, data: r.data.clone() }
            })
            .collect();
        self.sync_id = Some(id);
        Snapshot { id, regions, cpu: self.cpu.clone(), data: self.data.clone() }
    }

    fn check_layout(&self, snap: &Snapshot<D>) -> Result<(), VmError> {
        let same = self.mem.regions.len() == snap.regions.len()
            && self
                .mem
                .regions
                .iter()
                .zip(&snap.regions)
                .all(|(a, b)| a.base == b.base && a.size == b.size && a.perms == b.perms);
        if same {
            Ok(())
        } else {
            Err(VmError::RegionSetChanged)
        }
    }

    /// Makes memory, registers and attached data identical to `snap`.
    /// Only pages written since the last sync with `snap` are copied.
    pub fn restore(&mut self, snap: &Snapshot<D>) -> Result<(), VmError>
    where
        D: Clone,
    {
        self.check_layout(snap)?;
        let incremental = self.sync_id == Some(snap.id);
        let mut code_changed = false;
        for (r, img) in self.mem.regions.iter_mut().zip(&snap.regions) {
            if incremental {
                let pages: Vec<u32> = r.dirty_pages().collect();
                for page in pages {
                    let off = (page * super::PAGE_SIZE) as usize;
                    let end = (off + super::PAGE_SIZE as usize).min(r.data.len());
                    r.data[off..end].copy_from_slice(&img.data[off..end]);
                    code_changed |= r.perms.contains(Perms::EXEC);
                }
            } else {
                r.data.copy_from_slice(&img.data);
                code_changed |= r.perms.contains(Perms::EXEC);
            }
            r.clear_dirty();
        }
        if code_changed {
            self.cache.clear();
        }
        self.sync_id = Some(snap.id);
        self.cpu = snap.cpu.clone();
        self.data = snap.data.clone();
        Ok(())
    }

    /// Resets registers and the listed `(base, len)` ranges from `snap`,
    /// leaving all other memory and the attached data untouched.
    pub fn restore_partial(&mut self, snap: &Snapshot<D>, ranges: &[(u32, u32)]) -> Result<(), VmError> {
        self.check_layout(snap)?;
        let incremental = self.sync_id == Some(snap.id);
        for (r, img) in self.mem.regions.iter_mut().zip(&snap.regions) {
            for &(base, len) in ranges {
                let lo = u64::from(base).max(u64::from(r.base));
                let hi = (u64::from(base) + u64::from(len)).min(r.end());
                if lo >= hi {
                    continue;
                }
                let (lo, hi) = ((lo - u64::from(r.base)) as u32, (hi - u64::from(r.base)) as u32);
                if incremental {
                    let first = lo / super::PAGE_SIZE;
                    let last = (hi - 1) / super::PAGE_SIZE;
                    for page in first..=last {
                        let (w, b) = ((page / 64) as usize, page % 64);
                        if r.dirty[w] & (1 << b) == 0 {
                            continue;
                        }
                        let p_lo = (page * super::PAGE_SIZE).max(lo) as usize;
                        let p_hi = ((page + 1) * super::PAGE_SIZE).min(hi) as usize;
                        r.data[p_lo..p_hi].copy_from_slice(&img.data[p_lo..p_hi]);
                        // the page is clean only if the whole page was covered
                        if p_lo == (page * super::PAGE_SIZE) as usize
                            && p_hi == ((page + 1) * super::PAGE_SIZE) as usize
                        {
                            r.dirty[w] &= !(1 << b);
                        }
                    }
                } else {
                    r.data[lo as usize..hi as usize].copy_from_slice(&img.data[lo as usize..hi as usize]);
                }
            }
        }
        self.cpu = snap.cpu.clone();
        Ok(())
    }
}

fn range_has(sorted: &[u32], lo: u32, hi: u32) -> bool {
    if sorted.is_empty() || hi <= lo {
        return false;
    }
    let i = sorted.partition_point(|&a| a < lo);
    i < sorted.len() && sorted[i] < hi
}

fn trace_line(pc: u32, insn: Insn, before: &CpuState, after: &CpuState, step: &Step) -> String {
    let mut line = format!("{pc:08x}: {}", Disasm { pc, insn });
    let mut changes: Vec<String> = before
        .regs
        .iter()
        .zip(&after.regs)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, (_, b))| format!("r{i}={b:#x}"))
        .collect();
    if before.flags != after.flags {
        let f = after.flags;
        changes.push(format!("Z={} N={} ULT={}", f.z as u8, f.n as u8, f.ult as u8));
    }
    if let Step::Stop(kind) = step {
        if !kind.is_clean() {
            changes.push(format!("stop={kind}"));
        }
    }
    if !changes.is_empty() {
        line.push_str(" ; ");
        line.push_str(&changes.join(" "));
    }
    line
}
