//! Snapshot-isolated test-case execution.
//!
//! A [`Campaign`] freezes a fully staged machine once, then runs every test
//! case against a restored copy of that state. Persistent mode trades the
//! full restore for a reset of registers and listed memory ranges, with a
//! full restore every `persistent_iters` runs.

mod fuzz;
pub mod placement;

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use fuzz::{fuzz, Budget, FuzzObserver, FuzzOptions, FuzzStats, NoObserver, StatusFile};
pub use placement::{IlmPlacement, InputPlacement, LenSink, PlacementParams, PlacementRegistry, RawPlacement};

use crate::coverage::{ClassifiedMap, CoverageError, CoverageMap, DEFAULT_MAP_SIZE_POW2};
use crate::sanitizer::{self, CrashReport, HasHeap, HeapState, Sanitizer};
use crate::vmcore::{Machine, Snapshot, StopKind, StopReason, TraceSink, VmError};

pub const DEFAULT_MAX_INSTRUCTIONS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid harness: {0}")]
    InvalidSpec(String),
    #[error("no seeds to start from")]
    NoSeeds,
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Host-side state carried by every fuzzing machine and captured by its
/// snapshots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct HarnessData {
    pub heap: Option<HeapState>,
}

impl HasHeap for HarnessData {
    fn heap(&self) -> Option<&HeapState> {
        self.heap.as_ref()
    }
    fn heap_slot(&mut self) -> &mut Option<HeapState> {
        &mut self.heap
    }
}

pub type FuzzMachine = Machine<HarnessData>;

#[derive(Debug, Clone)]
pub struct HarnessSpec {
    pub entry: u32,
    pub exits: Vec<u32>,
    pub max_instructions: u64,
    pub input_max_len: usize,
    pub placement: Arc<dyn InputPlacement>,
    /// 0 restores the full snapshot before every run.
    pub persistent_iters: u32,
    pub always_validate: bool,
    /// `(base, len)` spans reset between persistent iterations.
    pub reset_ranges: Vec<(u32, u32)>,
    pub map_size_pow2: u32,
}

impl HarnessSpec {
    pub fn new(entry: u32, exits: Vec<u32>, placement: Arc<dyn InputPlacement>) -> HarnessSpec {
        HarnessSpec {
            entry,
            exits,
            max_instructions: DEFAULT_MAX_INSTRUCTIONS,
            input_max_len: 4096,
            placement,
            persistent_iters: 0,
            always_validate: false,
            reset_ranges: Vec::new(),
            map_size_pow2: DEFAULT_MAP_SIZE_POW2,
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.exits.is_empty() {
            return Err(ExecError::InvalidSpec("exit set is empty".into()));
        }
        if self.input_max_len == 0 {
            return Err(ExecError::InvalidSpec("input_max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Clean,
    Crash,
    Hang,
    /// The placement declined the input.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stop: Option<StopReason>,
    pub findings: Vec<CrashReport>,
    pub verdict: Verdict,
    /// New classified bits relative to the campaign's own global map.
    pub interesting: bool,
    pub exec_time: Duration,
    pub coverage: ClassifiedMap,
    pub last_loc: u32,
    /// Bytes actually placed after truncation.
    pub placed_len: usize,
}

impl RunOutcome {
    /// Dedup key of the primary problem: the first sanitizer finding, or
    /// the stop reason for faults and hangs.
    pub fn crash_key(&self) -> Option<String> {
        if let Some(f) = self.findings.first() {
            return Some(f.dedup_key.clone());
        }
        match (self.verdict, self.stop) {
            (Verdict::Crash | Verdict::Hang, Some(stop)) => {
                Some(sanitizer::dedup_key(stop.kind.short_name(), stop.pc, self.last_loc))
            }
            _ => None,
        }
    }

    pub fn is_crash(&self) -> bool {
        self.verdict == Verdict::Crash
    }
}

/// Decides whether a stop without sanitizer findings is a crash.
pub type ValidateFn = Box<dyn FnMut(&FuzzMachine, &StopReason) -> bool + Send>;

#[derive(Default)]
pub struct Callbacks {
    /// Called on error stops, and on clean stops when `always_validate`
    /// is set. Without a callback every error stop is a crash.
    pub crash_validation: Option<ValidateFn>,
}

pub struct Campaign {
    machine: FuzzMachine,
    spec: HarnessSpec,
    master: Snapshot<HarnessData>,
    master_digest: String,
    sanitizer: Option<Sanitizer>,
    callbacks: Callbacks,
    global: ClassifiedMap,
    iter_in_cycle: u32,
    full_restores: u64,
    runs: u64,
}

impl Campaign {
    /// Freezes `machine` (with pc set to the entry) as the master state.
    pub fn start(
        mut machine: FuzzMachine,
        spec: HarnessSpec,
        sanitizer: Option<Sanitizer>,
        callbacks: Callbacks,
    ) -> Result<Campaign, ExecError> {
        spec.validate()?;
        let map = CoverageMap::new(spec.map_size_pow2)?;
        let size = map.size();
        machine.set_coverage(Some(map));
        machine.set_pc(spec.entry);
        let master = machine.snapshot();
        let master_digest = master.digest();
        Ok(Campaign {
            machine,
            spec,
            master,
            master_digest,
            sanitizer,
            callbacks,
            global: ClassifiedMap::empty(size),
            iter_in_cycle: 0,
            full_restores: 0,
            runs: 0,
        })
    }

    pub fn spec(&self) -> &HarnessSpec {
        &self.spec
    }

    pub fn machine(&self) -> &FuzzMachine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut FuzzMachine {
        &mut self.machine
    }

    pub fn master(&self) -> &Snapshot<HarnessData> {
        &self.master
    }

    /// Digest of the master snapshot taken at campaign start.
    pub fn master_digest(&self) -> &str {
        &self.master_digest
    }

    pub fn global_map(&self) -> &ClassifiedMap {
        &self.global
    }

    pub fn full_restores(&self) -> u64 {
        self.full_restores
    }

    pub fn runs(&self) -> u64 {
        self.runs
    }

    pub fn map_size(&self) -> usize {
        self.global.size()
    }

    /// Restores the master state and returns a digest of a fresh capture.
    /// Equal to [`Campaign::master_digest`] when runs have not leaked into
    /// the master state.
    pub fn isolation_digest(&mut self) -> Result<String, ExecError> {
        self.full_restore()?;
        let d = self.machine.snapshot().digest();
        // the fresh capture is now the sync point; force a full copy next time
        self.full_restore()?;
        Ok(d)
    }

    fn full_restore(&mut self) -> Result<(), ExecError> {
        self.machine.restore(&self.master)?;
        self.full_restores += 1;
        Ok(())
    }

    /// Persistent-mode reset: registers and the reset ranges come back from
    /// the master snapshot and the sanitizer arena is re-poisoned. Every
    /// `persistent_iters` calls a full restore happens instead.
    pub fn next_persistent(&mut self) -> Result<(), ExecError> {
        if self.spec.persistent_iters == 0 || self.iter_in_cycle == 0 {
            self.full_restore()?;
        } else {
            self.machine.restore_partial(&self.master, &self.spec.reset_ranges)?;
            if let Some(s) = &self.sanitizer {
                s.reset(&mut self.machine);
            }
        }
        if self.spec.persistent_iters > 0 {
            self.iter_in_cycle = (self.iter_in_cycle + 1) % self.spec.persistent_iters;
        }
        Ok(())
    }

    pub fn run_one(&mut self, input: &[u8]) -> RunOutcome {
        self.run_inner(input, None)
    }

    /// [`Campaign::run_one`] with a per-instruction trace and guest output
    /// sent to `sink`.
    pub fn trace_one(&mut self, input: &[u8], sink: &mut dyn TraceSink) -> RunOutcome {
        self.run_inner(input, Some(sink))
    }

    fn run_inner(&mut self, input: &[u8], sink: Option<&mut dyn TraceSink>) -> RunOutcome {
        let input = &input[..input.len().min(self.spec.input_max_len)];
        self.runs += 1;
        if let Err(e) = self.next_persistent() {
            panic!("master snapshot no longer matches the machine: {e}");
        }
        if let Some(cov) = self.machine.coverage_mut() {
            cov.reset();
        }
        if !self.spec.placement.place(&mut self.machine, input) {
            return RunOutcome {
                stop: None,
                findings: Vec::new(),
                verdict: Verdict::Skipped,
                interesting: false,
                exec_time: Duration::ZERO,
                coverage: ClassifiedMap::empty(self.global.size()),
                last_loc: 0,
                placed_len: input.len(),
            };
        }
        self.machine.set_pc(self.spec.entry);

        let started = Instant::now();
        let stop = match sink {
            Some(sink) => self.machine.trace_run(&self.spec.exits, self.spec.max_instructions, sink),
            None => self.machine.run(&self.spec.exits, self.spec.max_instructions),
        };
        let exec_time = started.elapsed();

        let findings = match &self.sanitizer {
            Some(s) => s.take_findings(&mut self.machine),
            None => Vec::new(),
        };
        let verdict = self.classify(&stop, &findings);
        let coverage = self.machine.coverage().map(CoverageMap::classify).expect("coverage attached");
        let interesting = self.global.merge(&coverage).expect("same map size");
        RunOutcome {
            stop: Some(stop),
            findings,
            verdict,
            interesting,
            exec_time,
            coverage,
            last_loc: self.machine.last_block_loc(),
            placed_len: input.len(),
        }
    }

    fn classify(&mut self, stop: &StopReason, findings: &[CrashReport]) -> Verdict {
        if !findings.is_empty() {
            return Verdict::Crash;
        }
        let machine = &self.machine;
        let mut validate = |default: bool| match self.callbacks.crash_validation.as_mut() {
            Some(cb) => cb(machine, stop),
            None => default,
        };
        match stop.kind {
            StopKind::ExitHit(_) | StopKind::Halt { .. } => {
                if self.spec.always_validate && validate(false) {
                    Verdict::Crash
                } else {
                    Verdict::Clean
                }
            }
            StopKind::BudgetExceeded | StopKind::HookAbort(sanitizer::ABORT_OOM) => Verdict::Hang,
            _ => {
                if validate(true) {
                    Verdict::Crash
                } else {
                    Verdict::Clean
                }
            }
        }
    }
}
