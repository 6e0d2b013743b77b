//! Deterministic 32-bit guest CPU with a Unicorn-style hook API.
//!
//! The backend is an interpreter over decoded blocks. A block ends at the
//! first control transfer; decoded blocks are cached per start address and
//! the cache survives across runs and snapshot restores.

pub mod isa;
mod machine;
mod memory;
mod snapshot;

pub use machine::{
    CpuState, Flags, HookAction, HookEvent, HookFn, HookId, HookKind, Machine, StopKind, StopReason, TraceEvent,
    TraceSink,
};
pub use memory::{Perms, RegionHandle, PAGE_SIZE};
pub use snapshot::Snapshot;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("region {base:#x}+{size:#x} is not page aligned")]
    Misaligned { base: u32, size: u32 },
    #[error("region {base:#x}+{size:#x} overlaps an existing mapping")]
    Overlap { base: u32, size: u32 },
    #[error("address {addr:#x} is not mapped")]
    Unmapped { addr: u32 },
    #[error("address {addr:#x} is not writable")]
    PermissionDenied { addr: u32 },
    #[error("unknown hook id {0}")]
    UnknownHook(u64),
    #[error("hook range {start:#x}..{end:#x} is invalid")]
    BadHookRange { start: u32, end: u32 },
    #[error("region set changed since the snapshot was taken")]
    RegionSetChanged,
    #[error("register index {0} out of range")]
    BadRegister(u8),
}
