use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::machine::CpuState;
use super::memory::Perms;

static NEXT_SNAPSHOT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_id() -> u64 {
    NEXT_SNAPSHOT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub(crate) struct RegionImage {
    pub base: u32,
    pub size: u32,
    pub perms: Perms,
    pub data: Vec<u8>,
}

/// Full capture of guest memory, registers and the machine's attached data
/// (poison shadow and heap ledger live there). Hooks are not captured.
#[derive(Debug, Clone)]
pub struct Snapshot<D> {
    pub(crate) id: u64,
    pub(crate) regions: Vec<RegionImage>,
    pub(crate) cpu: CpuState,
    pub(crate) data: D,
}

impl<D> Snapshot<D> {
    pub fn cpu(&self) -> &CpuState {
        &self.cpu
    }

    pub fn data(&self) -> &D {
        &self.data
    }

    pub fn layout(&self) -> Vec<(u32, u32, Perms)> {
        self.regions.iter().map(|r| (r.base, r.size, r.perms)).collect()
    }

    /// Byte contents of the captured region based at `base`.
    pub fn region_bytes(&self, base: u32) -> Option<&[u8]> {
        self.regions.iter().find(|r| r.base == base).map(|r| r.data.as_slice())
    }
}

impl<D: Hash> Snapshot<D> {
    /// SHA-256 over memory, registers and attached data, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.regions {
            h.update(r.base.to_le_bytes());
            h.update(r.size.to_le_bytes());
            h.update([r.perms.bits()]);
            h.update(&r.data);
        }
        for reg in self.cpu.regs {
            h.update(reg.to_le_bytes());
        }
        h.update(self.cpu.pc.to_le_bytes());
        h.update([self.cpu.flags.z as u8, self.cpu.flags.n as u8, self.cpu.flags.ult as u8]);
        let mut dh = std::collections::hash_map::DefaultHasher::new();
        self.data.hash(&mut dh);
        h.update(dh.finish().to_le_bytes());
        hex::encode(h.finalize())
    }
}
