use bitflags::bitflags;

use super::VmError;

pub const PAGE_SIZE: u32 = 0x1000;
const PAGE_SHIFT: u32 = 12;

bitflags! {
    /// Access permissions of a mapped region.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Perms: u8 {
        const READ = 0b001;
        const WRITE = 0b010;
        const EXEC = 0b100;
        const RW = Self::READ.bits() | Self::WRITE.bits();
        const RX = Self::READ.bits() | Self::EXEC.bits();
        const RWX = Self::READ.bits() | Self::WRITE.bits() | Self::EXEC.bits();
    }
}

impl Perms {
    /// Parses `"rwx"`-style strings; `-` placeholders are ignored.
    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::empty();
        for ch in s.chars() {
            match ch.to_ascii_lowercase() {
                'r' => p |= Perms::READ,
                'w' => p |= Perms::WRITE,
                'x' => p |= Perms::EXEC,
                '-' => {}
                _ => return None,
            }
        }
        Some(p)
    }
}

impl std::fmt::Display for Perms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let flag = |p: Perms, c: char| if self.contains(p) { c } else { '-' };
        write!(f, "{}{}{}", flag(Perms::READ, 'r'), flag(Perms::WRITE, 'w'), flag(Perms::EXEC, 'x'))
    }
}

/// Opaque handle naming a mapped region by its base address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionHandle(pub u32);

#[derive(Debug, Clone)]
pub(crate) struct Region {
    pub base: u32,
    pub size: u32,
    pub perms: Perms,
    pub data: Vec<u8>,
    /// One bit per page written since the last snapshot sync.
    pub dirty: Vec<u64>,
}

impl Region {
    fn new(base: u32, size: u32, perms: Perms) -> Region {
        let pages = (size >> PAGE_SHIFT) as usize;
        Region { base, size, perms, data: vec![0; size as usize], dirty: vec![0; pages.div_ceil(64)] }
    }

    #[inline]
    pub fn end(&self) -> u64 {
        u64::from(self.base) + u64::from(self.size)
    }

    #[inline]
    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && u64::from(addr) < self.end()
    }

    #[inline]
    pub fn mark_dirty(&mut self, off: u32, len: u32) {
        if len == 0 {
            return;
        }
        let first = off >> PAGE_SHIFT;
        let last = (off + len - 1) >> PAGE_SHIFT;
        for page in first..=last {
            self.dirty[(page / 64) as usize] |= 1 << (page % 64);
        }
    }

    pub fn dirty_pages(&self) -> impl Iterator<Item = u32> + '_ {
        self.dirty
            .iter()
            .enumerate()
            .flat_map(|(w, &bits)| (0..64).filter(move |b| bits & (1 << b) != 0).map(move |b| (w * 64 + b) as u32))
    }

    pub fn clear_dirty(&mut self) {
        self.dirty.iter_mut().for_each(|w| *w = 0);
    }
}

/// Guest physical memory: a sorted set of non-overlapping regions.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    pub(crate) regions: Vec<Region>,
    last: usize,
}

impl Memory {
    pub fn map(&mut self, base: u32, size: u32, perms: Perms) -> Result<RegionHandle, VmError> {
        if !base.is_multiple_of(PAGE_SIZE) || !size.is_multiple_of(PAGE_SIZE) || size == 0 {
            return Err(VmError::Misaligned { base, size });
        }
        let end = u64::from(base) + u64::from(size);
        if end > 1 << 32 {
            return Err(VmError::Misaligned { base, size });
        }
        if self.regions.iter().any(|r| u64::from(base) < r.end() && u64::from(r.base) < end) {
            return Err(VmError::Overlap { base, size });
        }
        let at = self.regions.partition_point(|r| r.base < base);
        self.regions.insert(at, Region::new(base, size, perms));
        self.last = 0;
        Ok(RegionHandle(base))
    }

    pub fn unmap(&mut self, handle: RegionHandle) -> Result<(), VmError> {
        let idx = self.regions.iter().position(|r| r.base == handle.0).ok_or(VmError::Unmapped { addr: handle.0 })?;
        self.regions.remove(idx);
        self.last = 0;
        Ok(())
    }

    /// Index of the region containing `addr`.
    #[inline]
    pub(crate) fn find(&mut self, addr: u32) -> Option<usize> {
        if let Some(r) = self.regions.get(self.last) {
            if r.contains(addr) {
                return Some(self.last);
            }
        }
        let idx = self.regions.partition_point(|r| r.base <= addr).checked_sub(1)?;
        if self.regions[idx].contains(addr) {
            self.last = idx;
            Some(idx)
        } else {
            None
        }
    }

    pub fn perms_at(&mut self, addr: u32) -> Option<Perms> {
        self.find(addr).map(|i| self.regions[i].perms)
    }

    pub fn is_mapped(&mut self, addr: u32, len: u32) -> bool {
        self.check_span(addr, len, Perms::empty()).is_ok()
    }

    /// Checks that `[addr, addr+len)` is mapped and carries `need`.
    /// Returns the first offending address on failure.
    pub(crate) fn check_span(&mut self, addr: u32, len: u32, need: Perms) -> Result<(), SpanFault> {
        let mut cur = u64::from(addr);
        let end = u64::from(addr) + u64::from(len);
        while cur < end {
            if cur > u64::from(u32::MAX) {
                return Err(SpanFault::Unmapped(0));
            }
            let a = cur as u32;
            let idx = self.find(a).ok_or(SpanFault::Unmapped(a))?;
            let r = &self.regions[idx];
            if !r.perms.contains(need) {
                return Err(SpanFault::Perm(a));
            }
            cur = r.end();
        }
        Ok(())
    }

    /// Host read, perms ignored.
    pub fn read(&mut self, addr: u32, out: &mut [u8]) -> Result<(), VmError> {
        self.check_span(addr, out.len() as u32, Perms::empty()).map_err(|f| VmError::Unmapped { addr: f.addr() })?;
        self.copy_out(addr, out);
        Ok(())
    }

    /// Host write, perms ignored unless `respect_perms`.
    pub fn write(&mut self, addr: u32, bytes: &[u8], respect_perms: bool) -> Result<(), VmError> {
        let need = if respect_perms { Perms::WRITE } else { Perms::empty() };
        self.check_span(addr, bytes.len() as u32, need).map_err(|f| match f {
            SpanFault::Unmapped(a) => VmError::Unmapped { addr: a },
            SpanFault::Perm(a) => VmError::PermissionDenied { addr: a },
        })?;
        self.copy_in(addr, bytes);
        Ok(())
    }

    /// Copies out of a span already known to be mapped.
    pub(crate) fn copy_out(&mut self, addr: u32, out: &mut [u8]) {
        let mut done = 0usize;
        while done < out.len() {
            let a = addr.wrapping_add(done as u32);
            let idx = self.find(a).expect("span checked");
            let r = &self.regions[idx];
            let off = (a - r.base) as usize;
            let n = (r.size as usize - off).min(out.len() - done);
            out[done..done + n].copy_from_slice(&r.data[off..off + n]);
            done += n;
        }
    }

    pub(crate) fn copy_in(&mut self, addr: u32, bytes: &[u8]) {
        let mut done = 0usize;
        while done < bytes.len() {
            let a = addr.wrapping_add(done as u32);
            let idx = self.find(a).expect("span checked");
            let r = &mut self.regions[idx];
            let off = (a - r.base) as usize;
            let n = (r.size as usize - off).min(bytes.len() - done);
            r.data[off..off + n].copy_from_slice(&bytes[done..done + n]);
            r.mark_dirty(off as u32, n as u32);
            done += n;
        }
    }

    /// True if any executable region intersects `[addr, addr+len)`.
    pub(crate) fn touches_exec(&self, addr: u32, len: u32) -> bool {
        let end = u64::from(addr) + u64::from(len);
        self.regions
            .iter()
            .any(|r| r.perms.contains(Perms::EXEC) && u64::from(addr) < r.end() && u64::from(r.base) < end)
    }

    /// `(base, size, perms)` of every region, ascending.
    pub fn layout(&self) -> Vec<(u32, u32, Perms)> {
        self.regions.iter().map(|r| (r.base, r.size, r.perms)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SpanFault {
    Unmapped(u32),
    Perm(u32),
}

impl SpanFault {
    pub fn addr(self) -> u32 {
        match self {
            SpanFault::Unmapped(a) | SpanFault::Perm(a) => a,
        }
    }
}
