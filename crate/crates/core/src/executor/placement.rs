//! Input placement strategies: how a test case reaches guest memory.
//!
//! Each strategy implements [`InputPlacement`] and is registered by name in
//! a [`PlacementRegistry`]; harness configs select one with `mode = "..."`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::FuzzMachine;

/// Writes one (already truncated) input into the guest. Returning `false`
/// skips the input without running it.
pub trait InputPlacement: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Guest spans this placement writes for inputs up to `max_len` bytes:
    /// `(what, addr, len)`.
    fn footprint(&self, max_len: usize) -> Vec<(&'static str, u32, u32)>;

    fn place(&self, m: &mut FuzzMachine, input: &[u8]) -> bool;
}

/// Key lookup used by placement factories; implemented by the config layer.
pub trait PlacementParams {
    /// Address-valued key (integer or symbol name).
    fn addr(&self, key: &str) -> Result<Option<u32>, String>;
    /// Register-valued key (`"r2"`, `"sp"`, ...).
    fn reg(&self, key: &str) -> Result<Option<u8>, String>;
    fn int(&self, key: &str) -> Result<Option<u64>, String>;
}

pub type PlacementFactory = fn(&dyn PlacementParams) -> Result<Arc<dyn InputPlacement>, String>;

fn required<T>(v: Option<T>, key: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("missing key `{key}`"))
}

/// Where the raw placement stores the input length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LenSink {
    Register(u8),
    /// Little-endian 32-bit word.
    Addr(u32),
}

/// Copies the input verbatim to `buffer_addr`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPlacement {
    pub buffer_addr: u32,
    pub len: LenSink,
}

impl RawPlacement {
    pub fn from_params(p: &dyn PlacementParams) -> Result<Arc<dyn InputPlacement>, String> {
        let buffer_addr = required(p.addr("buffer_addr")?, "buffer_addr")?;
        let len = match (p.reg("len_reg")?, p.addr("len_addr")?) {
            (Some(r), None) => LenSink::Register(r),
            (None, Some(a)) => LenSink::Addr(a),
            (Some(_), Some(_)) => return Err("give only one of `len_reg` and `len_addr`".into()),
            (None, None) => return Err("raw placement needs `len_reg` or `len_addr`".into()),
        };
        Ok(Arc::new(RawPlacement { buffer_addr, len }))
    }
}

impl InputPlacement for RawPlacement {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn footprint(&self, max_len: usize) -> Vec<(&'static str, u32, u32)> {
        let mut f = vec![("buffer_addr", self.buffer_addr, max_len.max(1) as u32)];
        if let LenSink::Addr(a) = self.len {
            f.push(("len_addr", a, 4));
        }
        f
    }

    fn place(&self, m: &mut FuzzMachine, input: &[u8]) -> bool {
        if m.write_mem(self.buffer_addr, input).is_err() {
            return false;
        }
        let len = input.len() as u32;
        match self.len {
            LenSink::Register(r) => m.reg_write(r, len).is_ok(),
            LenSink::Addr(a) => m.write_u32(a, len).is_ok(),
        }
    }
}

/// Builds the inter-layer message chain around the payload:
///
/// ```text
/// ilm        +0 msg_id u16   +4 local_para ptr  +8 peer_buff ptr
/// local_para +0 ref_count u8 +2 len u16 (8)     +4 queue_buf ptr
/// queue_buf  +0 msg_len u16  +4 payload ptr
/// ```
///
/// `len_field_addr` is the address of the queue buffer, whose first field
/// is the 16-bit message length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IlmPlacement {
    pub ilm_addr: u32,
    pub msg_id: u16,
    pub payload_addr: u32,
    pub len_field_addr: u32,
    pub local_para_addr: u32,
    pub peer_buff_addr: u32,
}

pub const LOCAL_PARA_LEN: u16 = 8;

impl IlmPlacement {
    pub fn from_params(p: &dyn PlacementParams) -> Result<Arc<dyn InputPlacement>, String> {
        let msg_id = required(p.int("msg_id")?, "msg_id")?;
        let msg_id = u16::try_from(msg_id).map_err(|_| format!("msg_id {msg_id} does not fit in 16 bits"))?;
        Ok(Arc::new(IlmPlacement {
            ilm_addr: required(p.addr("ilm_addr")?, "ilm_addr")?,
            msg_id,
            payload_addr: required(p.addr("payload_addr")?, "payload_addr")?,
            len_field_addr: required(p.addr("len_field_addr")?, "len_field_addr")?,
            local_para_addr: required(p.addr("local_para_addr")?, "local_para_addr")?,
            peer_buff_addr: required(p.addr("peer_buff_addr")?, "peer_buff_addr")?,
        }))
    }

    fn write_chain(&self, m: &mut FuzzMachine, input: &[u8]) -> Result<(), crate::vmcore::VmError> {
        let mut ilm = [0u8; 12];
        ilm[0..2].copy_from_slice(&self.msg_id.to_le_bytes());
        ilm[4..8].copy_from_slice(&self.local_para_addr.to_le_bytes());
        ilm[8..12].copy_from_slice(&self.peer_buff_addr.to_le_bytes());
        m.write_mem(self.ilm_addr, &ilm)?;

        let mut lp = [0u8; 8];
        lp[0] = 1;
        lp[2..4].copy_from_slice(&LOCAL_PARA_LEN.to_le_bytes());
        lp[4..8].copy_from_slice(&self.len_field_addr.to_le_bytes());
        m.write_mem(self.local_para_addr, &lp)?;

        let mut qb = [0u8; 8];
        qb[0..2].copy_from_slice(&(input.len() as u16).to_le_bytes());
        qb[4..8].copy_from_slice(&self.payload_addr.to_le_bytes());
        m.write_mem(self.len_field_addr, &qb)?;

        m.write_mem(self.payload_addr, input)
    }
}

impl InputPlacement for IlmPlacement {
    fn name(&self) -> &'static str {
        "ilm"
    }

    fn footprint(&self, max_len: usize) -> Vec<(&'static str, u32, u32)> {
        vec![
            ("ilm_addr", self.ilm_addr, 12),
            ("local_para_addr", self.local_para_addr, 8),
            ("len_field_addr", self.len_field_addr, 8),
            ("payload_addr", self.payload_addr, max_len.max(1) as u32),
        ]
    }

    fn place(&self, m: &mut FuzzMachine, input: &[u8]) -> bool {
        input.len() <= usize::from(u16::MAX) && self.write_chain(m, input).is_ok()
    }
}

/// Name-indexed set of placement factories.
#[derive(Clone)]
pub struct PlacementRegistry {
    factories: BTreeMap<&'static str, PlacementFactory>,
}

impl PlacementRegistry {
    pub fn empty() -> Self {
        PlacementRegistry { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = PlacementRegistry::empty();
        r.register("raw", RawPlacement::from_params);
        r.register("ilm", IlmPlacement::from_params);
        r
    }

    pub fn register(&mut self, name: &'static str, factory: PlacementFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, params: &dyn PlacementParams) -> Result<Arc<dyn InputPlacement>, String> {
        let factory = self.factories.get(name).ok_or_else(|| {
            let known: Vec<_> = self.names().collect();
            format!("unknown input mode `{name}` (known: {})", known.join(", "))
        })?;
        factory(params)
    }
}

impl Default for PlacementRegistry {
    fn default() -> Self {
        PlacementRegistry::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::HarnessData;
    use crate::vmcore::{Machine, Perms};
    use std::collections::HashMap;

    struct Params(HashMap<&'static str, u64>);

    impl PlacementParams for Params {
        fn addr(&self, key: &str) -> Result<Option<u32>, String> {
            Ok(self.0.get(key).map(|v| *v as u32))
        }
        fn reg(&self, key: &str) -> Result<Option<u8>, String> {
            Ok(self.0.get(key).map(|v| *v as u8))
        }
        fn int(&self, key: &str) -> Result<Option<u64>, String> {
            Ok(self.0.get(key).copied())
        }
    }

    fn machine() -> FuzzMachine {
        let mut m = Machine::new(HarnessData::default());
        m.map_region(0x20_0000, 0x2000, Perms::RW).unwrap();
        m
    }

    #[test]
    fn raw_register_and_addr() {
        let mut m = machine();
        let p = RawPlacement { buffer_addr: 0x20_0100, len: LenSink::Register(2) };
        assert!(p.place(&mut m, b"abc"));
        assert_eq!(m.read_mem(0x20_0100, 3).unwrap(), b"abc");
        assert_eq!(m.cpu.regs[2], 3);
        let p = RawPlacement { buffer_addr: 0x20_0100, len: LenSink::Addr(0x20_0000) };
        assert!(p.place(&mut m, b""));
        assert_eq!(m.read_u32(0x20_0000).unwrap(), 0);
        let p = RawPlacement { buffer_addr: 0x40_0000, len: LenSink::Register(2) };
        assert!(!p.place(&mut m, b"x"));
    }

    #[test]
    fn ilm_chain_layout() {
        let mut m = machine();
        let p = IlmPlacement {
            ilm_addr: 0x20_0000,
            msg_id: 0x0203,
            payload_addr: 0x20_0100,
            len_field_addr: 0x20_0040,
            local_para_addr: 0x20_0020,
            peer_buff_addr: 0x20_0060,
        };
        assert!(p.place(&mut m, &[9; 19]));
        let r = |m: &mut FuzzMachine, a, n| m.read_mem(a, n).unwrap();
        assert_eq!(r(&mut m, 0x20_0000, 12), vec![3, 2, 0, 0, 0x20, 0, 0x20, 0, 0x60, 0, 0x20, 0]);
        assert_eq!(r(&mut m, 0x20_0020, 8), vec![1, 0, 8, 0, 0x40, 0, 0x20, 0]);
        assert_eq!(r(&mut m, 0x20_0040, 8), vec![19, 0, 0, 0, 0, 1, 0x20, 0]);
        assert_eq!(r(&mut m, 0x20_0100, 19), vec![9; 19]);
    }

    #[test]
    fn registry_lookup() {
        let reg = PlacementRegistry::builtin();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["ilm", "raw"]);
        let params = Params(HashMap::from([("buffer_addr", 0x20_0000), ("len_reg", 2)]));
        assert_eq!(reg.create("raw", &params).unwrap().name(), "raw");
        assert!(reg.create("serial", &params).unwrap_err().contains("unknown input mode"));
        let params = Params(HashMap::from([("buffer_addr", 0x20_0000)]));
        assert!(reg.create("raw", &params).is_err());
    }
}
