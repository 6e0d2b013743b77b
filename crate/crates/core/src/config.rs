//! Harness configuration files.
//!
//! ```toml
//! [image]
//! path = "t1.bin"          # relative to the config file
//! symbols = "t1.sym"       # optional `<hex addr> <name>` table
//! load_addr = 0x0
//! regions = [
//!   { name = "code",  base = 0x0,      size = 0x10000, perms = "rx" },
//!   { name = "stack", base = 0x300000, size = 0x10000, perms = "rw" },
//! ]
//!
//! [cpu]
//! entry = "t1_main"
//! exits = ["exit"]
//! max_instructions = 1000000
//! registers = { sp = "STACK_TOP", lr = "exit" }
//!
//! [input]
//! mode = "raw"             # any name in the placement registry
//! max_len = 4096
//! buffer_addr = "INPUT_BASE"
//! len_reg = "r2"
//!
//! [sanitizer]
//! arena_base = 0x1000000
//! arena_size = 0x100000
//! alloc_addr = "get_buffer"
//! free_addr = "free_buffer"
//! size_reg = "r1"
//! ptr_reg = "r1"
//! ret_reg = "r1"
//!
//! [fuzz]
//! map_size = 65536
//! persistent_iters = 0
//! seed = 1
//! reset_ranges = [[0x100000, 0x1000]]
//!
//! [deduce]
//! candidates = [{ name = "tlv", entry = "t2_handle_tlv" }]
//! ```
//!
//! Addresses are integers or strings of the form `sym`, `sym+off`,
//! `sym-off` or a number. Every error carries the line it refers to.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::executor::{
    Callbacks, Campaign, ExecError, FuzzMachine, HarnessData, HarnessSpec, InputPlacement, PlacementParams,
    PlacementRegistry, DEFAULT_MAX_INSTRUCTIONS,
};
use crate::sanitizer::{AllocAbi, ArenaConfig, Sanitizer, SanitizerError};
use crate::targets::asm::parse_symbol_table;
use crate::vmcore::isa::{REG_LR, REG_SP};
use crate::vmcore::{Machine, Perms, VmError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: line {line}: {msg}")]
    Invalid { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("building machine: {0}")]
    Vm(#[from] VmError),
    #[error("installing sanitizer: {0}")]
    Sanitizer(#[from] SanitizerError),
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    image: Spanned<RawImage>,
    cpu: Spanned<RawCpu>,
    input: Spanned<BTreeMap<String, Spanned<toml::Value>>>,
    sanitizer: Option<Spanned<RawSanitizer>>,
    #[serde(default)]
    fuzz: RawFuzz,
    deduce: Option<RawDeduce>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    path: Option<Spanned<String>>,
    symbols: Option<Spanned<String>>,
    load_addr: Option<Spanned<toml::Value>>,
    regions: Vec<Spanned<RawRegion>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    name: String,
    base: Spanned<toml::Value>,
    size: Spanned<toml::Value>,
    perms: Spanned<String>,
    file_off: Option<Spanned<toml::Value>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCpu {
    entry: Spanned<toml::Value>,
    exits: Spanned<Vec<Spanned<toml::Value>>>,
    max_instructions: Option<Spanned<i64>>,
    #[serde(default)]
    registers: BTreeMap<String, Spanned<toml::Value>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSanitizer {
    enabled: Option<bool>,
    arena_base: Spanned<toml::Value>,
    arena_size: Spanned<toml::Value>,
    alloc_addr: Spanned<toml::Value>,
    free_addr: Spanned<toml::Value>,
    size_reg: Spanned<String>,
    ptr_reg: Spanned<String>,
    ret_reg: Spanned<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFuzz {
    map_size: Option<Spanned<i64>>,
    persistent_iters: Option<Spanned<i64>>,
    seed: Option<Spanned<i64>>,
    always_validate: Option<bool>,
    reset_ranges: Option<Vec<Spanned<(toml::Value, toml::Value)>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDeduce {
    candidates: Vec<Spanned<RawCandidate>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCandidate {
    name: String,
    entry: Spanned<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionDef {
    pub name: String,
    pub base: u32,
    pub size: u32,
    pub perms: Perms,
    pub file_off: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanitizerDef {
    pub arena: ArenaConfig,
    pub abi: AllocAbi,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub name: String,
    pub entry: u32,
}

/// Where image bytes and symbols come from.
#[derive(Debug, Clone, Copy)]
pub enum ImageSource<'a> {
    /// Resolve `[image] path` and `symbols` against this directory.
    Dir(&'a Path),
    /// Use these bytes and symbols; `[image] path` is ignored.
    Memory { bytes: &'a [u8], symbols: &'a BTreeMap<String, u32> },
}

/// A validated harness configuration with every address resolved.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub image: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
    pub load_addr: u32,
    pub regions: Vec<RegionDef>,
    pub entry: u32,
    pub exits: Vec<u32>,
    pub registers: Vec<(u8, u32)>,
    pub max_instructions: u64,
    pub input_mode: String,
    pub input_max_len: usize,
    pub placement: Arc<dyn InputPlacement>,
    pub sanitizer: Option<SanitizerDef>,
    pub map_size_pow2: u32,
    pub persistent_iters: u32,
    pub seed: Option<u64>,
    pub always_validate: bool,
    /// `None` means every writable region.
    pub reset_ranges: Option<Vec<(u32, u32)>>,
    pub candidates: Vec<Candidate>,
}

struct Ctx<'a> {
    path: &'a str,
    text: &'a str,
    symbols: &'a BTreeMap<String, u32>,
}

impl Ctx<'_> {
    fn err(&self, span: Range<usize>, msg: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { path: self.path.to_string(), line: line_of(self.text, span.start), msg: msg.into() }
    }

    fn addr(&self, v: &Spanned<toml::Value>, what: &str) -> Result<u32, ConfigError> {
        resolve_value(v.get_ref(), self.symbols).map_err(|e| self.err(v.span(), format!("{what}: {e}")))
    }

    fn reg(&self, v: &Spanned<String>, what: &str) -> Result<u8, ConfigError> {
        parse_reg(v.get_ref()).ok_or_else(|| self.err(v.span(), format!("{what}: `{}` is not a register", v.get_ref())))
    }

    fn int(&self, v: &Spanned<i64>, what: &str, max: u64) -> Result<u64, ConfigError> {
        let n = *v.get_ref();
        if n < 0 || n as u64 > max {
            return Err(self.err(v.span(), format!("{what}: {n} out of range 0..={max}")));
        }
        Ok(n as u64)
    }
}

/// 1-based line containing byte `offset`.
pub fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

pub fn parse_reg(s: &str) -> Option<u8> {
    let s = s.trim().to_ascii_lowercase();
    match s.as_str() {
        "sp" => Some(REG_SP),
        "lr" => Some(REG_LR),
        _ => s.strip_prefix('r')?.parse::<u8>().ok().filter(|r| *r < 16),
    }
}

fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()
    } else {
        s.replace('_', "").parse().ok()
    }
}

/// Resolves `sym`, `sym+off`, `sym-off` or a plain number.
pub fn resolve_expr(s: &str, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    let s = s.trim();
    let (head, off) = match s.find(['+', '-']) {
        Some(i) if i > 0 => {
            let off = parse_number(&s[i + 1..]).ok_or_else(|| format!("bad offset in `{s}`"))? as i64;
            (s[..i].trim(), if &s[i..i + 1] == "-" { -off } else { off })
        }
        _ => (s, 0),
    };
    let base = match parse_number(head) {
        Some(n) => n as i64,
        None => i64::from(*symbols.get(head).ok_or_else(|| format!("unknown symbol `{head}`"))?),
    };
    u32::try_from(base + off).map_err(|_| format!("`{s}` is outside the 32-bit address space"))
}

fn resolve_value(v: &toml::Value, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    match v {
        toml::Value::Integer(i) => u32::try_from(*i).map_err(|_| format!("{i} is outside the 32-bit address space")),
        toml::Value::String(s) => resolve_expr(s, symbols),
        other => Err(format!("expected an address, found {}", other.type_str())),
    }
}

struct InputParams<'a> {
    ctx: &'a Ctx<'a>,
    table: &'a BTreeMap<String, Spanned<toml::Value>>,
}

impl PlacementParams for InputParams<'_> {
    fn addr(&self, key: &str) -> Result<Option<u32>, String> {
        self.table
            .get(key)
            .map(|v| resolve_value(v.get_ref(), self.ctx.symbols).map_err(|e| format!("{key}: {e}")))
            .transpose()
    }

    fn reg(&self, key: &str) -> Result<Option<u8>, String> {
        self.table
            .get(key)
            .map(|v| match v.get_ref() {
                toml::Value::String(s) => parse_reg(s).ok_or_else(|| format!("{key}: `{s}` is not a register")),
                other => Err(format!("{key}: expected a register name, found {}", other.type_str())),
            })
            .transpose()
    }

    fn int(&self, key: &str) -> Result<Option<u64>, String> {
        self.table
            .get(key)
            .map(|v| match v.get_ref() {
                toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                other => Err(format!("{key}: expected a non-negative integer, found {other}")),
            })
            .transpose()
    }
}

const INPUT_COMMON_KEYS: [&str; 2] = ["mode", "max_len"];

impl HarnessConfig {
    /// Loads a config file; image and symbol paths are relative to it.
    pub fn load(path: &Path) -> Result<HarnessConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        HarnessConfig::parse_named(
            &path.display().to_string(),
            &text,
            ImageSource::Dir(&dir),
            &PlacementRegistry::builtin(),
        )
    }

    pub fn parse(text: &str, source: ImageSource<'_>) -> Result<HarnessConfig, ConfigError> {
        HarnessConfig::parse_named("<config>", text, source, &PlacementRegistry::builtin())
    }

    pub fn parse_named(
        path: &str,
        text: &str,
        source: ImageSource<'_>,
        placements: &PlacementRegistry,
    ) -> Result<HarnessConfig, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid {
            path: path.to_string(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            msg: e.message().to_string(),
        })?;

        let (image, symbols) = match source {
            ImageSource::Memory { bytes, symbols } => (bytes.to_vec(), symbols.clone()),
            ImageSource::Dir(dir) => {
                let bad = |span: Range<usize>, msg: String| ConfigError::Invalid {
                    path: path.to_string(),
                    line: line_of(text, span.start),
                    msg,
                };
                let img = raw.image.get_ref();
                let p = img.path.as_ref().ok_or_else(|| bad(raw.image.span(), "[image] needs `path`".into()))?;
                let bytes = std::fs::read(dir.join(p.get_ref()))
                    .map_err(|e| bad(p.span(), format!("image `{}`: {e}", p.get_ref())))?;
                let symbols = match &img.symbols {
                    None => BTreeMap::new(),
                    Some(s) => {
                        let t = std::fs::read_to_string(dir.join(s.get_ref()))
                            .map_err(|e| bad(s.span(), format!("symbols `{}`: {e}", s.get_ref())))?;
                        parse_symbol_table(&t).map_err(|e| bad(s.span(), format!("symbols `{}`: {e}", s.get_ref())))?
                    }
                };
                (bytes, symbols)
            }
        };
        let ctx = Ctx { path, text, symbols: &symbols };

        // image and regions
        let img = raw.image.get_ref();
        let load_addr = match &img.load_addr {
            Some(v) => ctx.addr(v, "load_addr")?,
            None => 0,
        };
        let mut regions: Vec<RegionDef> = Vec::new();
        let mut region_spans = Vec::new();
        for r in &img.regions {
            let span = r.span();
            let r = r.get_ref();
            let base = ctx.addr(&r.base, "region base")?;
            let size = ctx.addr(&r.size, "region size")?;
            let perms = Perms::parse(r.perms.get_ref())
                .ok_or_else(|| ctx.err(r.perms.span(), format!("bad perms `{}`", r.perms.get_ref())))?;
            let file_off = r.file_off.as_ref().map(|v| ctx.addr(v, "file_off")).transpose()?;
            if size == 0 || u64::from(base) + u64::from(size) > 1 << 32 {
                return Err(ctx.err(span, format!("region `{}` has an invalid extent", r.name)));
            }
            if let Some(off) = file_off {
                if off as usize > image.len() {
                    return Err(ctx.err(span, format!("region `{}`: file_off {off:#x} is past the image end", r.name)));
                }
            }
            if let Some(o) = regions.iter().find(|o| spans_overlap((o.base, o.size), (base, size))) {
                return Err(ctx.err(span, format!("region `{}` overlaps region `{}`", r.name, o.name)));
            }
            regions.push(RegionDef { name: r.name.clone(), base, size, perms, file_off });
            region_spans.push(span);
        }
        if regions.is_empty() {
            return Err(ctx.err(raw.image.span(), "at least one region is required"));
        }
        let inside = |addr: u32, len: u32| -> bool {
            // spans may cross adjacent regions
            let mut a = u64::from(addr);
            let end = a + u64::from(len.max(1));
            while a < end {
                match regions.iter().find(|r| u64::from(r.base) <= a && a < u64::from(r.base) + u64::from(r.size)) {
                    Some(r) => a = u64::from(r.base) + u64::from(r.size),
                    None => return false,
                }
            }
            true
        };
        let check = |span: Range<usize>, what: &str, addr: u32, len: u32| -> Result<(), ConfigError> {
            if inside(addr, len) {
                Ok(())
            } else {
                Err(ctx.err(
                    span,
                    format!(
                        "{what} {addr:#x}..{:#x} is outside the declared regions",
                        u64::from(addr) + u64::from(len.max(1))
                    ),
                ))
            }
        };
        if !image.is_empty() {
            let span = img.load_addr.as_ref().map(|v| v.span()).unwrap_or(raw.image.span());
            check(span, "image", load_addr, image.len() as u32)?;
        }

        // cpu
        let cpu = raw.cpu.get_ref();
        let entry = ctx.addr(&cpu.entry, "entry")?;
        check(cpu.entry.span(), "entry", entry, 4)?;
        let mut exits = Vec::new();
        for e in cpu.exits.get_ref() {
            let a = ctx.addr(e, "exit")?;
            check(e.span(), "exit", a, 4)?;
            exits.push(a);
        }
        if exits.is_empty() {
            return Err(ctx.err(cpu.exits.span(), "exits must not be empty"));
        }
        let max_instructions = match &cpu.max_instructions {
            Some(v) => ctx.int(v, "max_instructions", u64::MAX >> 1)?,
            None => DEFAULT_MAX_INSTRUCTIONS,
        };
        if max_instructions == 0 {
            return Err(ctx.err(cpu.max_instructions.as_ref().unwrap().span(), "max_instructions must be positive"));
        }
        let mut registers = Vec::new();
        for (name, v) in &cpu.registers {
            let r = parse_reg(name).ok_or_else(|| ctx.err(v.span(), format!("`{name}` is not a register")))?;
            registers.push((r, ctx.addr(v, name)?));
        }

        // input
        let input = raw.input.get_ref();
        let mode = match input.get("mode").map(|v| (v.get_ref(), v.span())) {
            Some((toml::Value::String(s), _)) => s.clone(),
            Some((_, span)) => return Err(ctx.err(span, "mode must be a string")),
            None => return Err(ctx.err(raw.input.span(), "[input] needs `mode`")),
        };
        let input_max_len = match input.get("max_len") {
            Some(v) => match v.get_ref() {
                toml::Value::Integer(n) if *n >= 1 && *n <= 1 << 24 => *n as usize,
                _ => return Err(ctx.err(v.span(), "max_len must be an integer in 1..=16777216")),
            },
            None => 4096,
        };
        let params = InputParams { ctx: &ctx, table: input };
        let placement = placements.create(&mode, &params).map_err(|e| {
            // point at the offending key when the message names one
            let span = input
                .iter()
                .filter(|(k, _)| !INPUT_COMMON_KEYS.contains(&k.as_str()))
                .find(|(k, _)| e.starts_with(&format!("{k}:")))
                .map(|(_, v)| v.span())
                .unwrap_or(raw.input.span());
            ctx.err(span, e)
        })?;
        for (key, addr, len) in placement.footprint(input_max_len) {
            let span = input.get(key).map(|v| v.span()).unwrap_or(raw.input.span());
            check(span, key, addr, len)?;
        }

        // sanitizer
        let sanitizer = match &raw.sanitizer {
            Some(s) if s.get_ref().enabled.unwrap_or(true) => {
                let s = s.get_ref();
                let arena = ArenaConfig {
                    base: ctx.addr(&s.arena_base, "arena_base")?,
                    size: ctx.addr(&s.arena_size, "arena_size")?,
                };
                check(s.arena_base.span(), "arena", arena.base, arena.size)?;
                let abi = AllocAbi {
                    alloc_addr: ctx.addr(&s.alloc_addr, "alloc_addr")?,
                    free_addr: ctx.addr(&s.free_addr, "free_addr")?,
                    size_reg: ctx.reg(&s.size_reg, "size_reg")?,
                    ptr_reg: ctx.reg(&s.ptr_reg, "ptr_reg")?,
                    ret_reg: ctx.reg(&s.ret_reg, "ret_reg")?,
                };
                check(s.alloc_addr.span(), "alloc_addr", abi.alloc_addr, 4)?;
                check(s.free_addr.span(), "free_addr", abi.free_addr, 4)?;
                Some(SanitizerDef { arena, abi })
            }
            _ => None,
        };

        // fuzz
        let f = &raw.fuzz;
        let map_size_pow2 = match &f.map_size {
            Some(v) => {
                let n = ctx.int(v, "map_size", 1 << 24)?;
                if !n.is_power_of_two() || n < 2 {
                    return Err(ctx.err(v.span(), format!("map_size {n} is not a power of two")));
                }
                n.trailing_zeros()
            }
            None => crate::coverage::DEFAULT_MAP_SIZE_POW2,
        };
        let persistent_iters = match &f.persistent_iters {
            Some(v) => ctx.int(v, "persistent_iters", u64::from(u32::MAX))? as u32,
            None => 0,
        };
        let seed = f.seed.as_ref().map(|v| *v.get_ref() as u64);
        let reset_ranges = match &f.reset_ranges {
            None => None,
            Some(list) => {
                let mut out = Vec::new();
                for item in list {
                    let (b, l) = item.get_ref();
                    let base =
                        resolve_value(b, &symbols).map_err(|e| ctx.err(item.span(), format!("reset range: {e}")))?;
                    let len =
                        resolve_value(l, &symbols).map_err(|e| ctx.err(item.span(), format!("reset range: {e}")))?;
                    check(item.span(), "reset range", base, len)?;
                    out.push((base, len));
                }
                Some(out)
            }
        };

        let mut candidates = Vec::new();
        if let Some(d) = &raw.deduce {
            for c in &d.candidates {
                let entry = ctx.addr(&c.get_ref().entry, "candidate entry")?;
                check(c.span(), "candidate entry", entry, 4)?;
                candidates.push(Candidate { name: c.get_ref().name.clone(), entry });
            }
        }

        Ok(HarnessConfig {
            image,
            symbols,
            load_addr,
            regions,
            entry,
            exits,
            registers,
            max_instructions,
            input_mode: mode,
            input_max_len,
            placement,
            sanitizer,
            map_size_pow2,
            persistent_iters,
            seed,
            always_validate: f.always_validate.unwrap_or(false),
            reset_ranges,
            candidates,
        })
    }

    /// Maps regions, loads the image, sets registers and installs the
    /// sanitizer.
    pub fn machine(&self) -> Result<(FuzzMachine, Option<Sanitizer>), ConfigError> {
        let mut m = Machine::new(HarnessData::default());
        for r in &self.regions {
            m.map_region(r.base, r.size, r.perms)?;
        }
        if !self.image.is_empty() {
            m.write_mem(self.load_addr, &self.image)?;
        }
        for r in &self.regions {
            if let Some(off) = r.file_off {
                let off = off as usize;
                let end = (off + r.size as usize).min(self.image.len());
                m.write_mem(r.base, &self.image[off..end])?;
            }
        }
        for &(r, v) in &self.registers {
            m.reg_write(r, v)?;
        }
        m.set_pc(self.entry);
        let sanitizer = match &self.sanitizer {
            Some(s) => Some(Sanitizer::install(&mut m, s.arena, s.abi)?),
            None => None,
        };
        Ok((m, sanitizer))
    }

    pub fn spec(&self) -> HarnessSpec {
        let reset_ranges = match &self.reset_ranges {
            Some(r) => r.clone(),
            None => self.regions.iter().filter(|r| r.perms.contains(Perms::WRITE)).map(|r| (r.base, r.size)).collect(),
        };
        HarnessSpec {
            entry: self.entry,
            exits: self.exits.clone(),
            max_instructions: self.max_instructions,
            input_max_len: self.input_max_len,
            placement: self.placement.clone(),
            persistent_iters: self.persistent_iters,
            always_validate: self.always_validate,
            reset_ranges,
            map_size_pow2: self.map_size_pow2,
        }
    }

    pub fn campaign(&self) -> Result<Campaign, ExecError> {
        self.campaign_with(|_| {}, Callbacks::default())
    }

    /// Builds a campaign after letting `tweak` adjust the harness spec.
    pub fn campaign_with(
        &self,
        tweak: impl FnOnce(&mut HarnessSpec),
        callbacks: Callbacks,
    ) -> Result<Campaign, ExecError> {
        let (m, san) = self.machine().map_err(|e| ExecError::InvalidSpec(e.to_string()))?;
        let mut spec = self.spec();
        tweak(&mut spec);
        Campaign::start(m, spec, san, callbacks)
    }
}

fn spans_overlap(a: (u32, u32), b: (u32, u32)) -> bool {
    let (a0, a1) = (u64::from(a.0), u64::from(a.0) + u64::from(a.1));
    let (b0, b1) = (u64::from(b.0), u64::from(b.0) + u64::from(b.1));
    a0 < b1 && b0 < a1
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[image]
load_addr = 0
regions = [
  { name = "code", base = 0x0, size = 0x1000, perms = "rx" },
  { name = "data", base = 0x10000, size = 0x1000, perms = "rw" },
]

[cpu]
entry = "start"
exits = ["done"]
registers = { sp = 0x11000 }

[input]
mode = "raw"
max_len = 64
buffer_addr = "data+0x100"
len_reg = "r2"
"#;

    fn syms() -> BTreeMap<String, u32> {
        BTreeMap::from([("start".into(), 0), ("done".into(), 4), ("data".into(), 0x10000)])
    }

    fn parse(text: &str) -> Result<HarnessConfig, ConfigError> {
        let s = syms();
        HarnessConfig::parse(text, ImageSource::Memory { bytes: &[1, 1, 5, 0, 0, 0, 0, 0, 0, 0, 0, 0], symbols: &s })
    }

    #[test]
    fn resolves_symbols_and_defaults() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.entry, 0);
        assert_eq!(c.exits, vec![4]);
        assert_eq!(c.registers, vec![(REG_SP, 0x11000)]);
        assert_eq!(c.max_instructions, DEFAULT_MAX_INSTRUCTIONS);
        assert_eq!(c.input_max_len, 64);
        assert_eq!(c.map_size_pow2, 16);
        assert_eq!(c.spec().reset_ranges, vec![(0x10000, 0x1000)]);
        let mut camp = c.campaign().unwrap();
        let o = camp.run_one(b"hi");
        assert!(matches!(o.stop.unwrap().kind, crate::vmcore::StopKind::ExitHit(4)));
    }

    #[test]
    fn expressions() {
        let s = syms();
        assert_eq!(resolve_expr("data+0x10", &s), Ok(0x10010));
        assert_eq!(resolve_expr("data - 16", &s), Ok(0xFFF0));
        assert_eq!(resolve_expr("0x20", &s), Ok(0x20));
        assert!(resolve_expr("nosuch", &s).is_err());
        assert!(resolve_expr("start-1", &s).is_err());
        assert_eq!(parse_reg("SP"), Some(13));
        assert_eq!(parse_reg("r15"), Some(15));
        assert_eq!(parse_reg("r16"), None);
    }

    #[test]
    fn address_outside_regions_reports_line() {
        let text = BASE.replace("exits = [\"done\"]", "exits = [0x5000]");
        let e = parse(&text).unwrap_err();
        assert_eq!(e.line(), Some(11), "{e}");
        assert!(e.to_string().contains("outside the declared regions"));

        let text = BASE.replace("buffer_addr = \"data+0x100\"", "buffer_addr = \"data+0xFF0\"");
        let e = parse(&text).unwrap_err();
        assert_eq!(e.line(), Some(17), "{e}");
    }

    #[test]
    fn syntax_and_schema_errors_report_line() {
        let e = parse(&BASE.replace("max_len = 64", "max_len = = 64")).unwrap_err();
        assert_eq!(e.line(), Some(16), "{e}");
        let e = parse(&BASE.replace("[input]", "[input]\nbogus_section = 1\n[extra]")).unwrap_err();
        assert!(e.line().is_some(), "{e}");
        let e = parse(&BASE.replace("mode = \"raw\"", "mode = \"serial\"")).unwrap_err();
        assert!(e.to_string().contains("unknown input mode"), "{e}");
        let e = parse(&BASE.replace("len_reg = \"r2\"", "len_reg = \"r99\"")).unwrap_err();
        assert_eq!(e.line(), Some(18), "{e}");
        let e = parse(&BASE.replace("perms = \"rw\"", "perms = \"q\"")).unwrap_err();
        assert_eq!(e.line(), Some(6), "{e}");
    }

    #[test]
    fn overlapping_regions_rejected() {
        let text = BASE.replace("base = 0x10000", "base = 0x800");
        let e = parse(&text).unwrap_err();
        assert!(e.to_string().contains("overlaps"), "{e}");
    }

    #[test]
    fn sanitizer_and_fuzz_sections() {
        let text = format!(
            "{BASE}\n[sanitizer]\narena_base = 0x10000\narena_size = 0x800\nalloc_addr = 0\nfree_addr = 4\nsize_reg = \"r1\"\nptr_reg = \"r1\"\nret_reg = \"r0\"\n\n[fuzz]\nmap_size = 4096\npersistent_iters = 50\nseed = 9\nreset_ranges = [[\"data\", 0x100]]\n"
        );
        let c = parse(&text).unwrap();
        let s = c.sanitizer.as_ref().unwrap();
        assert_eq!(s.arena, ArenaConfig { base: 0x10000, size: 0x800 });
        assert_eq!(s.abi.ret_reg, 0);
        assert_eq!(c.map_size_pow2, 12);
        assert_eq!(c.persistent_iters, 50);
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.reset_ranges, Some(vec![(0x10000, 0x100)]));
        let e = parse(&text.replace("map_size = 4096", "map_size = 1000")).unwrap_err();
        assert!(e.to_string().contains("power of two"));
        let e = parse(&text.replace("arena_size = 0x800", "arena_size = 0x8000")).unwrap_err();
        assert!(e.to_string().contains("arena"), "{e}");
    }

    #[test]
    fn loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img.bin"), [1, 1, 5, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        std::fs::write(dir.path().join("img.sym"), "00000000 start\n00000004 done\n00010000 data\n").unwrap();
        let text = BASE.replace("load_addr = 0", "path = \"img.bin\"\nsymbols = \"img.sym\"\nload_addr = 0");
        let p = dir.path().join("h.toml");
        std::fs::write(&p, text).unwrap();
        let c = HarnessConfig::load(&p).unwrap();
        assert_eq!(c.image.len(), 12);
        assert_eq!(c.exits, vec![4]);

        std::fs::remove_file(dir.path().join("img.bin")).unwrap();
        let e = HarnessConfig::load(&p).unwrap_err();
        assert_eq!(e.line(), Some(3), "{e}");
    }
}
