//! Bundled synthetic firmware targets.
//!
//! Each target is MiniRISC assembly plus a harness config and seeds, built
//! on demand with the in-tree assembler:
//!
//! * `t1` ecc-list: a length-prefixed entry list copied into 0x2B-byte heap
//!   items with an unchecked entry length.
//! * `t2` quad-parser: an inter-layer message dispatcher over four
//!   structurally different decoders.
//! * `t3` alloc-abuse: a command interpreter over heap slots that can
//!   reach use-after-free, double free and invalid free.

pub mod asm;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, HarnessConfig, ImageSource};
use crate::executor::{Callbacks, Campaign, ExecError, HarnessSpec};
use asm::{assemble, AsmError, Assembled};

const COMMON: &str = include_str!("asm/common.s");

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("unknown target `{0}`")]
    Unknown(String),
    #[error("assembling {target}: {source}")]
    Asm {
        target: String,
        #[source]
        source: AsmError,
    },
    #[error("config of {target}: {source}")]
    Config {
        target: String,
        #[source]
        source: ConfigError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait Target: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Target-specific assembly; the shared runtime is prepended.
    fn source(&self) -> &'static str;
    /// Harness config in the config-file schema, referring to
    /// `<name>.bin` and `<name>.sym`.
    fn config(&self) -> String;
    fn seeds(&self) -> Vec<(String, Vec<u8>)>;
}

pub struct TargetRegistry {
    targets: Vec<Box<dyn Target>>,
}

impl TargetRegistry {
    pub fn empty() -> Self {
        TargetRegistry { targets: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = TargetRegistry::empty();
        r.register(Box::new(EccList));
        r.register(Box::new(QuadParser));
        r.register(Box::new(AllocAbuse));
        r
    }

    pub fn register(&mut self, t: Box<dyn Target>) {
        self.targets.retain(|x| x.name() != t.name());
        self.targets.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Target> {
        self.targets.iter().find(|t| t.name() == name).map(|t| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Target> {
        self.targets.iter().map(|t| t.as_ref())
    }

    pub fn build(&self, name: &str) -> Result<BuiltTarget, TargetError> {
        let t = self.get(name).ok_or_else(|| TargetError::Unknown(name.to_string()))?;
        let src = format!("{COMMON}\n{}", t.source());
        let image = assemble(&src).map_err(|source| TargetError::Asm { target: name.to_string(), source })?;
        let config_text = t.config();
        let config = HarnessConfig::parse_named(
            &format!("{name}.toml"),
            &config_text,
            ImageSource::Memory { bytes: &image.bytes, symbols: &image.symbols },
            &Default::default(),
        )
        .map_err(|source| TargetError::Config { target: name.to_string(), source })?;
        Ok(BuiltTarget { name: name.to_string(), image, config_text, config, seeds: t.seeds() })
    }
}

impl Default for TargetRegistry {
    fn default() -> Self {
        TargetRegistry::builtin()
    }
}

/// Assembles a bundled target by name.
pub fn build(name: &str) -> Result<BuiltTarget, TargetError> {
    TargetRegistry::builtin().build(name)
}

#[derive(Debug, Clone)]
pub struct BuiltTarget {
    pub name: String,
    pub image: Assembled,
    pub config_text: String,
    pub config: HarnessConfig,
    pub seeds: Vec<(String, Vec<u8>)>,
}

impl BuiltTarget {
    pub fn symbol(&self, name: &str) -> u32 {
        self.image.symbol(name).unwrap_or_else(|| panic!("{}: no symbol `{name}`", self.name))
    }

    pub fn seed(&self, name: &str) -> &[u8] {
        &self.seeds.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{}: no seed `{name}`", self.name)).1
    }

    pub fn campaign(&self) -> Result<Campaign, ExecError> {
        self.config.campaign()
    }

    pub fn campaign_with(&self, tweak: impl FnOnce(&mut HarnessSpec)) -> Result<Campaign, ExecError> {
        self.config.campaign_with(tweak, Callbacks::default())
    }

    pub fn campaign_with_callbacks(
        &self,
        tweak: impl FnOnce(&mut HarnessSpec),
        callbacks: Callbacks,
    ) -> Result<Campaign, ExecError> {
        self.config.campaign_with(tweak, callbacks)
    }

    /// Writes `<name>.bin`, `<name>.sym`, `<name>.toml` and `seeds/` into
    /// `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), TargetError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| TargetError::Io { path, source }
        };
        let seeds = dir.join("seeds");
        std::fs::create_dir_all(&seeds).map_err(io(&seeds))?;
        let files = [
            (dir.join(format!("{}.bin", self.name)), self.image.bytes.clone()),
            (dir.join(format!("{}.sym", self.name)), self.image.symbol_table().into_bytes()),
            (dir.join(format!("{}.toml", self.name)), self.config_text.clone().into_bytes()),
        ];
        for (p, bytes) in files {
            std::fs::write(&p, bytes).map_err(io(&p))?;
        }
        for (name, bytes) in &self.seeds {
            let p = seeds.join(format!("{name}.bin"));
            std::fs::write(&p, bytes).map_err(io(&p))?;
        }
        Ok(())
    }
}

const REGIONS: &str = r#"regions = [
  { name = "code",   base = 0x00000000, size = 0x10000,  perms = "rx" },
  { name = "data",   base = 0x00100000, size = 0x1000,   perms = "rw" },
  { name = "input",  base = 0x00200000, size = 0x2000,   perms = "rw" },
  { name = "stack",  base = 0x00300000, size = 0x10000,  perms = "rw" },
  { name = "nheap",  base = 0x00500000, size = 0x10000,  perms = "rw" },
  { name = "arena",  base = 0x01000000, size = 0x100000, perms = "rw" },
]"#;

const SANITIZER: &str = r#"[sanitizer]
arena_base = "ARENA_BASE"
arena_size = 0x100000
alloc_addr = "get_buffer"
free_addr = "free_buffer"
size_reg = "r1"
ptr_reg = "r1"
ret_reg = "r1""#;

fn harness_toml(name: &str, entry: &str, r1: &str, input: &str, extra: &str) -> String {
    format!(
        r#"[image]
path = "{name}.bin"
symbols = "{name}.sym"
load_addr = 0
{REGIONS}

[cpu]
entry = "{entry}"
exits = ["exit"]
max_instructions = 1000000
registers = {{ r1 = "{r1}", sp = "STACK_TOP", lr = "exit" }}

[input]
{input}
{extra}
"#
    )
}

struct EccList;

impl Target for EccList {
    fn name(&self) -> &'static str {
        "t1"
    }

    fn description(&self) -> &'static str {
        "ecc-list: length-prefixed entry list copied into heap items with an unchecked length"
    }

    fn source(&self) -> &'static str {
        include_str!("asm/t1_ecc_list.s")
    }

    fn config(&self) -> String {
        harness_toml(
            "t1",
            "t1_main",
            "INPUT_BASE",
            "mode = \"raw\"\nmax_len = 1024\nbuffer_addr = \"INPUT_BASE\"\nlen_reg = \"r2\"",
            &format!("\n{SANITIZER}\n\n[fuzz]\nmap_size = 65536\npersistent_iters = 1000\n"),
        )
    }

    fn seeds(&self) -> Vec<(String, Vec<u8>)> {
        vec![("valid".into(), T1_SEED.to_vec())]
    }
}

/// Three entries (lengths 6, 5, 5) with a matching count byte.
pub const T1_SEED: [u8; 20] = [
    0x13, 0x06, 0x01, b'1', b'1', b'2', b'3', b'4', 0x05, 0x02, b'9', b'1', b'1', b'0', 0x05, 0x04, b'1', b'9', b'9',
    b'9',
];

struct QuadParser;

pub const T2_TLV: &[u8] = b"TL\x01\x01\xC8\x02\x02\x12\x34\x03\x04\x01\x02\x03\x04\x04\x01\x03\x05\x02\x01\xFF\x06\x00";
pub const T2_REC: &[u8] =
    b"\xFE\xED\x05\x00\x05\x00\x00\x01\x02\x09\x00\x02\x00\x00\x90\x03\x0F\xF0\xFF\x01\x09\x02\x00";
/// 19 bytes, 150 significant bits.
pub const T2_BITS: &[u8] = b"\xa5\x36\x12\x34\x56\x78\x38\x4c\x40\x22\x46\x8a\xce\xe2\x61\xd9\x50\xca\xd4";
pub const T2_STR: &[u8] = b"SIB:mcc=262;mnc=01;tac=4711;cell=1234567;";

/// Decoder handler symbols, in message-id order.
pub const T2_PARSERS: [(&str, &str); 4] =
    [("tlv", "t2_handle_tlv"), ("rec", "t2_handle_rec"), ("bits", "t2_handle_bits"), ("str", "t2_handle_str")];

impl Target for QuadParser {
    fn name(&self) -> &'static str {
        "t2"
    }

    fn description(&self) -> &'static str {
        "quad-parser: message dispatcher over TLV, fixed-record, bit-packed and string decoders"
    }

    fn source(&self) -> &'static str {
        include_str!("asm/t2_quad_parser.s")
    }

    fn config(&self) -> String {
        let candidates: Vec<String> =
            T2_PARSERS.iter().map(|(n, e)| format!("  {{ name = \"{n}\", entry = \"{e}\" }},")).collect();
        harness_toml(
            "t2",
            "t2_dispatch",
            "INPUT_BASE",
            "mode = \"ilm\"\nmax_len = 4096\nmsg_id = 1\nilm_addr = \"INPUT_BASE\"\nlocal_para_addr = \"INPUT_BASE+0x20\"\n\
             len_field_addr = \"INPUT_BASE+0x40\"\npeer_buff_addr = \"INPUT_BASE+0x60\"\npayload_addr = \"INPUT_BASE+0x100\"",
            &format!("\n[deduce]\ncandidates = [\n{}\n]\n", candidates.join("\n")),
        )
    }

    fn seeds(&self) -> Vec<(String, Vec<u8>)> {
        vec![
            ("tlv".into(), T2_TLV.to_vec()),
            ("rec".into(), T2_REC.to_vec()),
            ("bits".into(), T2_BITS.to_vec()),
            ("str".into(), T2_STR.to_vec()),
        ]
    }
}

struct AllocAbuse;

impl Target for AllocAbuse {
    fn name(&self) -> &'static str {
        "t3"
    }

    fn description(&self) -> &'static str {
        "alloc-abuse: heap slot commands reaching use-after-free, double free and invalid free"
    }

    fn source(&self) -> &'static str {
        include_str!("asm/t3_alloc_abuse.s")
    }

    fn config(&self) -> String {
        harness_toml(
            "t3",
            "t3_main",
            "INPUT_BASE",
            "mode = \"raw\"\nmax_len = 256\nbuffer_addr = \"INPUT_BASE\"\nlen_reg = \"r2\"",
            &format!("\n{SANITIZER}\n"),
        )
    }

    fn seeds(&self) -> Vec<(String, Vec<u8>)> {
        let seeds: [(&str, &[u8]); 5] = [
            ("clean", b"A\x00\x10W\x00\x05\x41R\x00\x05F\x00"),
            ("uaf-read", b"A\x00\x10F\x00R\x00\x00"),
            ("uaf-write", b"A\x00\x10F\x00W\x00\x00\x41"),
            ("double-free", b"A\x00\x10F\x00F\x00"),
            ("invalid-free", b"A\x00\x20I\x00"),
        ];
        seeds.iter().map(|(n, b)| (n.to_string(), b.to_vec())).collect()
    }
}

/// Symbol map of a built target, for tests and tools.
pub fn symbols(name: &str) -> Result<BTreeMap<String, u32>, TargetError> {
    Ok(build(name)?.image.symbols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::Verdict;
    use crate::sanitizer::ReportKind;
    use crate::vmcore::StopKind;
    use std::collections::BTreeSet;

    #[test]
    fn registry_has_three_targets() {
        let r = TargetRegistry::builtin();
        assert_eq!(r.iter().map(|t| t.name()).collect::<Vec<_>>(), vec!["t1", "t2", "t3"]);
        assert!(matches!(r.build("t9"), Err(TargetError::Unknown(_))));
    }

    #[test]
    fn all_seeds_run_clean() {
        for name in ["t1", "t2"] {
            let t = build(name).unwrap();
            let mut c = t.campaign().unwrap();
            for (seed, bytes) in &t.seeds {
                let o = c.run_one(bytes);
                assert_eq!(o.verdict, Verdict::Clean, "{name}/{seed}: {:?} {:?}", o.stop, o.findings);
                assert!(o.findings.is_empty());
                assert!(matches!(o.stop.unwrap().kind, StopKind::ExitHit(_)), "{name}/{seed}");
            }
        }
        let t = build("t3").unwrap();
        let mut c = t.campaign().unwrap();
        let o = c.run_one(t.seed("clean"));
        assert_eq!(o.verdict, Verdict::Clean, "{:?}", o.findings);
    }

    #[test]
    fn t1_oversized_length_reads_then_writes_out_of_bounds() {
        let t = build("t1").unwrap();
        let mut c = t.campaign().unwrap();
        let mut input = T1_SEED.to_vec();
        input[1] = 0xFF;
        input.truncate(8);
        let o = c.run_one(&input);
        let kinds: Vec<ReportKind> = o.findings.iter().map(|f| f.kind).collect();
        let first_read = kinds.iter().position(|k| *k == ReportKind::OobRead).expect("oob read");
        let first_write = kinds.iter().position(|k| *k == ReportKind::OobWrite).expect("oob write");
        assert!(first_read < first_write);
        let store = t.symbol("t1_copy_store");
        assert!(o.findings.iter().any(|f| f.kind == ReportKind::OobWrite && f.pc == store));
        assert_eq!(o.findings[first_read].pc, t.symbol("t1_copy_load"));
    }

    #[test]
    fn t1_length_byte_sweep_reaches_the_bug() {
        let t = build("t1").unwrap();
        let mut c = t.campaign().unwrap();
        let store = t.symbol("t1_copy_store");
        let mut hits = 0;
        for b in 0..=255u8 {
            let mut input = T1_SEED.to_vec();
            input[1] = b;
            let o = c.run_one(&input);
            if o.findings.iter().any(|f| f.kind == ReportKind::OobWrite && f.pc == store) {
                hits += 1;
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn t3_directed_seeds() {
        let t = build("t3").unwrap();
        let mut c = t.campaign().unwrap();
        let cases = [
            ("uaf-read", ReportKind::UseAfterFreeRead, "t3_read_load"),
            ("uaf-write", ReportKind::UseAfterFreeWrite, "t3_write_store"),
            ("double-free", ReportKind::DoubleFree, "t3_free_call"),
            ("invalid-free", ReportKind::InvalidFree, "t3_ifree_call"),
        ];
        for (seed, kind, label) in cases {
            let o = c.run_one(t.seed(seed));
            assert_eq!(o.findings.len(), 1, "{seed}: {:?}", o.findings);
            assert_eq!(o.findings[0].kind, kind, "{seed}");
            assert_eq!(o.findings[0].pc, t.symbol(label), "{seed}");
        }
    }

    fn t2_with_msg_id(t: &BuiltTarget, msg_id: u16) -> Campaign {
        let input = t.symbol("INPUT_BASE");
        let placement = crate::executor::IlmPlacement {
            ilm_addr: input,
            msg_id,
            payload_addr: input + 0x100,
            len_field_addr: input + 0x40,
            local_para_addr: input + 0x20,
            peer_buff_addr: input + 0x60,
        };
        t.campaign_with(|s| s.placement = std::sync::Arc::new(placement)).unwrap()
    }

    #[test]
    fn t2_decoders_are_disjoint() {
        let t = build("t2").unwrap();
        let dispatch = t2_with_msg_id(&t, 0).run_one(&[]).coverage.edge_set();
        let mut sets: Vec<BTreeSet<u32>> = Vec::new();
        for (i, (name, _)) in T2_PARSERS.iter().enumerate() {
            let o = t2_with_msg_id(&t, i as u16 + 1).run_one(t.seed(name));
            assert_eq!(o.verdict, Verdict::Clean, "{name}");
            let own: BTreeSet<u32> = o.coverage.edge_set().difference(&dispatch).copied().collect();
            assert!(own.len() >= 20, "{name}: {} edges", own.len());
            sets.push(own);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let common: Vec<_> = sets[i].intersection(&sets[j]).collect();
                assert!(common.is_empty(), "{} and {} share {common:?}", T2_PARSERS[i].0, T2_PARSERS[j].0);
            }
        }
    }

    #[test]
    fn export_writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = build("t1").unwrap();
        t.export(dir.path()).unwrap();
        let cfg = HarnessConfig::load(&dir.path().join("t1.toml")).unwrap();
        assert_eq!(cfg.image, t.image.bytes);
        assert_eq!(std::fs::read(dir.path().join("seeds/valid.bin")).unwrap(), T1_SEED);
    }
}
