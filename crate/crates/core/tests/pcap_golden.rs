use std::path::PathBuf;
use std::process::Command;

use rehostfuzz::pcapout::{self, GsmtapMeta, GSMTAP_TYPE_LTE_RRC};
use rehostfuzz::targets::T2_BITS;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_3.pcap")
}

fn golden_inputs() -> Vec<Vec<u8>> {
    vec![T2_BITS.to_vec(), Vec::new(), (0u8..40).collect()]
}

fn golden_meta() -> GsmtapMeta {
    GsmtapMeta { kind: GSMTAP_TYPE_LTE_RRC, sub_type: 6, arfcn: 0x0a8c, frame_number: 0x0102_0304 }
}

#[test]
fn matches_golden_bytes() {
    let want = std::fs::read(golden_path()).unwrap();
    let got = pcapout::to_bytes(&golden_inputs(), &golden_meta()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn golden_reads_back() {
    let recs = pcapout::read_back(&std::fs::read(golden_path()).unwrap()).unwrap();
    let payloads: Vec<Vec<u8>> = recs.iter().map(|(_, p)| p.clone()).collect();
    assert_eq!(payloads, golden_inputs());
    assert!(recs.iter().all(|(m, _)| *m == golden_meta()));
}

#[test]
fn every_record_checksum_validates() {
    let f = std::fs::read(golden_path()).unwrap();
    let mut at = 24;
    while at < f.len() {
        let incl = u32::from_le_bytes(f[at + 8..at + 12].try_into().unwrap()) as usize;
        let ip = &f[at + 16 + 14..at + 16 + 34];
        assert_eq!(pcapout::ipv4_checksum(ip), 0);
        at += 16 + incl;
    }
    assert_eq!(at, f.len());
}

#[test]
fn dissector_decodes_golden_when_available() {
    let Ok(out) =
        Command::new("tshark").args(["-r"]).arg(golden_path()).args(["-T", "fields", "-e", "gsmtap.type"]).output()
    else {
        eprintln!("tshark not installed; skipping");
        return;
    };
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 3, "{text}");
}
