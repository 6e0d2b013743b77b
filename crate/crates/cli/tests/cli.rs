use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rehostfuzz"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn export(target: &str, dir: &Path) {
    let o = run(&["--target", target, "asm", "--out", target], dir);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn t3_fuzz_finds_crashes_and_exits_2() {
    let d = tempdir().unwrap();
    export("t3", d.path());
    let o = run(
        &[
            "--config",
            "t3/t3.toml",
            "fuzz",
            "--seeds",
            "t3/seeds",
            "--budget-secs",
            "30",
            "--budget-execs",
            "20000",
            "--out",
            "out",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let crashes: Vec<_> = fs::read_dir(d.path().join("out/crashes")).unwrap().collect();
    assert!(!crashes.is_empty());
    let status = fs::read_to_string(d.path().join("out/status")).unwrap();
    for key in ["execs=", "execs_per_sec=", "paths=", "crashes=", "hangs="] {
        assert!(status.lines().any(|l| l.starts_with(key)), "{status}");
    }
    assert!(d.path().join("out/global.map").exists());
    assert!(d.path().join("out/index.jsonl").exists());
}

#[test]
fn empty_seed_dir_is_an_error() {
    let d = tempdir().unwrap();
    fs::create_dir(d.path().join("empty")).unwrap();
    let o = run(&["--target", "t1", "fuzz", "--seeds", "empty", "--budget-execs", "10"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("no seeds"), "{}", text(&o));
}

#[test]
fn workers_share_one_corpus_dir() {
    let d = tempdir().unwrap();
    let o = run(&["--target", "t1", "--workers", "3", "fuzz", "--budget-execs", "4000", "--out", "out"], d.path());
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l == "execs=12000"), "{stdout}");
    let ids: Vec<String> = fs::read_dir(d.path().join("out/queue"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(ids.iter().all(|n| n.starts_with("id-") && n.ends_with(".bin")), "{ids:?}");
}

#[test]
fn run_trace_ends_at_the_faulting_store() {
    let d = tempdir().unwrap();
    export("t1", d.path());
    // one entry whose declared length overruns the 0x2B-byte item
    let mut input = vec![0x13, 0xff, 0x01];
    input.extend(std::iter::repeat_n(b'A', 0xff));
    fs::write(d.path().join("crash.bin"), &input).unwrap();
    let o = run(&["--config", "t1/t1.toml", "run", "--trace", "crash.bin"], d.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("finding: OobWrite"), "{out}");
    let sym = fs::read_to_string(d.path().join("t1/t1.sym")).unwrap();
    let store = sym.lines().find(|l| l.ends_with(" t1_copy_store")).unwrap().split(' ').next().unwrap();
    assert!(out.lines().any(|l| l.starts_with(&format!("{store}:"))), "no trace line at {store}");
}

#[test]
fn clean_input_exits_0_and_missing_input_exits_1() {
    let d = tempdir().unwrap();
    export("t1", d.path());
    let o = run(&["--config", "t1/t1.toml", "run", "t1/seeds/valid.bin"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("verdict: Clean"));
    let o = run(&["--config", "t1/t1.toml", "run", "nope.bin"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_name_the_line() {
    let d = tempdir().unwrap();
    export("t1", d.path());
    let cfg = fs::read_to_string(d.path().join("t1/t1.toml")).unwrap();
    let bad = cfg.replace("entry = \"t1_main\"", "entry = 0x7000000");
    let line = bad.lines().position(|l| l.contains("0x7000000")).unwrap() + 1;
    fs::write(d.path().join("t1/bad.toml"), bad).unwrap();
    let o = run(&["--config", "t1/bad.toml", "run", "t1/seeds/valid.bin"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains(&format!("line {line}")), "{}", text(&o));
}

#[test]
fn cmin_and_tmin_write_outputs() {
    let d = tempdir().unwrap();
    export("t1", d.path());
    let corpus = d.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    let seed = fs::read(d.path().join("t1/seeds/valid.bin")).unwrap();
    for i in 0..5u8 {
        let mut s = seed.clone();
        s.push(i);
        fs::write(corpus.join(format!("{i}.bin")), s).unwrap();
    }
    let o = run(&["--config", "t1/t1.toml", "cmin", "corpus", "--out", "min"], d.path());
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_dir(d.path().join("min")).unwrap().count(), 1);

    let o = run(&["--config", "t1/t1.toml", "tmin", "corpus/3.bin", "--out", "small.bin"], d.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(fs::read(d.path().join("small.bin")).unwrap().len() <= seed.len());
}

#[test]
fn deduce_prints_table_and_writes_json() {
    let d = tempdir().unwrap();
    export("t2", d.path());
    let o = run(&["--config", "t2/t2.toml", "deduce", "t2/seeds", "--out", "rep"], d.path());
    assert!(o.status.success(), "{}", text(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.matches('*').count(), 4, "{table}");
    let json = fs::read_to_string(d.path().join("rep/deduction.json")).unwrap();
    assert!(json.contains("\"argmax\""));
}

#[test]
fn pcap_requires_a_channel_and_rejects_oversize() {
    let d = tempdir().unwrap();
    fs::write(d.path().join("big.bin"), vec![0u8; 9001]).unwrap();
    let o = run(&["pcap", "big.bin", "--out", "x.pcap"], d.path());
    assert_eq!(o.status.code(), Some(1), "missing --channel is a usage error: {}", text(&o));
    let o = run(&["pcap", "big.bin", "--channel", "pcch", "--out", "x.pcap"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("9001"), "{}", text(&o));
}

#[test]
fn asm_assembles_a_file() {
    let d = tempdir().unwrap();
    fs::write(d.path().join("p.s"), "start: MOVI r1, 3\n HALT\n").unwrap();
    let o = run(&["asm", "p.s"], d.path());
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(d.path().join("p.bin")).unwrap().len(), 8);
    assert!(fs::read_to_string(d.path().join("p.sym")).unwrap().contains("start"));
    fs::write(d.path().join("bad.s"), "FOO r1\n").unwrap();
    assert_eq!(run(&["asm", "bad.s"], d.path()).status.code(), Some(1));
}

#[test]
fn no_config_or_target_is_an_error() {
    let d = tempdir().unwrap();
    let o = run(&["run", "x.bin"], d.path());
    assert_eq!(o.status.code(), Some(1));
}
