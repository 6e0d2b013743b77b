use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rehostfuzz::config::HarnessConfig;
use rehostfuzz::corpus::{self, CorpusStore, TminMode};
use rehostfuzz::deduce::{self, NoiseParams, ParserCandidate};
use rehostfuzz::executor::{
    self, Budget, Campaign, FuzzObserver, FuzzOptions, FuzzStats, RunOutcome, StatusFile, Verdict,
};
use rehostfuzz::mutator::Mutator;
use rehostfuzz::pcapout::{self, GsmtapMeta, GSMTAP_TYPE_LTE_RRC};
use rehostfuzz::targets::{self, asm};
use rehostfuzz::vmcore::{TraceEvent, TraceSink};

const EXIT_CRASHES: u8 = 2;
const SYNC_EVERY: u64 = 5000;

#[derive(Parser)]
#[command(name = "rehostfuzz", version, about = "Snapshot fuzzer for rehosted firmware fragments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    /// Harness config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use a bundled target (t1, t2, t3) instead of a config file.
    #[arg(long, global = true, conflicts_with = "config")]
    target: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    budget_secs: Option<u64>,
    #[arg(long, global = true)]
    budget_execs: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign; exits 2 when crashes were found.
    Fuzz {
        /// Seed corpus directory (defaults to the bundled target's seeds).
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
    /// Execute one input and report how it stopped.
    Run {
        input: PathBuf,
        /// Print every executed instruction and the guest's output.
        #[arg(long)]
        trace: bool,
    },
    /// Reduce a corpus directory to inputs that keep its coverage.
    Cmin { input_dir: PathBuf },
    /// Shrink one input while keeping its coverage map or crash.
    Tmin {
        input: PathBuf,
        /// Preserve the crash key instead of the coverage map.
        #[arg(long)]
        crash: bool,
    },
    /// Rank the config's parser candidates for each message.
    Deduce {
        /// Message files (defaults to the bundled target's seeds).
        messages: Vec<PathBuf>,
        #[arg(long, default_value_t = 30)]
        noise_n: usize,
        #[arg(long, default_value_t = 32)]
        noise_min: usize,
        #[arg(long, default_value_t = 42)]
        noise_max: usize,
    },
    /// Wrap inputs in GSMTAP and write a pcap capture.
    Pcap {
        /// Input files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// LTE RRC channel name (e.g. pcch, bcch-dl-sch) or numeric sub-type.
        #[arg(long)]
        channel: String,
        #[arg(long, default_value_t = GSMTAP_TYPE_LTE_RRC)]
        gsmtap_type: u8,
        #[arg(long, default_value_t = 0)]
        arfcn: u16,
        #[arg(long = "frame-number", default_value_t = 0)]
        frame_number: u32,
    },
    /// Assemble a source file, or export a bundled target with --target.
    Asm { source: Option<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage errors exit 1; 2 means crashes were found
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let g = cli.global;
    match cli.cmd {
        Cmd::Fuzz { seeds } => cmd_fuzz(&g, seeds.as_deref()),
        Cmd::Run { input, trace } => cmd_run(&g, &input, trace),
        Cmd::Cmin { input_dir } => cmd_cmin(&g, &input_dir),
        Cmd::Tmin { input, crash } => cmd_tmin(&g, &input, crash),
        Cmd::Deduce { messages, noise_n, noise_min, noise_max } => {
            if noise_n == 0 || noise_min > noise_max {
                bail!("noise needs n >= 1 and min <= max");
            }
            cmd_deduce(&g, &messages, NoiseParams { n: noise_n, len: noise_min..=noise_max, seed: g.seed.unwrap_or(0) })
        }
        Cmd::Pcap { inputs, channel, gsmtap_type, arfcn, frame_number } => {
            let sub_type = pcapout::channel_code(&channel).ok_or_else(|| anyhow!("unknown channel `{channel}`"))?;
            cmd_pcap(&g, &inputs, GsmtapMeta { kind: gsmtap_type, sub_type, arfcn, frame_number })
        }
        Cmd::Asm { source } => cmd_asm(&g, source.as_deref()),
    }
}

struct Loaded {
    config: HarnessConfig,
    bundled_seeds: Vec<(String, Vec<u8>)>,
}

fn load(g: &Global) -> Result<Loaded> {
    match (&g.config, &g.target) {
        (Some(p), _) => {
            let config = HarnessConfig::load(p).map_err(|e| anyhow!("{}: {e}", p.display()))?;
            Ok(Loaded { config, bundled_seeds: Vec::new() })
        }
        (None, Some(t)) => {
            let b = targets::build(t)?;
            Ok(Loaded { config: b.config, bundled_seeds: b.seeds })
        }
        (None, None) => bail!("pass --config <file> or --target <name>"),
    }
}

fn campaign(cfg: &HarnessConfig) -> Result<Campaign> {
    cfg.campaign().context("starting campaign")
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).with_context(|| format!("reading {}", p.display()))
}

/// Regular files of a directory in name order.
fn read_dir_inputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let e = e?;
        if e.file_type()?.is_file() {
            names.push(e.path());
        }
    }
    names.sort();
    names.into_iter().map(|p| Ok((p.file_stem().unwrap().to_string_lossy().into_owned(), read_file(&p)?))).collect()
}

fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(read_dir_inputs(p)?);
        } else {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((name, read_file(p)?));
        }
    }
    Ok(out)
}

fn budget(g: &Global) -> Budget {
    Budget { execs: g.budget_execs, time: g.budget_secs.map(Duration::from_secs) }
}

/// Keeps one slot per worker and writes the summed counters.
struct SharedStatus {
    slot: usize,
    all: Arc<Mutex<Vec<FuzzStats>>>,
    file: StatusFile,
}

fn aggregate(all: &[FuzzStats], crashes: usize, hangs: usize) -> FuzzStats {
    FuzzStats {
        execs: all.iter().map(|s| s.execs).sum(),
        execs_per_sec: all.iter().map(|s| s.execs_per_sec).sum(),
        paths: all.iter().map(|s| s.paths).max().unwrap_or(0),
        crashes,
        hangs,
        skipped: all.iter().map(|s| s.skipped).sum(),
        elapsed: all.iter().map(|s| s.elapsed).max().unwrap_or_default(),
    }
}

impl FuzzObserver for SharedStatus {
    fn on_status(&mut self, stats: &FuzzStats) {
        let mut all = self.all.lock().unwrap();
        all[self.slot] = stats.clone();
        let agg = aggregate(
            &all,
            all.iter().map(|s| s.crashes).max().unwrap_or(0),
            all.iter().map(|s| s.hangs).max().unwrap_or(0),
        );
        self.file.on_status(&agg);
    }

    fn on_crash(&mut self, key: &str, o: &RunOutcome) {
        let what = o.findings.first().map(|f| f.to_string()).or_else(|| o.stop.as_ref().map(|s| s.to_string()));
        log::info!("worker {}: new crash {key}: {}", self.slot, what.unwrap_or_default());
    }
}

fn cmd_fuzz(g: &Global, seeds_dir: Option<&Path>) -> Result<u8> {
    let loaded = load(g)?;
    let seeds: Vec<Vec<u8>> = match seeds_dir {
        Some(d) => read_dir_inputs(d)?.into_iter().map(|(_, b)| b).collect(),
        None => loaded.bundled_seeds.iter().map(|(_, b)| b.clone()).collect(),
    };
    if seeds.is_empty() {
        bail!("no seeds");
    }
    if g.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = g.seed.or(loaded.config.seed).unwrap_or(0);
    let mut opts = FuzzOptions::with_budget(budget(g));
    if g.workers > 1 {
        opts.sync_every = Some(SYNC_EVERY);
    }
    let all = Arc::new(Mutex::new(vec![FuzzStats::default(); g.workers]));
    let config = Arc::new(loaded.config);

    let results: Vec<Result<(FuzzStats, CorpusStore)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..g.workers)
            .map(|i| {
                let (config, all, out, seeds) = (config.clone(), all.clone(), out.clone(), &seeds);
                s.spawn(move || -> Result<(FuzzStats, CorpusStore)> {
                    let mut c = campaign(&config)?;
                    let mut store = CorpusStore::open(&out, c.map_size())?;
                    for sd in seeds {
                        store.add_seed(sd.clone());
                    }
                    let mut m = Mutator::new(seed.wrapping_add(i as u64), c.spec().input_max_len);
                    let mut obs = SharedStatus { slot: i, all, file: StatusFile { path: out.join("status") } };
                    let stats = executor::fuzz(&mut c, &mut store, &mut m, opts, &mut obs)?;
                    Ok((stats, store))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut stats = Vec::new();
    let mut crash_keys = BTreeSet::new();
    let mut hang_keys = BTreeSet::new();
    let mut digest = String::new();
    for r in results {
        let (st, store) = r?;
        crash_keys.extend(store.crashes().keys().cloned());
        hang_keys.extend(store.hangs().keys().cloned());
        if digest.is_empty() {
            digest = store.queue_digest();
        }
        stats.push(st);
    }
    let agg = aggregate(&stats, crash_keys.len(), hang_keys.len());
    StatusFile { path: out.join("status") }.write(&agg).context("writing status")?;
    print!("{}", agg.status_text());
    println!("queue_digest={digest}");
    for k in &crash_keys {
        println!("crash {k}");
    }
    Ok(if crash_keys.is_empty() { 0 } else { EXIT_CRASHES })
}

struct PrintSink {
    output: Vec<u8>,
}

impl TraceSink for PrintSink {
    fn event(&mut self, ev: TraceEvent) {
        match ev {
            TraceEvent::Instruction(line) => println!("{line}"),
            TraceEvent::GuestOutput(b) => self.output.push(b),
        }
    }
}

fn cmd_run(g: &Global, input: &Path, trace: bool) -> Result<u8> {
    let loaded = load(g)?;
    let data = read_file(input)?;
    let mut c = campaign(&loaded.config)?;
    let o = if trace {
        let mut sink = PrintSink { output: Vec::new() };
        let o = c.trace_one(&data, &mut sink);
        if !sink.output.is_empty() {
            println!("guest output: {}", String::from_utf8_lossy(&sink.output));
        }
        o
    } else {
        c.run_one(&data)
    };
    match &o.stop {
        Some(s) => println!("stop: {s}"),
        None => println!("stop: input rejected by placement"),
    }
    for f in &o.findings {
        println!("finding: {f}");
    }
    println!("verdict: {:?}", o.verdict);
    println!("edges: {}", o.coverage.edge_count());
    if let Some(k) = o.crash_key() {
        println!("key: {k}");
    }
    Ok(if o.verdict == Verdict::Crash { EXIT_CRASHES } else { 0 })
}

fn edge_union(c: &mut Campaign, inputs: &[Vec<u8>]) -> BTreeSet<(u32, u8)> {
    let mut u = BTreeSet::new();
    for i in inputs {
        for (idx, b) in c.run_one(i).coverage.tuples() {
            for bit in 0..8 {
                if b & (1 << bit) != 0 {
                    u.insert((idx, bit));
                }
            }
        }
    }
    u
}

fn cmd_cmin(g: &Global, dir: &Path) -> Result<u8> {
    let loaded = load(g)?;
    let out = g.out.clone().ok_or_else(|| anyhow!("cmin needs --out <dir>"))?;
    let named = read_dir_inputs(dir)?;
    let inputs: Vec<Vec<u8>> = named.iter().map(|(_, b)| b.clone()).collect();
    let mut c = campaign(&loaded.config)?;
    let kept = corpus::cmin(&inputs, &mut c);
    let same = edge_union(&mut c, &inputs) == edge_union(&mut c, &kept);
    fs::create_dir_all(&out)?;
    for (i, k) in kept.iter().enumerate() {
        fs::write(out.join(format!("id-{i:06}.bin")), k)?;
    }
    log::info!(
        "cmin: {} -> {} inputs, edge union {}",
        inputs.len(),
        kept.len(),
        if same { "preserved" } else { "CHANGED" }
    );
    println!("{} -> {}", inputs.len(), kept.len());
    if !same {
        bail!("edge union changed");
    }
    Ok(0)
}

fn cmd_tmin(g: &Global, input: &Path, crash: bool) -> Result<u8> {
    let loaded = load(g)?;
    let data = read_file(input)?;
    let mut c = campaign(&loaded.config)?;
    let mode = if crash { TminMode::Crash } else { TminMode::Coverage };
    let small = corpus::tmin(&data, &mut c, mode)?;
    let out = g.out.clone().unwrap_or_else(|| {
        let mut s = input.as_os_str().to_owned();
        s.push(".min");
        PathBuf::from(s)
    });
    fs::write(&out, &small).with_context(|| format!("writing {}", out.display()))?;
    println!("{} -> {} bytes: {}", data.len(), small.len(), out.display());
    Ok(0)
}

fn cmd_deduce(g: &Global, messages: &[PathBuf], noise: NoiseParams) -> Result<u8> {
    let loaded = load(g)?;
    let msgs = if messages.is_empty() { loaded.bundled_seeds.clone() } else { expand_inputs(messages)? };
    if msgs.is_empty() {
        bail!("no messages");
    }
    let mut cands = ParserCandidate::from_config(&loaded.config)?;
    let report = deduce::deduce(&mut cands, &msgs, &noise)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let path = dir.join("deduction.json");
    fs::write(&path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.table());
    Ok(0)
}

fn cmd_pcap(g: &Global, inputs: &[PathBuf], meta: GsmtapMeta) -> Result<u8> {
    let out = g.out.clone().ok_or_else(|| anyhow!("pcap needs --out <file>"))?;
    let data: Vec<Vec<u8>> = expand_inputs(inputs)?.into_iter().map(|(_, b)| b).collect();
    let bytes = pcapout::to_bytes(&data, &meta)?;
    fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
    println!("{} records: {}", data.len(), out.display());
    Ok(0)
}

fn cmd_asm(g: &Global, source: Option<&Path>) -> Result<u8> {
    match (source, &g.target) {
        (Some(src), _) => {
            let text = fs::read_to_string(src).with_context(|| format!("reading {}", src.display()))?;
            let a = asm::assemble(&text).map_err(|e| anyhow!("{}: {e}", src.display()))?;
            let bin = g.out.clone().unwrap_or_else(|| src.with_extension("bin"));
            fs::write(&bin, &a.bytes)?;
            let sym = bin.with_extension("sym");
            fs::write(&sym, a.symbol_table())?;
            println!("{} bytes: {} {}", a.bytes.len(), bin.display(), sym.display());
        }
        (None, Some(t)) => {
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from(t));
            targets::build(t)?.export(&dir)?;
            println!("exported {t} to {}", dir.display());
        }
        (None, None) => bail!("asm needs a source file or --target"),
    }
    Ok(0)
}
