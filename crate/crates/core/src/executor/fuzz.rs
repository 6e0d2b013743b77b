use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{Campaign, ExecError, RunOutcome, Verdict};
use crate::corpus::CorpusStore;
use crate::mutator::{Mutator, ENERGY};

/// Stop condition; whichever limit is reached first ends the campaign.
/// With neither set the campaign runs forever.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Budget {
    pub execs: Option<u64>,
    pub time: Option<Duration>,
}

impl Budget {
    pub fn execs(n: u64) -> Budget {
        Budget { execs: Some(n), time: None }
    }

    pub fn time(d: Duration) -> Budget {
        Budget { execs: None, time: Some(d) }
    }

    fn exhausted(&self, execs: u64, started: Instant) -> bool {
        self.execs.is_some_and(|n| execs >= n) || self.time.is_some_and(|t| started.elapsed() >= t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuzzOptions {
    pub budget: Budget,
    /// Import other workers' queue entries every this many execs.
    pub sync_every: Option<u64>,
    /// Roughly one in `splice_one_in` rounds splices two queue entries.
    pub splice_one_in: u64,
    pub status_interval: Duration,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            budget: Budget::default(),
            sync_every: None,
            splice_one_in: 16,
            status_interval: Duration::from_secs(1),
        }
    }
}

impl FuzzOptions {
    pub fn with_budget(budget: Budget) -> FuzzOptions {
        FuzzOptions { budget, ..FuzzOptions::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FuzzStats {
    pub execs: u64,
    pub execs_per_sec: f64,
    pub paths: usize,
    pub crashes: usize,
    pub hangs: usize,
    pub skipped: u64,
    pub elapsed: Duration,
}

impl FuzzStats {
    /// Status-file body: stable `key=value` lines.
    pub fn status_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "execs={}", self.execs);
        let _ = writeln!(s, "execs_per_sec={:.1}", self.execs_per_sec);
        let _ = writeln!(s, "paths={}", self.paths);
        let _ = writeln!(s, "crashes={}", self.crashes);
        let _ = writeln!(s, "hangs={}", self.hangs);
        s
    }
}

/// Progress callbacks from [`fuzz`].
pub trait FuzzObserver {
    fn on_status(&mut self, _stats: &FuzzStats) {}
    fn on_crash(&mut self, _key: &str, _outcome: &RunOutcome) {}
    fn on_new_path(&mut self, _queue_len: usize) {}
    /// Polled between executions; `true` ends the campaign early.
    fn stop_requested(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl FuzzObserver for NoObserver {}

/// Rewrites a status file on every status tick.
pub struct StatusFile {
    pub path: PathBuf,
}

impl StatusFile {
    pub fn write(&self, stats: &FuzzStats) -> std::io::Result<()> {
        let dir = self.path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, stats.status_text().as_bytes())?;
        tmp.persist(&self.path).map_err(|e| e.error)?;
        Ok(())
    }
}

impl FuzzObserver for StatusFile {
    fn on_status(&mut self, stats: &FuzzStats) {
        if let Err(e) = self.write(stats) {
            log::warn!("writing {}: {e}", self.path.display());
        }
    }
}

struct Loop<'a> {
    campaign: &'a mut Campaign,
    corpus: &'a mut CorpusStore,
    observer: &'a mut dyn FuzzObserver,
    opts: FuzzOptions,
    stats: FuzzStats,
    started: Instant,
    last_status: Instant,
    since_sync: u64,
}

impl Loop<'_> {
    fn done(&self) -> bool {
        self.opts.budget.exhausted(self.stats.execs, self.started) || self.observer.stop_requested()
    }

    fn exec(&mut self, input: &[u8], seed: bool) -> Result<(), ExecError> {
        let o = self.campaign.run_one(input);
        let placed = &input[..o.placed_len];
        self.stats.execs += 1;
        self.since_sync += 1;
        match o.verdict {
            Verdict::Skipped => self.stats.skipped += 1,
            Verdict::Crash | Verdict::Hang => {
                let key = o.crash_key().expect("crash and hang outcomes carry a key");
                let new = if o.verdict == Verdict::Crash {
                    self.corpus.save_crash(&key, placed, &o)?
                } else {
                    self.corpus.save_hang(&key, placed)?
                };
                if new && o.verdict == Verdict::Crash {
                    self.observer.on_crash(&key, &o);
                }
                // seeds stay in the queue even when they fault
                if seed && self.corpus.add_if_interesting(placed, &o)? {
                    self.observer.on_new_path(self.corpus.len());
                }
            }
            Verdict::Clean => {
                if self.corpus.add_if_interesting(placed, &o)? {
                    self.observer.on_new_path(self.corpus.len());
                }
            }
        }
        if self.last_status.elapsed() >= self.opts.status_interval {
            self.last_status = Instant::now();
            self.refresh();
            self.observer.on_status(&self.stats);
            self.corpus.flush()?;
        }
        if self.opts.sync_every.is_some_and(|n| self.since_sync >= n) {
            self.since_sync = 0;
            self.corpus.sync(self.campaign)?;
        }
        Ok(())
    }

    fn refresh(&mut self) {
        self.stats.elapsed = self.started.elapsed();
        let secs = self.stats.elapsed.as_secs_f64();
        self.stats.execs_per_sec = if secs > 0.0 { self.stats.execs as f64 / secs } else { 0.0 };
        self.stats.paths = self.corpus.len();
        self.stats.crashes = self.corpus.crashes().len();
        self.stats.hangs = self.corpus.hangs().len();
    }
}

/// Runs pending seeds, then havoc/splice rounds over the queue until the
/// budget is spent.
pub fn fuzz(
    campaign: &mut Campaign,
    corpus: &mut CorpusStore,
    mutator: &mut Mutator,
    opts: FuzzOptions,
    observer: &mut dyn FuzzObserver,
) -> Result<FuzzStats, ExecError> {
    let now = Instant::now();
    let mut l = Loop {
        campaign,
        corpus,
        observer,
        opts,
        stats: FuzzStats::default(),
        started: now,
        last_status: now,
        since_sync: 0,
    };
    if l.done() {
        return Ok(l.stats);
    }
    if !l.corpus.has_pending() && l.corpus.is_empty() {
        return Err(ExecError::NoSeeds);
    }
    for seed in l.corpus.take_pending() {
        if l.done() {
            break;
        }
        l.exec(&seed, true)?;
    }
    if l.opts.sync_every.is_some() {
        l.corpus.sync(l.campaign)?;
    }
    if l.corpus.is_empty() && !l.done() {
        return Err(ExecError::NoSeeds);
    }

    while !l.done() {
        let idx = l.corpus.pick_next(mutator.rng_mut())?;
        let entry = l.corpus.entry(idx);
        let input = entry.input.clone();
        let energy = if entry.favored { 2 * ENERGY } else { ENERGY };
        for _ in 0..energy {
            if l.done() {
                break;
            }
            let n = l.corpus.len();
            let child = if n > 1 && mutator.rng_mut().chance(1, l.opts.splice_one_in) {
                let other = mutator.rng_mut().below(n);
                let other = l.corpus.entry(other).input.clone();
                mutator.splice(&input, &other).unwrap_or_else(|_| mutator.mutate(&input))
            } else {
                mutator.mutate(&input)
            };
            l.exec(&child, false)?;
        }
    }
    l.refresh();
    l.observer.on_status(&l.stats);
    l.corpus.flush()?;
    Ok(l.stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sanitizer::ReportKind;
    use crate::targets;

    fn run(seed: u64, execs: u64) -> (FuzzStats, String, Vec<String>) {
        let t = targets::build("t1").unwrap();
        let mut c = t.campaign().unwrap();
        let mut corpus = CorpusStore::in_memory(c.map_size());
        corpus.add_seed(t.seeds[0].1.clone());
        let mut m = Mutator::new(seed, c.spec().input_max_len);
        let stats =
            fuzz(&mut c, &mut corpus, &mut m, FuzzOptions::with_budget(Budget::execs(execs)), &mut NoObserver).unwrap();
        (stats, corpus.queue_digest(), corpus.crashes().keys().cloned().collect())
    }

    #[test]
    fn zero_budget_does_nothing() {
        let (stats, _, crashes) = run(1, 0);
        assert_eq!(stats.execs, 0);
        assert_eq!(stats.paths, 0);
        assert!(crashes.is_empty());
    }

    #[test]
    fn no_seeds_is_an_error() {
        let t = targets::build("t1").unwrap();
        let mut c = t.campaign().unwrap();
        let mut corpus = CorpusStore::in_memory(c.map_size());
        let mut m = Mutator::new(1, 64);
        let r = fuzz(&mut c, &mut corpus, &mut m, FuzzOptions::with_budget(Budget::execs(10)), &mut NoObserver);
        assert!(matches!(r, Err(ExecError::NoSeeds)));
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let a = run(7, 3000);
        let b = run(7, 3000);
        assert_eq!(a.0.execs, 3000);
        assert_eq!((a.0.paths, a.0.crashes, a.0.hangs), (b.0.paths, b.0.crashes, b.0.hangs));
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn t1_copy_store_found() {
        let t = targets::build("t1").unwrap();
        let store = format!("{}-{:08x}-", ReportKind::OobWrite.short_name(), t.symbol("t1_copy_store"));
        let (_, _, crashes) = run(3, 20_000);
        assert!(crashes.iter().any(|k| k.starts_with(&store)), "{crashes:?}");
    }

    #[test]
    fn t3_uaf_found_from_clean_seed() {
        let t = targets::build("t3").unwrap();
        let mut c = t.campaign().unwrap();
        let mut corpus = CorpusStore::in_memory(c.map_size());
        corpus.add_seed(t.seed("clean").to_vec());
        let mut m = Mutator::new(5, c.spec().input_max_len);
        fuzz(&mut c, &mut corpus, &mut m, FuzzOptions::with_budget(Budget::execs(50_000)), &mut NoObserver).unwrap();
        assert!(corpus.crashes().keys().any(|k| k.starts_with("uaf")), "{:?}", corpus.crashes().keys());
    }

    #[test]
    fn status_text_keys() {
        let s = FuzzStats { execs: 10, execs_per_sec: 2.5, paths: 3, crashes: 1, hangs: 0, ..Default::default() };
        assert_eq!(s.status_text(), "execs=10\nexecs_per_sec=2.5\npaths=3\ncrashes=1\nhangs=0\n");
    }
}
