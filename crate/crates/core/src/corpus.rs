//! Queue, crash store and the two minimizers.
//!
//! A store is either in-memory or backed by a directory:
//!
//! ```text
//! queue/id-<n>.bin
//! crashes/crash-<dedupkey>-<n>.bin    (+ .jsonl with the sanitizer reports)
//! hangs/hang-<dedupkey>-<n>.bin
//! global.map
//! index.jsonl
//! ```
//!
//! Files are created under a temporary name and hard-linked into place, so
//! several workers can share one directory without clobbering each other's
//! ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coverage::ClassifiedMap;
use crate::executor::{Campaign, RunOutcome, Verdict};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("input does not crash")]
    NotCrashing,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueEntry {
    pub id: u64,
    pub input: Vec<u8>,
    pub map_digest: String,
    pub edges: BTreeSet<u32>,
    pub favored: bool,
    pub exec_time: Duration,
}

impl QueueEntry {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

#[derive(Serialize)]
struct IndexLine<'a> {
    id: u64,
    len: usize,
    map_digest: &'a str,
    edges: usize,
    exec_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredFinding {
    pub key: String,
    pub n: u64,
    pub input: Vec<u8>,
    pub path: Option<PathBuf>,
}

pub struct CorpusStore {
    dir: Option<PathBuf>,
    entries: Vec<QueueEntry>,
    known_ids: BTreeSet<u64>,
    next_id: u64,
    global: ClassifiedMap,
    favored_dirty: bool,
    favored: Vec<usize>,
    pending: Vec<Vec<u8>>,
    crashes: BTreeMap<String, StoredFinding>,
    hangs: BTreeMap<String, StoredFinding>,
    finding_seq: u64,
}

impl CorpusStore {
    pub fn in_memory(map_size: usize) -> CorpusStore {
        CorpusStore {
            dir: None,
            entries: Vec::new(),
            known_ids: BTreeSet::new(),
            next_id: 0,
            global: ClassifiedMap::empty(map_size),
            favored_dirty: false,
            favored: Vec::new(),
            pending: Vec::new(),
            crashes: BTreeMap::new(),
            hangs: BTreeMap::new(),
            finding_seq: 0,
        }
    }

    /// Opens (creating if needed) a directory-backed store. Existing queue
    /// files are not loaded; call [`CorpusStore::sync`] to import them.
    pub fn open(dir: &Path, map_size: usize) -> Result<CorpusStore, CorpusError> {
        for sub in ["queue", "crashes", "hangs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let mut s = CorpusStore::in_memory(map_size);
        s.dir = Some(dir.to_path_buf());
        Ok(s)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &QueueEntry {
        &self.entries[idx]
    }

    pub fn global_map(&self) -> &ClassifiedMap {
        &self.global
    }

    pub fn crashes(&self) -> &BTreeMap<String, StoredFinding> {
        &self.crashes
    }

    pub fn hangs(&self) -> &BTreeMap<String, StoredFinding> {
        &self.hangs
    }

    /// Queues a seed to be executed before fuzzing starts.
    pub fn add_seed(&mut self, input: Vec<u8>) {
        self.pending.push(input);
    }

    pub fn take_pending(&mut self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.pending)
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Adds `input` when its classified map sets a bucket the global map
    /// has not seen.
    pub fn add_if_interesting(&mut self, input: &[u8], outcome: &RunOutcome) -> Result<bool, CorpusError> {
        if !self.global.merge(&outcome.coverage).expect("map sizes agree") {
            return Ok(false);
        }
        let id = self.commit_queue_file(input)?;
        self.push_entry(id, input, outcome)?;
        Ok(true)
    }

    fn push_entry(&mut self, id: u64, input: &[u8], outcome: &RunOutcome) -> Result<(), CorpusError> {
        let entry = QueueEntry {
            id,
            input: input.to_vec(),
            map_digest: outcome.coverage.digest(),
            edges: outcome.coverage.edge_set(),
            favored: false,
            exec_time: outcome.exec_time,
        };
        if let Some(dir) = &self.dir {
            let line = serde_json::to_string(&IndexLine {
                id,
                len: entry.len(),
                map_digest: &entry.map_digest,
                edges: entry.edges.len(),
                exec_time_us: entry.exec_time.as_micros() as u64,
            })
            .expect("index line serializes");
            let p = dir.join("index.jsonl");
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
            f.write_all(format!("{line}\n").as_bytes()).map_err(io_err(&p))?;
        }
        self.known_ids.insert(id);
        self.next_id = self.next_id.max(id + 1);
        self.entries.push(entry);
        self.favored_dirty = true;
        Ok(())
    }

    /// Allocates the next free id; on disk the file is linked in without
    /// replacing another worker's entry.
    fn commit_queue_file(&mut self, input: &[u8]) -> Result<u64, CorpusError> {
        let Some(dir) = &self.dir else {
            let id = self.next_id;
            self.next_id += 1;
            return Ok(id);
        };
        let queue = dir.join("queue");
        let mut id = self.next_id;
        let tmp = write_tmp(&queue, input)?;
        loop {
            let dest = queue.join(format!("id-{id}.bin"));
            match fs::hard_link(&tmp, &dest) {
                Ok(()) => break,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => id += 1,
                Err(e) => {
                    let _ = fs::remove_file(&tmp);
                    return Err(io_err(&dest)(e));
                }
            }
        }
        fs::remove_file(&tmp).map_err(io_err(&tmp))?;
        self.next_id = id + 1;
        Ok(id)
    }

    /// Records a crash once per dedup key. Returns whether the key was new.
    pub fn save_crash(&mut self, key: &str, input: &[u8], outcome: &RunOutcome) -> Result<bool, CorpusError> {
        if self.crashes.contains_key(key) {
            return Ok(false);
        }
        let reports: String = outcome.findings.iter().map(|f| f.to_json_line() + "\n").collect();
        self.save_finding(true, key, input, &reports)
    }

    pub fn save_hang(&mut self, key: &str, input: &[u8]) -> Result<bool, CorpusError> {
        self.save_finding(false, key, input, "")
    }

    fn save_finding(&mut self, crash: bool, key: &str, input: &[u8], reports: &str) -> Result<bool, CorpusError> {
        let (map, sub, prefix) =
            if crash { (&self.crashes, "crashes", "crash") } else { (&self.hangs, "hangs", "hang") };
        if map.contains_key(key) {
            return Ok(false);
        }
        let mut n = self.finding_seq;
        let path = match &self.dir {
            None => None,
            Some(dir) => {
                let d = dir.join(sub);
                let tmp = write_tmp(&d, input)?;
                let dest = loop {
                    let dest = d.join(format!("{prefix}-{key}-{n}.bin"));
                    match fs::hard_link(&tmp, &dest) {
                        Ok(()) => break dest,
                        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
                        Err(e) => return Err(io_err(&dest)(e)),
                    }
                };
                fs::remove_file(&tmp).map_err(io_err(&tmp))?;
                if !reports.is_empty() {
                    let rp = dest.with_extension("jsonl");
                    fs::write(&rp, reports).map_err(io_err(&rp))?;
                }
                Some(dest)
            }
        };
        self.finding_seq = n + 1;
        let rec = StoredFinding { key: key.to_string(), n, input: input.to_vec(), path };
        if crash {
            self.crashes.insert(key.to_string(), rec);
        } else {
            self.hangs.insert(key.to_string(), rec);
        }
        Ok(true)
    }

    /// Recomputes the favored set: for every edge the entry with the
    /// smallest `(len, id)` is its top-rated entry, and a greedy pass over
    /// edges in index order marks top-rated entries until every edge is
    /// covered.
    pub fn recompute_favored(&mut self) {
        let mut top: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            for &edge in &e.edges {
                let better = match top.get(&edge) {
                    None => true,
                    Some(&j) => (e.len(), e.id) < (self.entries[j].len(), self.entries[j].id),
                };
                if better {
                    top.insert(edge, i);
                }
            }
        }
        let mut covered: BTreeSet<u32> = BTreeSet::new();
        for e in &mut self.entries {
            e.favored = false;
        }
        for (edge, i) in top {
            if covered.contains(&edge) {
                continue;
            }
            self.entries[i].favored = true;
            covered.extend(self.entries[i].edges.iter().copied());
        }
        self.favored = (0..self.entries.len()).filter(|&i| self.entries[i].favored).collect();
        self.favored_dirty = false;
    }

    pub fn favored(&mut self) -> &[usize] {
        if self.favored_dirty {
            self.recompute_favored();
        }
        &self.favored
    }

    /// Index of the next entry to fuzz: a favored entry with probability
    /// 0.8, otherwise any entry uniformly.
    pub fn pick_next(&mut self, rng: &mut Rng) -> Result<usize, CorpusError> {
        if self.entries.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let n = self.entries.len();
        let favored = self.favored();
        if !favored.is_empty() && rng.chance(8, 10) {
            let k = rng.below(favored.len());
            return Ok(favored[k]);
        }
        Ok(rng.below(n))
    }

    /// Digest over queue ids and contents, independent of timing.
    pub fn queue_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut ids: Vec<&QueueEntry> = self.entries.iter().collect();
        ids.sort_by_key(|e| e.id);
        for e in ids {
            h.update(e.id.to_le_bytes());
            h.update((e.input.len() as u64).to_le_bytes());
            h.update(&e.input);
        }
        hex::encode(h.finalize())
    }

    /// Writes `global.map`, merged with whatever other workers left there.
    pub fn flush(&mut self) -> Result<(), CorpusError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let p = dir.join("global.map");
        if let Ok(other) = ClassifiedMap::load(&p) {
            if other.size() == self.global.size() {
                self.global.merge(&other).expect("sizes checked");
            }
        }
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        self.global.save(tmp.path()).map_err(io_err(tmp.path()))?;
        tmp.persist(&p).map_err(|e| io_err(&p)(e.error))?;
        Ok(())
    }

    /// Imports queue files written by other workers, re-running each to
    /// obtain its coverage. Returns the number of entries imported.
    pub fn sync(&mut self, campaign: &mut Campaign) -> Result<usize, CorpusError> {
        let Some(dir) = self.dir.clone() else {
            return Ok(0);
        };
        let queue = dir.join("queue");
        let mut foreign = Vec::new();
        for ent in fs::read_dir(&queue).map_err(io_err(&queue))? {
            let ent = ent.map_err(io_err(&queue))?;
            let name = ent.file_name();
            let Some(id) = name.to_str().and_then(|n| n.strip_prefix("id-")).and_then(|n| n.strip_suffix(".bin"))
            else {
                continue;
            };
            let Ok(id) = id.parse::<u64>() else { continue };
            if !self.known_ids.contains(&id) {
                foreign.push((id, ent.path()));
            }
        }
        foreign.sort();
        let mut imported = 0;
        for (id, path) in foreign {
            let input = fs::read(&path).map_err(io_err(&path))?;
            self.known_ids.insert(id);
            let o = campaign.run_one(&input);
            if o.verdict == Verdict::Skipped {
                continue;
            }
            if self.global.merge(&o.coverage).expect("map sizes agree") {
                self.push_entry(id, &input, &o)?;
                imported += 1;
            }
        }
        Ok(imported)
    }
}

fn write_tmp(dir: &Path, bytes: &[u8]) -> Result<PathBuf, CorpusError> {
    let f = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir).map_err(io_err(dir))?;
    let (mut file, path) = f.keep().map_err(|e| io_err(dir)(e.error))?;
    file.write_all(bytes).map_err(io_err(&path))?;
    Ok(path)
}

/// Coverage tuples `(map index, bucket bit)` of one run.
fn tuples(map: &ClassifiedMap) -> Vec<(u32, u8)> {
    let mut out = Vec::new();
    for (idx, v) in map.tuples() {
        for bit in 0..8 {
            if v & (1 << bit) != 0 {
                out.push((idx, 1 << bit));
            }
        }
    }
    out
}

/// Corpus minimization: for every coverage tuple keep the smallest input
/// exercising it (earlier input on ties). Returns the kept inputs in their
/// original order; identical inputs are kept once.
pub fn cmin(inputs: &[Vec<u8>], campaign: &mut Campaign) -> Vec<Vec<u8>> {
    let mut best: BTreeMap<(u32, u8), usize> = BTreeMap::new();
    let mut seen: BTreeSet<&[u8]> = BTreeSet::new();
    for (i, input) in inputs.iter().enumerate() {
        if !seen.insert(input.as_slice()) {
            continue;
        }
        let o = campaign.run_one(input);
        for t in tuples(&o.coverage) {
            match best.get(&t) {
                Some(&j) if inputs[j].len() <= input.len() => {}
                _ => {
                    best.insert(t, i);
                }
            }
        }
    }
    let keep: BTreeSet<usize> = best.into_values().collect();
    keep.into_iter().map(|i| inputs[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TminMode {
    /// Keep the classified map byte-identical.
    Coverage,
    /// Keep the primary crash dedup key.
    Crash,
}

pub const TMIN_FILL: u8 = 0x41;

/// Test-case minimization: passes of block removal with descending
/// power-of-two block sizes, then byte normalization to `0x41`, repeated
/// until a full pass changes nothing.
pub fn tmin(input: &[u8], campaign: &mut Campaign, mode: TminMode) -> Result<Vec<u8>, CorpusError> {
    let reference = campaign.run_one(input);
    let want_key = reference.crash_key();
    if mode == TminMode::Crash && !reference.is_crash() {
        return Err(CorpusError::NotCrashing);
    }
    let mut keeps = |c: &[u8]| -> bool {
        let o = campaign.run_one(c);
        match mode {
            TminMode::Coverage => o.coverage == reference.coverage,
            TminMode::Crash => o.is_crash() && o.crash_key() == want_key,
        }
    };
    let mut cur = input[..reference.placed_len].to_vec();
    loop {
        let mut changed = false;
        let mut bs = if cur.len() >= 2 { 1usize << (cur.len() / 2).ilog2() } else { 1 };
        while bs >= 1 && !cur.is_empty() {
            let mut pos = 0;
            while pos < cur.len() {
                let end = (pos + bs).min(cur.len());
                let mut cand = cur[..pos].to_vec();
                cand.extend_from_slice(&cur[end..]);
                if keeps(&cand) {
                    cur = cand;
                    changed = true;
                } else {
                    pos += bs;
                }
            }
            bs /= 2;
        }
        for i in 0..cur.len() {
            if cur[i] == TMIN_FILL {
                continue;
            }
            let mut cand = cur.clone();
            cand[i] = TMIN_FILL;
            if keeps(&cand) {
                cur = cand;
                changed = true;
            }
        }
        if !changed {
            return Ok(cur);
        }
    }
}
