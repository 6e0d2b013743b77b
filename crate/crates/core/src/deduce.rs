//! Parser deduction: run each message through every candidate parser entry
//! and rank the candidates by edge coverage relative to a random-noise
//! baseline.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::Serialize;
use thiserror::Error;

use crate::config::HarnessConfig;
use crate::executor::{Callbacks, Campaign, ExecError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DeduceError {
    #[error("no parser candidates")]
    NoCandidates,
    #[error("no messages to classify")]
    NoMessages,
    #[error("noise baseline for `{0}` covered no edges")]
    ZeroNoise(String),
    #[error("message `{name}` is {len} bytes, limit is {max}")]
    TooLong { name: String, len: usize, max: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseParams {
    pub n: usize,
    pub len: RangeInclusive<usize>,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { n: 30, len: 32..=42, seed: 0 }
    }
}

/// A named parser entry with its own campaign over the shared image.
pub struct ParserCandidate {
    pub name: String,
    pub campaign: Campaign,
}

impl ParserCandidate {
    /// One candidate per `[deduce]` entry of the config.
    pub fn from_config(cfg: &HarnessConfig) -> Result<Vec<ParserCandidate>, ExecError> {
        cfg.candidates
            .iter()
            .map(|c| {
                let entry = c.entry;
                let campaign = cfg.campaign_with(|s| s.entry = entry, Callbacks::default())?;
                Ok(ParserCandidate { name: c.name.clone(), campaign })
            })
            .collect()
    }
}

/// Edges hit by one run; a faulting run counts what it covered.
pub fn measure(campaign: &mut Campaign, message: &[u8]) -> usize {
    campaign.run_one(message).coverage.edge_count()
}

/// Mean and population standard deviation of edge counts over seeded
/// random messages.
pub fn noise_baseline(campaign: &mut Campaign, params: &NoiseParams) -> (f64, f64) {
    assert!(params.n >= 1, "noise baseline needs at least one sample");
    let mut rng = Rng::new(params.seed);
    let counts: Vec<f64> = (0..params.n)
        .map(|_| {
            let mut msg = vec![0u8; rng.range(*params.len.start(), *params.len.end())];
            rng.fill(&mut msg);
            measure(campaign, &msg) as f64
        })
        .collect();
    mean_stddev(&counts)
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateNoise {
    pub name: String,
    pub noise_mean: f64,
    pub noise_stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageResult {
    pub name: String,
    pub len: usize,
    /// Indexed like [`DeductionReport::candidates`].
    pub edge_counts: Vec<usize>,
    pub ratios: Vec<f64>,
    /// Candidate indices, best ratio first.
    pub ranking: Vec<usize>,
    pub argmax: String,
    /// Best ratio minus the runner-up's; absent with a single candidate.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeductionReport {
    pub candidates: Vec<CandidateNoise>,
    pub messages: Vec<MessageResult>,
}

/// Measures every message against every candidate and ranks candidates per
/// message by `edge_count / noise_mean`.
pub fn deduce(
    candidates: &mut [ParserCandidate],
    messages: &[(String, Vec<u8>)],
    noise: &NoiseParams,
) -> Result<DeductionReport, DeduceError> {
    if candidates.is_empty() {
        return Err(DeduceError::NoCandidates);
    }
    if messages.is_empty() {
        return Err(DeduceError::NoMessages);
    }
    for (name, msg) in messages {
        for c in candidates.iter() {
            let max = c.campaign.spec().input_max_len;
            if msg.len() > max {
                return Err(DeduceError::TooLong { name: name.clone(), len: msg.len(), max });
            }
        }
    }

    let mut noise_rows = Vec::with_capacity(candidates.len());
    for c in candidates.iter_mut() {
        let (mean, sd) = noise_baseline(&mut c.campaign, noise);
        if mean <= 0.0 {
            return Err(DeduceError::ZeroNoise(c.name.clone()));
        }
        noise_rows.push(CandidateNoise { name: c.name.clone(), noise_mean: mean, noise_stddev: sd });
    }

    let mut results = Vec::with_capacity(messages.len());
    for (name, msg) in messages {
        let edge_counts: Vec<usize> = candidates.iter_mut().map(|c| measure(&mut c.campaign, msg)).collect();
        let ratios: Vec<f64> = edge_counts.iter().zip(&noise_rows).map(|(&e, n)| e as f64 / n.noise_mean).collect();
        let mut ranking: Vec<usize> = (0..ratios.len()).collect();
        ranking.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]).then(a.cmp(&b)));
        let margin = ranking.get(1).map(|&second| ratios[ranking[0]] - ratios[second]);
        results.push(MessageResult {
            name: name.clone(),
            len: msg.len(),
            argmax: candidates[ranking[0]].name.clone(),
            edge_counts,
            ratios,
            ranking,
            margin,
        });
    }
    Ok(DeductionReport { candidates: noise_rows, messages: results })
}

impl DeductionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text matrix: one row per message, `count (ratio)` per
    /// candidate, the winner marked with `*`.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = 14;
        let _ = write!(s, "{:<16}{:>5}", "message", "len");
        for c in &self.candidates {
            let _ = write!(s, "{:>w$}", c.name);
        }
        s.push('\n');
        let _ = write!(s, "{:<16}{:>5}", "noise", "");
        for c in &self.candidates {
            let _ = write!(s, "{:>w$}", format!("{:.1}±{:.1}", c.noise_mean, c.noise_stddev));
        }
        s.push('\n');
        for m in &self.messages {
            let _ = write!(s, "{:<16}{:>5}", m.name, m.len);
            for (i, (e, r)) in m.edge_counts.iter().zip(&m.ratios).enumerate() {
                let mark = if i == m.ranking[0] { "*" } else { " " };
                let _ = write!(s, "{:>w$}", format!("{e} ({r:.2}){mark}"));
            }
            s.push('\n');
        }
        s
    }
}
