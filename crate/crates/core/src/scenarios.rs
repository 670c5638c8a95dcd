//! Demand scenarios: generation around the nominal load, feasibility
//! screening, the train/validation/test split and the dataset text format.
//!
//! File format (UTF-8, one record per line, floats in shortest round-trip
//! form):
//!
//! ```text
//! otsforge-dataset 1
//! fingerprint <network fingerprint>
//! mode perbus|global
//! low <f64>
//! high <f64>
//! seed <u64>
//! counts <train> <val> <test>
//! <train|val|test> <p_1> <p_2> ... <p_Nb>
//! ...
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{solve_dcopf, SwitchVector};
use crate::network::Network;

const MAGIC: &str = "otsforge-dataset 1";
/// Candidate draws allowed per requested sample.
pub const DRAW_BUDGET_FACTOR: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("only {kept} feasible samples after {draws} draws (wanted {wanted})")]
    YieldTooLow { kept: usize, draws: usize, wanted: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("dataset file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("dataset was generated for network {expected}, not {found}")]
    FingerprintMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Independent factor per bus.
    PerBus,
    /// One factor per sample shared by all buses.
    Global,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::PerBus => "perbus",
            ScaleMode::Global => "global",
        }
    }
}

impl FromStr for ScaleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "perbus" => Ok(ScaleMode::PerBus),
            "global" => Ok(ScaleMode::Global),
            other => Err(format!("unknown scale mode '{other}' (expected perbus or global)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub low: f64,
    pub high: f64,
    pub mode: ScaleMode,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            low: 1.0,
            high: 1.1,
            mode: ScaleMode::PerBus,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    pub split: Vec<Split>,
    pub config: GenConfig,
    pub network_fingerprint: String,
}

/// Split sizes for `n` samples in the ratio 3:1:2.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 / 2.0).round() as usize;
    let val = ((n as f64 / 6.0).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Draws scaled demands, keeps those whose all-closed DC-OPF is feasible,
/// and splits them 3:1:2 in shuffled order.
pub fn generate(net: &Network, n_target: usize, cfg: &GenConfig) -> Result<Dataset, ScenarioError> {
    if n_target == 0 {
        return Err(ScenarioError::Invalid("n_target must be positive".into()));
    }
    if net.nominal_demand.iter().all(|&d| d == 0.0) {
        return Err(ScenarioError::Invalid("nominal demand is zero everywhere".into()));
    }
    if !(cfg.low <= cfg.high) || !(cfg.low >= 0.0) {
        return Err(ScenarioError::Invalid(format!("scale range [{}, {}]", cfg.low, cfg.high)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let budget = DRAW_BUDGET_FACTOR * n_target;
    let closed = SwitchVector::all_closed(net.n_line);
    let mut samples = Vec::with_capacity(n_target);
    let mut draws = 0;
    while samples.len() < n_target && draws < budget {
        // Candidates are drawn sequentially, screened in parallel and
        // accepted in draw order, so the result does not depend on the
        // thread count.
        let chunk = (n_target - samples.len()).min(budget - draws);
        let candidates: Vec<Vec<f64>> = (0..chunk).map(|_| draw(&mut rng, net, cfg)).collect();
        draws += chunk;
        let ok: Vec<bool> = candidates
            .par_iter()
            .map(|d| solve_dcopf(net, d, &closed).map(|s| s.is_optimal()).unwrap_or(false))
            .collect();
        samples.extend(candidates.into_iter().zip(ok).filter(|(_, ok)| *ok).map(|(d, _)| d));
    }
    samples.truncate(n_target);
    if samples.len() < n_target {
        return Err(ScenarioError::YieldTooLow {
            kept: samples.len(),
            draws,
            wanted: n_target,
        });
    }
    let (n_train, n_val, _) = split_counts(n_target);
    let mut order: Vec<usize> = (0..n_target).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Test; n_target];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        samples,
        split,
        config: *cfg,
        network_fingerprint: net.fingerprint(),
    })
}

fn draw(rng: &mut ChaCha8Rng, net: &Network, cfg: &GenConfig) -> Vec<f64> {
    let mut factor = || {
        if cfg.high > cfg.low {
            rng.gen_range(cfg.low..=cfg.high)
        } else {
            cfg.low
        }
    };
    match cfg.mode {
        ScaleMode::PerBus => net.nominal_demand.iter().map(|d| d * factor()).collect(),
        ScaleMode::Global => {
            let f = factor();
            net.nominal_demand.iter().map(|d| d * f).collect()
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split.iter().filter(|&&x| x == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    /// Samples of one split, in file order.
    pub fn subset(&self, which: Split) -> Vec<&[f64]> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, &s)| s == which)
            .map(|(d, _)| d.as_slice())
            .collect()
    }

    pub fn check_network(&self, net: &Network) -> Result<(), ScenarioError> {
        let found = net.fingerprint();
        if found != self.network_fingerprint {
            return Err(ScenarioError::FingerprintMismatch {
                expected: self.network_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (a, b, c) = self.counts();
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "fingerprint {}", self.network_fingerprint);
        let _ = writeln!(out, "mode {}", self.config.mode.as_str());
        let _ = writeln!(out, "low {:?}", self.config.low);
        let _ = writeln!(out, "high {:?}", self.config.high);
        let _ = writeln!(out, "seed {}", self.config.seed);
        let _ = writeln!(out, "counts {a} {b} {c}");
        for (d, s) in self.samples.iter().zip(&self.split) {
            out.push_str(s.as_str());
            for v in d {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ScenarioError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let fail = |line: usize, reason: String| ScenarioError::Format { line: line + 1, reason };
        let mut header = |key: &str| -> Result<(usize, String), ScenarioError> {
            let (i, l) = lines.next().ok_or_else(|| fail(0, format!("missing '{key}' header")))?;
            let rest = l
                .strip_prefix(key)
                .ok_or_else(|| fail(i, format!("expected '{key}'")))?
                .trim()
                .to_string();
            Ok((i, rest))
        };
        let (i, magic) = header("otsforge-dataset")?;
        if magic != "1" {
            return Err(fail(i, format!("unsupported version '{magic}'")));
        }
        let (_, fingerprint) = header("fingerprint")?;
        let (i, mode) = header("mode")?;
        let mode = mode.parse().map_err(|e| fail(i, e))?;
        let (i, low) = header("low")?;
        let low = low.parse().map_err(|e| fail(i, format!("{e}")))?;
        let (i, high) = header("high")?;
        let high = high.parse().map_err(|e| fail(i, format!("{e}")))?;
        let (i, seed) = header("seed")?;
        let seed = seed.parse().map_err(|e| fail(i, format!("{e}")))?;
        let (ci, counts) = header("counts")?;
        let counts: Vec<usize> = counts
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| fail(ci, format!("{e}"))))
            .collect::<Result<_, _>>()?;
        if counts.len() != 3 {
            return Err(fail(ci, "counts needs three values".into()));
        }

        let mut samples = Vec::new();
        let mut split = Vec::new();
        for (i, l) in lines {
            let mut parts = l.split_whitespace();
            let s: Split = parts.next().unwrap_or("").parse().map_err(|e| fail(i, e))?;
            let d: Vec<f64> = parts
                .map(|v| v.parse().map_err(|e| fail(i, format!("{e}"))))
                .collect::<Result<_, _>>()?;
            if let Some(first) = samples.first() {
                let first: &Vec<f64> = first;
                if first.len() != d.len() {
                    return Err(fail(i, format!("{} values, expected {}", d.len(), first.len())));
                }
            }
            samples.push(d);
            split.push(s);
        }
        let ds = Dataset {
            samples,
            split,
            config: GenConfig { low, high, mode, seed },
            network_fingerprint: fingerprint,
        };
        let (a, b, c) = ds.counts();
        if [a, b, c] != counts[..] {
            return Err(fail(ci, format!("header counts {counts:?} but records give [{a}, {b}, {c}]")));
        }
        Ok(ds)
    }
}
