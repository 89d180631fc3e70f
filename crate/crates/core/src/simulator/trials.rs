//! Reproducible Monte Carlo batches over independent trees.
//!
//! Trial `t` inserts record `r` with the stream of `(master_seed, t, r)`; the
//! unsuccessful-search draw of trial `t` uses record index `n`, i.e. the
//! stream the next record would have read.
//!
//! Accumulators hold exact integer power sums, so merging shards is exactly
//! associative and commutative and the result does not depend on how trials
//! were split across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bits::StreamBits;
use super::tree::{external_depth_by_index, profiles, DstTree, ProfileSummary};
use crate::error::{Error, Result};

/// Trials per work unit handed to rayon.
const CHUNK: u64 = 64;

/// Which statistics [`run_trials`] accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatSet {
    pub profile: bool,
    pub height: bool,
    pub saturation: bool,
    pub depth: bool,
}

impl StatSet {
    pub const ALL: StatSet = StatSet {
        profile: true,
        height: true,
        saturation: true,
        depth: true,
    };

    /// Parses a comma-separated list such as `height,saturation`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut s = StatSet {
            profile: false,
            height: false,
            saturation: false,
            depth: false,
        };
        for item in list.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match item {
                "profile" => s.profile = true,
                "height" => s.height = true,
                "saturation" => s.saturation = true,
                "depth" => s.depth = true,
                other => return Err(Error::InvalidSpec(format!("unknown statistic {other:?}"))),
            }
        }
        Ok(s)
    }
}

impl Default for StatSet {
    fn default() -> Self {
        StatSet::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n: u64,
    pub trials: u64,
    pub master_seed: u64,
    pub stats: StatSet,
}

impl TrialConfig {
    pub fn new(n: u64, trials: u64, master_seed: u64) -> Self {
        TrialConfig {
            n,
            trials,
            master_seed,
            stats: StatSet::ALL,
        }
    }

    fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidSpec("trials must be at least 1".into()));
        }
        if self.n >= u32::MAX as u64 {
            return Err(Error::InvalidSpec(format!("n = {} is too large", self.n)));
        }
        Ok(())
    }
}

/// Exact power sums of one per-level count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSums {
    pub sum: Vec<u128>,
    pub sum_sq: Vec<u128>,
}

impl LevelSums {
    fn add(&mut self, counts: &[u64]) {
        if self.sum.len() < counts.len() {
            self.sum.resize(counts.len(), 0);
            self.sum_sq.resize(counts.len(), 0);
        }
        for (k, &c) in counts.iter().enumerate() {
            let c = c as u128;
            self.sum[k] += c;
            self.sum_sq[k] += c * c;
        }
    }

    fn merge(&mut self, other: &LevelSums) {
        if self.sum.len() < other.sum.len() {
            self.sum.resize(other.sum.len(), 0);
            self.sum_sq.resize(other.sum.len(), 0);
        }
        for k in 0..other.sum.len() {
            self.sum[k] += other.sum[k];
            self.sum_sq[k] += other.sum_sq[k];
        }
    }

    pub fn levels(&self) -> usize {
        self.sum.len()
    }

    pub fn mean(&self, k: usize, trials: u64) -> f64 {
        self.sum.get(k).map_or(0.0, |&s| s as f64 / trials as f64)
    }

    /// Second central moment `sum (x - mean)^2`, computed exactly as
    /// `(T sum_sq - sum^2) / T` before the final rounding.
    pub fn m2(&self, k: usize, trials: u64) -> f64 {
        let (Some(&s), Some(&q)) = (self.sum.get(k), self.sum_sq.get(k)) else {
            return 0.0;
        };
        let t = trials as u128;
        match q.checked_mul(t) {
            Some(tq) => (tq - s * s) as f64 / trials as f64,
            None => {
                let s = rug::Integer::from(s);
                let num = rug::Integer::from(q) * t - s.square();
                (rug::Rational::from((num, t))).to_f64()
            }
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self, k: usize, trials: u64) -> f64 {
        if trials < 2 {
            return 0.0;
        }
        self.m2(k, trials) / (trials - 1) as f64
    }
}

/// Histogram over a nonnegative integer statistic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    fn add(&mut self, v: usize) {
        if self.counts.len() <= v {
            self.counts.resize(v + 1, 0);
        }
        self.counts[v] += 1;
    }

    fn merge(&mut self, other: &Histogram) {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return f64::NAN;
        }
        let s: u128 = self.counts.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
        s as f64 / t as f64
    }

    /// Fraction of observations whose value lies in `values`.
    pub fn mass_on(&self, values: impl IntoIterator<Item = usize>) -> f64 {
        let t = self.total();
        let hit: u64 = values.into_iter().filter_map(|v| self.counts.get(v)).sum();
        hit as f64 / t as f64
    }

    /// Fraction of observations `<= v`.
    pub fn cdf(&self, v: usize) -> f64 {
        self.mass_on(0..=v)
    }
}

/// Merged statistics of a batch of trees.
///
/// The saturation histogram is indexed by `S + 1` so that the empty tree's
/// `S = -1` has a slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub n: u64,
    pub trials: u64,
    pub external: LevelSums,
    pub internal: LevelSums,
    pub height: Histogram,
    pub saturation_shifted: Histogram,
    pub depth: Histogram,
}

impl EmpiricalMoments {
    fn empty(n: u64) -> Self {
        EmpiricalMoments {
            n,
            ..Default::default()
        }
    }

    fn record(&mut self, stats: StatSet, p: &ProfileSummary, depth: Option<u32>) {
        self.trials += 1;
        if stats.profile {
            self.external.add(&p.external);
            self.internal.add(&p.internal);
        }
        if stats.height {
            self.height.add(p.height as usize);
        }
        if stats.saturation {
            self.saturation_shifted.add((p.saturation + 1) as usize);
        }
        if let Some(d) = depth {
            self.depth.add(d as usize);
        }
    }

    /// Combines two shards of the same experiment.
    pub fn merge(mut self, other: &EmpiricalMoments) -> Self {
        debug_assert_eq!(self.n, other.n);
        self.trials += other.trials;
        self.external.merge(&other.external);
        self.internal.merge(&other.internal);
        self.height.merge(&other.height);
        self.saturation_shifted.merge(&other.saturation_shifted);
        self.depth.merge(&other.depth);
        self
    }

    pub fn mean_external(&self, k: usize) -> f64 {
        self.external.mean(k, self.trials)
    }

    pub fn var_external(&self, k: usize) -> f64 {
        self.external.variance(k, self.trials)
    }

    pub fn mean_internal(&self, k: usize) -> f64 {
        self.internal.mean(k, self.trials)
    }

    pub fn var_internal(&self, k: usize) -> f64 {
        self.internal.variance(k, self.trials)
    }

    pub fn mean_height(&self) -> f64 {
        self.height.mean()
    }

    /// Mean saturation level (undoing the histogram shift).
    pub fn mean_saturation(&self) -> f64 {
        self.saturation_shifted.mean() - 1.0
    }

    /// Fraction of trials with saturation level in `levels`.
    pub fn saturation_mass_on(&self, levels: impl IntoIterator<Item = i32>) -> f64 {
        self.saturation_shifted
            .mass_on(levels.into_iter().filter(|&s| s >= -1).map(|s| (s + 1) as usize))
    }
}

/// Builds the tree of trial `t` and returns its profile.
pub fn trial_profile(n: u64, master_seed: u64, trial: u64) -> ProfileSummary {
    profiles(&DstTree::from_stream(n as usize, master_seed, trial))
}

fn unsuccessful_draw(p: &ProfileSummary, master_seed: u64, trial: u64) -> u32 {
    let mut bits = StreamBits::for_record(master_seed, trial, p.n);
    let idx = bits.below(p.n + 1);
    external_depth_by_index(p, idx).expect("index below external count")
}

fn run_range(config: &TrialConfig, range: std::ops::Range<u64>) -> EmpiricalMoments {
    let mut acc = EmpiricalMoments::empty(config.n);
    for t in range {
        let p = trial_profile(config.n, config.master_seed, t);
        let d = config
            .stats
            .depth
            .then(|| unsuccessful_draw(&p, config.master_seed, t));
        acc.record(config.stats, &p, d);
    }
    acc
}

/// Runs `config.trials` trees in parallel and merges their statistics.
pub fn run_trials(config: &TrialConfig) -> Result<EmpiricalMoments> {
    config.check()?;
    let chunks = config.trials.div_ceil(CHUNK);
    let merged = (0..chunks)
        .into_par_iter()
        .map(|c| run_range(config, c * CHUNK..((c + 1) * CHUNK).min(config.trials)))
        .reduce(|| EmpiricalMoments::empty(config.n), |a, b| a.merge(&b));
    Ok(merged)
}

/// Runs the batch split into `shards` contiguous pieces, sequentially, and
/// merges them in order. Same result as [`run_trials`] for every `shards`.
pub fn run_trials_sharded(config: &TrialConfig, shards: u64) -> Result<EmpiricalMoments> {
    config.check()?;
    let shards = shards.clamp(1, config.trials);
    let per = config.trials.div_ceil(shards);
    let mut acc = EmpiricalMoments::empty(config.n);
    let mut start = 0;
    while start < config.trials {
        let end = (start + per).min(config.trials);
        acc = acc.merge(&run_range(config, start..end));
        start = end;
    }
    Ok(acc)
}

/// Applies `f` to every trial's profile in parallel, returning results in
/// trial order.
pub fn map_trials<T, F>(n: u64, trials: u64, master_seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, &ProfileSummary) -> T + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| f(t, &trial_profile(n, master_seed, t)))
        .collect()
}
