//! Phase II detection.
//!
//! Each round the server reduces every client's update to one scalar
//! (subspace residual, or plain update norm for the benchmark), ranks the
//! K scalars, maps each rank to an exactly standard-normal score
//! `Φ⁻¹((rank − U)/K)` and feeds the scores to K one-sided CUSUM charts.
//! An alarm is raised when the largest chart exceeds the control limit.

mod trace;

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use trace::{read_trace, replay_trace, ReplayReport, TraceRow, TraceWriter};

use crate::error::{Error, Result};
use crate::linalg::{project_residual, SubspaceBasis};
use crate::rng::Stream;

/// Ranks of one round's statistics; entry `k` is client `k+1`'s rank, 1 = smallest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let k = ranks.len();
        let mut seen = vec![false; k];
        for &r in &ranks {
            if r == 0 || r > k || std::mem::replace(&mut seen[r - 1], true) {
                return Err(Error::InvalidUpdate(format!("{ranks:?} is not a permutation of 1..={k}")));
            }
        }
        Ok(Self(ranks))
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lexicographic index in 0..K! of the permutation.
    pub fn permutation_index(&self) -> usize {
        let k = self.0.len();
        let mut idx = 0;
        for i in 0..k {
            let smaller_after = self.0[i + 1..].iter().filter(|&&r| r < self.0[i]).count();
            idx = idx * (k - i) + smaller_after;
        }
        idx
    }
}

/// Ascending ranks; tied values are ordered by a uniformly random permutation.
pub fn rank_residuals(residuals: &[f64], rng: &mut Stream) -> Result<RankVector> {
    if residuals.len() < 2 {
        return Err(Error::config("ranking needs at least two clients"));
    }
    if let Some(k) = residuals.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFiniteResidual(k + 1));
    }
    let keys: Vec<u64> = residuals.iter().map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]).then(keys[a].cmp(&keys[b])));
    let mut ranks = vec![0; residuals.len()];
    for (pos, &client) in order.iter().enumerate() {
        ranks[client] = pos + 1;
    }
    Ok(RankVector(ranks))
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `Φ⁻¹((rank − u)/k)` for a given `u ∈ (0, 1)`.
pub fn normal_score_with(rank: usize, k: usize, u: f64) -> f64 {
    debug_assert!((1..=k).contains(&rank));
    normal_quantile((rank as f64 - u) / k as f64)
}

/// Randomized normal score; draws one `U ~ Uniform(0, 1)` from `rng`.
pub fn normal_score(rank: usize, k: usize, rng: &mut Stream) -> f64 {
    let u: f64 = rng.sample(Open01);
    normal_score_with(rank, k, u)
}

/// What the chart subtracts from each score before accumulating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allowance {
    /// `S ← (S + Z − d/2)₊`
    #[default]
    HalfReference,
    /// `S ← (S + Z − d)₊`; the reference value is itself the allowance.
    FullReference,
}

impl Allowance {
    pub fn of(self, reference: f64) -> f64 {
        match self {
            Allowance::HalfReference => reference / 2.0,
            Allowance::FullReference => reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorDecision {
    pub round: usize,
    pub alarmed: bool,
    /// 1-based client id of the largest chart, only when alarmed.
    pub flagged: Option<usize>,
    /// `max_k S^(k)`
    pub statistic: f64,
}

/// Per-client one-sided CUSUM charts sharing one control limit.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumBank {
    stats: Vec<f64>,
    reference: f64,
    limit: f64,
    allowance: Allowance,
    round: usize,
}

impl CusumBank {
    pub fn new(clients: usize, reference: f64, limit: f64, allowance: Allowance) -> Result<Self> {
        if clients == 0 {
            return Err(Error::config("CUSUM bank needs at least one client"));
        }
        if !(reference > 0.0 && reference.is_finite()) {
            return Err(Error::config(format!("reference value d = {reference} must be positive")));
        }
        if !(limit >= 0.0 && limit.is_finite()) {
            return Err(Error::config(format!("control limit H = {limit} must be nonnegative")));
        }
        Ok(Self { stats: vec![0.0; clients], reference, limit, allowance, round: 0 })
    }

    /// Starts from given statistics (all must be ≥ 0).
    pub fn with_stats(mut self, stats: Vec<f64>) -> Result<Self> {
        if stats.len() != self.stats.len() || stats.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("initial CUSUM statistics must be K nonnegative values"));
        }
        self.stats = stats;
        Ok(self)
    }

    pub fn stats(&self) -> &[f64] {
        &self.stats
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn allowance(&self) -> Allowance {
        self.allowance
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn max_stat(&self) -> f64 {
        self.stats.iter().copied().fold(0.0, f64::max)
    }

    /// Restarts one client's chart (1-based id).
    pub fn reset(&mut self, client: usize) {
        self.stats[client - 1] = 0.0;
    }

    /// Advances every chart by one score and applies the alarm rule
    /// `max_k S^(k) > H`. Ties for the maximum go to the lowest client id.
    pub fn step(&mut self, scores: &[f64]) -> Result<MonitorDecision> {
        if scores.len() != self.stats.len() {
            return Err(Error::DimensionMismatch { expected: self.stats.len(), got: scores.len() });
        }
        let k = self.allowance.of(self.reference);
        for (s, z) in self.stats.iter_mut().zip(scores) {
            *s = (*s + z - k).max(0.0);
        }
        self.round += 1;
        let (best, statistic) =
            self.stats
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let alarmed = statistic > self.limit;
        Ok(MonitorDecision { round: self.round, alarmed, flagged: alarmed.then_some(best + 1), statistic })
    }
}

/// Per-client scalar fed to the rank transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Distance of the update from the Phase I principal subspace.
    #[default]
    SubspaceResidual,
    /// Euclidean norm of the update (benchmark; no Phase I needed).
    UpdateNorm,
}

pub fn phase2_statistic(delta: &[f64], basis: Option<&SubspaceBasis>, variant: Statistic) -> Result<f64> {
    match variant {
        Statistic::SubspaceResidual => {
            let basis = basis.ok_or_else(|| Error::config("subspace residual requires a fitted basis"))?;
            project_residual(delta, basis)
        }
        Statistic::UpdateNorm => Ok(delta.iter().map(|v| v * v).sum::<f64>().sqrt()),
    }
}

/// Rank transform, normal scores, and CUSUM bank chained together.
#[derive(Debug, Clone)]
pub struct RankCusum {
    bank: CusumBank,
}

impl RankCusum {
    pub fn new(bank: CusumBank) -> Self {
        Self { bank }
    }

    pub fn bank(&self) -> &CusumBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut CusumBank {
        &mut self.bank
    }

    /// Processes one round of statistics. `round` is the absolute FL round
    /// recorded in the trace. Uses `rng` for tie-breaking and the K uniforms.
    pub fn observe(
        &mut self,
        round: usize,
        residuals: &[f64],
        rng: &mut Stream,
    ) -> Result<(TraceRow, MonitorDecision)> {
        let k = residuals.len();
        let ranks = rank_residuals(residuals, rng)?;
        let scores: Vec<f64> = ranks.ranks().iter().map(|&r| normal_score(r, k, rng)).collect();
        let decision = self.bank.step(&scores)?;
        let row = TraceRow {
            round,
            residuals: residuals.to_vec(),
            ranks: ranks.ranks().to_vec(),
            scores,
            stats: self.bank.stats().to_vec(),
            max_stat: decision.statistic,
            alarmed: decision.alarmed,
            flagged: decision.flagged,
        };
        Ok((row, decision))
    }
}
