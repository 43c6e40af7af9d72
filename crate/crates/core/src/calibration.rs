//! Control-limit calibration by Monte-Carlo simulation of the in-control chart.
//!
//! Without an attack, each round's rank vector is a uniform random
//! permutation independent across rounds, so the in-control run-length
//! distribution depends only on `K`, `d` and `H` and can be simulated
//! without any federated training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitor::{normal_score_with, Allowance};
use crate::rng::{names, SeedTree};

pub const DEFAULT_REPLICATIONS: usize = 10_000;
pub const DEFAULT_MAX_ROUNDS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub clients: usize,
    pub reference: f64,
    pub target_arl: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_bracket")]
    pub bracket: (f64, f64),
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub allowance: Allowance,
    #[serde(default)]
    #[serde(with = "crate::rng::seed_format")]
    pub rng_seed: u64,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}
fn default_max_rounds() -> usize {
    DEFAULT_MAX_ROUNDS
}
fn default_bracket() -> (f64, f64) {
    (1.0, 8.0)
}
fn default_tolerance() -> f64 {
    1e-3
}

impl CalibrationConfig {
    pub fn new(clients: usize, reference: f64, target_arl: f64) -> Self {
        Self {
            clients,
            reference,
            target_arl,
            replications: DEFAULT_REPLICATIONS,
            max_rounds: DEFAULT_MAX_ROUNDS,
            bracket: default_bracket(),
            tolerance: default_tolerance(),
            allowance: Allowance::default(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::config("calibration needs at least two clients"));
        }
        if !(self.reference > 0.0 && self.reference.is_finite()) {
            return Err(Error::config("reference value d must be positive"));
        }
        if !(self.target_arl > 1.0 && self.target_arl.is_finite()) {
            return Err(Error::config("target ARL must exceed 1"));
        }
        if self.replications == 0 || self.max_rounds == 0 {
            return Err(Error::config("replications and max_rounds must be positive"));
        }
        let (lo, hi) = self.bracket;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::config("bracket must satisfy 0 ≤ H_lo < H_hi"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        Ok(())
    }

    fn simulator(&self) -> ArlSimulator {
        ArlSimulator {
            clients: self.clients,
            reference: self.reference,
            allowance: self.allowance,
            replications: self.replications,
            max_rounds: self.max_rounds,
            seeds: SeedTree::new(self.rng_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArlEstimate {
    pub limit: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    pub replications: usize,
    /// Replications that reached the round cap without alarming.
    pub censored: usize,
}

/// In-control run-length simulator. Replication `m` always consumes the same
/// random stream, so estimates for different limits use common random numbers
/// and the run length of every replication is nondecreasing in `H`.
#[derive(Debug, Clone)]
pub struct ArlSimulator {
    pub clients: usize,
    pub reference: f64,
    pub allowance: Allowance,
    pub replications: usize,
    pub max_rounds: usize,
    pub seeds: SeedTree,
}

impl ArlSimulator {
    /// Rounds until `max_k S^(k) > limit`, counting from 1; `None` if censored at `cap`.
    pub fn run_length(&self, replication: usize, limit: f64, cap: usize) -> Option<usize> {
        let k = self.clients;
        let allow = self.allowance.of(self.reference);
        let mut rng = self.seeds.stream(names::CALIBRATION, &[replication as u64]);
        let mut stats = vec![0.0f64; k];
        let mut perm: Vec<usize> = (1..=k).collect();
        for t in 1..=cap {
            perm.shuffle(&mut rng);
            let mut max = 0.0f64;
            for (s, &rank) in stats.iter_mut().zip(&perm) {
                let u: f64 = rng.sample(Open01);
                *s = (*s + normal_score_with(rank, k, u) - allow).max(0.0);
                max = max.max(*s);
            }
            if max > limit {
                return Some(t);
            }
        }
        None
    }

    fn estimate_capped(&self, limit: f64, cap: usize) -> ArlEstimate {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut censored = 0;
        for m in 0..self.replications {
            let r = self.run_length(m, limit, cap).unwrap_or_else(|| {
                censored += 1;
                cap
            }) as f64;
            sum += r;
            sum_sq += r * r;
        }
        let n = self.replications as f64;
        let mean = sum / n;
        let var = if self.replications > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        let std_dev = var.sqrt();
        ArlEstimate { limit, mean, std_dev, std_error: std_dev / n.sqrt(), replications: self.replications, censored }
    }

    pub fn estimate(&self, limit: f64) -> ArlEstimate {
        let est = self.estimate_capped(limit, self.max_rounds);
        if est.censored > 0 {
            log::warn!(
                "{} of {} replications censored at {} rounds for H = {limit}; ARL is biased low",
                est.censored,
                est.replications,
                self.max_rounds
            );
        }
        est
    }
}

/// Monte-Carlo in-control ARL of the rank-CUSUM chart with limit `limit`.
pub fn estimate_arl(
    limit: f64,
    clients: usize,
    reference: f64,
    replications: usize,
    rng_seed: u64,
) -> Result<ArlEstimate> {
    let mut cfg = CalibrationConfig::new(clients, reference, 2.0);
    cfg.replications = replications;
    cfg.rng_seed = rng_seed;
    cfg.validate()?;
    if !(limit >= 0.0 && limit.is_finite()) {
        return Err(Error::config("control limit must be nonnegative"));
    }
    Ok(cfg.simulator().estimate(limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitSearch {
    pub limit: f64,
    /// Full-cap estimate at the returned limit.
    pub estimate: ArlEstimate,
    pub evaluations: usize,
}

/// The JSON record emitted by the `calibrate` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    #[serde(rename = "H")]
    pub limit: f64,
    pub arl: f64,
    pub std_error: f64,
    #[serde(rename = "M")]
    pub replications: usize,
    pub d: f64,
    #[serde(rename = "K")]
    pub clients: usize,
    pub allowance: Allowance,
    pub target_arl: f64,
    pub censored: usize,
}

impl CalibrationRecord {
    pub fn new(cfg: &CalibrationConfig, search: &LimitSearch) -> Self {
        Self {
            limit: search.limit,
            arl: search.estimate.mean,
            std_error: search.estimate.std_error,
            replications: search.estimate.replications,
            d: cfg.reference,
            clients: cfg.clients,
            allowance: cfg.allowance,
            target_arl: cfg.target_arl,
            censored: search.estimate.censored,
        }
    }
}

/// Bisection on `H` for the limit whose in-control ARL equals the target.
///
/// The bracket is widened automatically (at most 60 doublings). The search
/// stops when the bracket is narrower than the tolerance or the estimate at
/// the midpoint lies within two standard errors of the target.
pub fn find_limit(cfg: &CalibrationConfig) -> Result<LimitSearch> {
    cfg.validate()?;
    let sim = cfg.simulator();
    let target = cfg.target_arl;
    // Run lengths beyond this many multiples of the target are vanishingly
    // rare and only tell us the ARL is too large.
    let search_cap = cfg.max_rounds.min((target * 100.0).ceil() as usize).max(1);
    let mut evaluations = 0;
    let mut eval = |h: f64| {
        evaluations += 1;
        let est = sim.estimate_capped(h, search_cap);
        if est.censored > 0 && est.mean < target && search_cap < cfg.max_rounds {
            sim.estimate_capped(h, cfg.max_rounds)
        } else {
            est
        }
    };

    let (mut lo, mut hi) = cfg.bracket;
    let mut halvings = 0;
    while eval(lo).mean >= target {
        if lo == 0.0 {
            // Even H = 0 runs at least as long as the target.
            let estimate = sim.estimate(0.0);
            return Ok(LimitSearch { limit: 0.0, estimate, evaluations });
        }
        hi = lo;
        lo = if halvings >= 60 { 0.0 } else { lo / 2.0 };
        halvings += 1;
    }
    let mut doublings = 0;
    while eval(hi).mean <= target {
        if doublings == 60 {
            return Err(Error::Calibration(format!("no limit up to {hi} reaches ARL {target}")));
        }
        lo = hi;
        hi *= 2.0;
        doublings += 1;
    }

    let mut limit = 0.5 * (lo + hi);
    while hi - lo >= cfg.tolerance {
        limit = 0.5 * (lo + hi);
        let est = eval(limit);
        if (est.mean - target).abs() <= 2.0 * est.std_error {
            break;
        }
        if est.mean < target {
            lo = limit;
        } else {
            hi = limit;
        }
        limit = 0.5 * (lo + hi);
    }

    let estimate = sim.estimate(limit);
    evaluations += 1;
    if estimate.censored > 0 {
        return Err(Error::Calibration(format!(
            "{} of {} replications censored at {} rounds; raise max_rounds",
            estimate.censored, estimate.replications, cfg.max_rounds
        )));
    }
    Ok(LimitSearch { limit, estimate, evaluations })
}
