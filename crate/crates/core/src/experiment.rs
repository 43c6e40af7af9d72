//! Declarative end-to-end runs: Phase I subspace fitting, Phase II
//! monitoring under an optional attack, replication studies, and the
//! low-rank diagnostic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Attacker};
use crate::calibration::{find_limit, CalibrationConfig, CalibrationRecord};
use crate::error::{Error, Result};
use crate::fedsim::{
    make_iid_partition, mnist, ClientData, Dataset, Federation, GaussianMixture, MixtureSpec, ModelSpec, Population,
    TrainingConfig,
};
use crate::linalg::{
    components_for, explained_variance_profile, nested_variance_profiles, truncated_pca, UpdateBuffer,
};
use crate::monitor::{phase2_statistic, Allowance, CusumBank, RankCusum, Statistic, TraceRow, TraceWriter};
use crate::rng::{names, SeedTree};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Each client trains on its fixed local partition every round.
    #[default]
    Fixed,
    /// Each client draws a fresh sample from the population every round.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        mixture: MixtureSpec,
        samples_per_client: usize,
        #[serde(default)]
        mode: DataMode,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        samples_per_client: usize,
        #[serde(default)]
        mode: DataMode,
    },
}

impl DataSource {
    fn samples_per_client(&self) -> usize {
        match self {
            DataSource::Synthetic { samples_per_client, .. } | DataSource::Mnist { samples_per_client, .. } => {
                *samples_per_client
            }
        }
    }

    fn mode(&self) -> DataMode {
        match self {
            DataSource::Synthetic { mode, .. } | DataSource::Mnist { mode, .. } => *mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOneConfig {
    /// Number of clean start-up rounds `T0`.
    pub rounds: usize,
    /// Fraction of Phase I variance the subspace must explain.
    #[serde(default = "default_variance_target")]
    pub variance_target: f64,
}

fn default_variance_target() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfterAlarm {
    /// A chart stops at its first alarm.
    #[default]
    Stop,
    /// Restart the flagged client's chart and keep monitoring.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Statistics monitored side by side on the same training run; the first
    /// one drives exclusion when `exclude_flagged` is set.
    #[serde(default = "default_statistics")]
    pub statistics: Vec<Statistic>,
    pub reference: f64,
    /// Control limit; calibrated from `target_arl` when absent.
    #[serde(default)]
    pub limit: Option<f64>,
    #[serde(default = "default_target_arl")]
    pub target_arl: f64,
    #[serde(default)]
    pub allowance: Allowance,
    #[serde(default = "default_calibration_replications")]
    pub calibration_replications: usize,
    #[serde(default)]
    pub after_alarm: AfterAlarm,
    /// Drop a flagged client from aggregation (only with `after_alarm = "reset"`).
    #[serde(default)]
    pub exclude_flagged: bool,
}

fn default_statistics() -> Vec<Statistic> {
    vec![Statistic::SubspaceResidual]
}
fn default_target_arl() -> f64 {
    30.0
}
fn default_calibration_replications() -> usize {
    crate::calibration::DEFAULT_REPLICATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of the monitor and calibration streams; `training.rng_seed` roots
    /// everything on the training side (data, init, shuffles, attack noise).
    #[serde(with = "crate::rng::seed_format")]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub model: ModelSpec,
    pub data: DataSource,
    /// `training.rounds` caps the total number of rounds, Phase I included.
    pub training: TrainingConfig,
    pub phase1: PhaseOneConfig,
    pub monitor: MonitorConfig,
    #[serde(default = "AttackSpec::none")]
    pub attack: AttackSpec,
}

fn default_replications() -> usize {
    1
}

/// Built-in configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Over-parametrized one-hidden-layer MLP (p ≈ 2.25·10⁴) on a 10-class
    /// Gaussian mixture, K = 5, T0 = 50, fixed local data.
    Desk,
    /// Logistic regression (p = 650) with fresh data every round; cheap
    /// enough for large in-control replication studies.
    Compact,
}

impl ExperimentConfig {
    pub fn preset(which: Preset) -> Self {
        let mixture = MixtureSpec::default();
        let (model, mode) = match which {
            Preset::Desk => {
                (ModelSpec::Mlp { inputs: mixture.dim, hidden: 300, classes: mixture.classes }, DataMode::Fixed)
            }
            Preset::Compact => (ModelSpec::Logistic { inputs: mixture.dim, classes: mixture.classes }, DataMode::Fresh),
        };
        Self {
            seed: 2024,
            replications: 1,
            model,
            data: DataSource::Synthetic { mixture, samples_per_client: 128, mode },
            training: TrainingConfig {
                learning_rate: 0.001,
                epochs_per_round: 3,
                minibatch_size: 128,
                rounds: 300,
                client_count: 5,
                rng_seed: 2024,
            },
            phase1: PhaseOneConfig { rounds: 50, variance_target: 0.95 },
            monitor: MonitorConfig {
                statistics: default_statistics(),
                reference: 0.5,
                limit: None,
                target_arl: 30.0,
                allowance: Allowance::HalfReference,
                calibration_replications: crate::calibration::DEFAULT_REPLICATIONS,
                after_alarm: AfterAlarm::Stop,
                exclude_flagged: false,
            },
            attack: AttackSpec::none(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses a config, first applying `key.path=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for (key, value) in overrides {
            set_path(&mut doc, key, parse_scalar(value))?;
        }
        let cfg: Self =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let k = self.training.client_count;
        if self.replications == 0 {
            return Err(Error::config("replications must be positive"));
        }
        if self.phase1.rounds == 0 {
            return Err(Error::config("phase1.rounds (T0) must be at least 1"));
        }
        if self.training.rounds <= self.phase1.rounds {
            return Err(Error::config("training.rounds must exceed phase1.rounds"));
        }
        let vt = self.phase1.variance_target;
        if !(vt > 0.0 && vt <= 1.0) {
            return Err(Error::config("phase1.variance_target must lie in (0, 1]"));
        }
        if self.data.samples_per_client() == 0 {
            return Err(Error::config("samples_per_client must be positive"));
        }
        if self.monitor.statistics.is_empty() {
            return Err(Error::config("monitor.statistics must not be empty"));
        }
        let mut seen = self.monitor.statistics.clone();
        seen.dedup();
        if seen.len() != self.monitor.statistics.len() {
            return Err(Error::config("monitor.statistics contains duplicates"));
        }
        if !(self.monitor.reference > 0.0) {
            return Err(Error::config("monitor.reference must be positive"));
        }
        if let Some(h) = self.monitor.limit {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(Error::config("monitor.limit must be nonnegative"));
            }
        } else if !(self.monitor.target_arl > 1.0) {
            return Err(Error::config("monitor.target_arl must exceed 1"));
        }
        if self.monitor.exclude_flagged && self.monitor.after_alarm == AfterAlarm::Stop {
            return Err(Error::config("exclude_flagged requires after_alarm = \"reset\""));
        }
        if let DataSource::Synthetic { mixture, .. } = &self.data {
            if Some(mixture.classes) != self.model.classes() && self.model.classes().is_some() {
                return Err(Error::config("model classes differ from data classes"));
            }
            let input = match self.model {
                ModelSpec::Quadratic { dim } => dim,
                ModelSpec::Logistic { inputs, .. } | ModelSpec::Mlp { inputs, .. } => inputs,
            };
            if input != mixture.dim {
                return Err(Error::config("model input dimension differs from data dimension"));
            }
        }
        self.model.build()?;
        if !self.attack.is_none() && self.attack.start_round <= self.phase1.rounds {
            return Err(Error::config("attack.start_round must come after Phase I (> phase1.rounds)"));
        }
        self.attack.validate(k, self.model.classes())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse TOML's own literal syntax; anything unparsable is a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("bad key {key:?}")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// One monitored statistic's outcome in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub statistic: Statistic,
    /// Rounds from `T0 + 1` to the first alarm, inclusive; `None` if censored.
    pub run_length: Option<usize>,
    pub flagged: Option<usize>,
    /// Whether the flagged client is the attacked one (only under attack).
    pub correct: Option<bool>,
    pub alarms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub index: usize,
    /// Roots of this replication's training and monitor stream trees.
    pub training_seed: u64,
    pub monitor_seed: u64,
    pub subspace_dim: Option<usize>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub statistic: Statistic,
    pub alarmed: usize,
    pub censored: usize,
    /// Over alarmed replications only.
    pub mean_run_length: Option<f64>,
    pub std_run_length: Option<f64>,
    pub std_error: Option<f64>,
    /// Fraction of alarms that named the attacked client.
    pub correct_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub limit: f64,
    pub calibration: Option<CalibrationRecord>,
    pub parameter_count: usize,
    /// Explained-variance profile of the first replication's Phase I updates.
    pub phase1_profile: Vec<f64>,
    pub replications: Vec<ReplicationReport>,
    pub summaries: Vec<DetectionSummary>,
}

impl RunReport {
    pub fn summary(&self, statistic: Statistic) -> Option<&DetectionSummary> {
        self.summaries.iter().find(|s| s.statistic == statistic)
    }
}

/// Everything one replication produced, including in-memory traces.
#[derive(Debug, Clone)]
pub struct ReplicationRun {
    pub report: ReplicationReport,
    pub phase1_profile: Option<Vec<f64>>,
    /// One trace per monitored statistic, in config order.
    pub traces: Vec<Vec<TraceRow>>,
}

fn stat_name(s: Statistic) -> &'static str {
    match s {
        Statistic::SubspaceResidual => "subspace_residual",
        Statistic::UpdateNorm => "update_norm",
    }
}

/// File name of a statistic's trace inside a replication directory.
pub fn trace_file_name(cfg: &ExperimentConfig, statistic: Statistic) -> String {
    if cfg.monitor.statistics.first() == Some(&statistic) {
        "trace.csv".into()
    } else {
        format!("trace_{}.csv", stat_name(statistic))
    }
}

/// A validated config with its data loaded and control limit resolved.
pub struct Experiment {
    cfg: ExperimentConfig,
    training_seeds: SeedTree,
    monitor_seeds: SeedTree,
    population: Population,
    limit: f64,
    calibration: Option<CalibrationRecord>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedTree::new(cfg.training.rng_seed);
        let population = match &cfg.data {
            DataSource::Synthetic { mixture, .. } => {
                Population::Mixture(GaussianMixture::new(*mixture, &mut seeds.stream(names::POPULATION, &[]))?)
            }
            DataSource::Mnist { images, labels, .. } => {
                let d = mnist::load_mnist(images, labels)?;
                let model = cfg.model.build()?;
                if d.dim() != model.input_dim() {
                    return Err(Error::config(format!(
                        "MNIST features have dimension {} but the model expects {}",
                        d.dim(),
                        model.input_dim()
                    )));
                }
                Population::Pool(d)
            }
        };
        let (limit, calibration) = match cfg.monitor.limit {
            Some(h) => (h, None),
            None => {
                let mut c =
                    CalibrationConfig::new(cfg.training.client_count, cfg.monitor.reference, cfg.monitor.target_arl);
                c.replications = cfg.monitor.calibration_replications;
                c.allowance = cfg.monitor.allowance;
                c.rng_seed = cfg.seed;
                let search = find_limit(&c)?;
                log::info!(
                    "calibrated H = {:.4} (ARL {:.2} ± {:.2})",
                    search.limit,
                    search.estimate.mean,
                    search.estimate.std_error
                );
                (search.limit, Some(CalibrationRecord::new(&c, &search)))
            }
        };
        let monitor_seeds = SeedTree::new(cfg.seed);
        Ok(Self { cfg, training_seeds: seeds, monitor_seeds, population, limit, calibration })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    fn federation(&self, seeds: SeedTree) -> Result<Federation> {
        let k = self.cfg.training.client_count;
        let n = self.cfg.data.samples_per_client();
        let clients = match self.cfg.data.mode() {
            DataMode::Fresh => ClientData::Fresh { population: self.population.clone(), per_client: n },
            DataMode::Fixed => {
                let pooled: Dataset = self.population.draw(n * k, &mut seeds.stream(names::DATA, &[]))?;
                ClientData::Fixed(make_iid_partition(&pooled, k, &mut seeds.stream(names::PARTITION, &[]))?)
            }
        };
        Federation::new(self.cfg.model.build()?, self.cfg.training, clients, seeds)
    }

    fn attacker(&self, seeds: SeedTree) -> Attacker {
        Attacker::new(self.cfg.attack, self.cfg.model.classes().unwrap_or(0), seeds)
    }

    /// Phase I only: the update buffer of replication `index`.
    pub fn phase_one(&self, index: usize) -> Result<UpdateBuffer> {
        let seeds = self.training_seeds.child(names::REPLICATION, &[index as u64]);
        let mut fed = self.federation(seeds)?;
        let mut hook = self.attacker(seeds);
        let t0 = self.cfg.phase1.rounds;
        let mut buffer = UpdateBuffer::new(fed.model().parameter_count(), t0, fed.client_count());
        for _ in 0..t0 {
            for d in fed.run_round(&mut hook)?.deltas {
                buffer.push(d)?;
            }
        }
        Ok(buffer)
    }

    pub fn run_replication(&self, index: usize) -> Result<ReplicationRun> {
        let cfg = &self.cfg;
        let seeds = self.training_seeds.child(names::REPLICATION, &[index as u64]);
        let mut fed = self.federation(seeds)?;
        let mut hook = self.attacker(seeds);
        let monitor_seeds = self.monitor_seeds.child(names::REPLICATION, &[index as u64]);
        let k = fed.client_count();
        let t0 = cfg.phase1.rounds;

        let mut buffer = UpdateBuffer::new(fed.model().parameter_count(), t0, k);
        for _ in 0..t0 {
            for d in fed.run_round(&mut hook)?.deltas {
                buffer.push(d)?;
            }
        }
        if !buffer.has_signal() {
            return Err(Error::DegenerateTraining);
        }
        let needs_basis = cfg.monitor.statistics.contains(&Statistic::SubspaceResidual);
        let basis = needs_basis.then(|| truncated_pca(buffer.columns(), cfg.phase1.variance_target)).transpose()?;
        let phase1_profile = (index == 0).then(|| explained_variance_profile(buffer.columns())).transpose()?;
        drop(buffer);

        let mut monitors = cfg
            .monitor
            .statistics
            .iter()
            .map(|_| CusumBank::new(k, cfg.monitor.reference, self.limit, cfg.monitor.allowance).map(RankCusum::new))
            .collect::<Result<Vec<_>>>()?;
        let mut detections: Vec<Detection> = cfg
            .monitor
            .statistics
            .iter()
            .map(|&statistic| Detection { statistic, run_length: None, flagged: None, correct: None, alarms: 0 })
            .collect();
        let mut traces: Vec<Vec<TraceRow>> = vec![Vec::new(); monitors.len()];
        let mut active = vec![true; monitors.len()];

        for t in t0 + 1..=cfg.training.rounds {
            if !active.iter().any(|a| *a) {
                break;
            }
            let record = fed.run_round(&mut hook)?;
            for (i, &statistic) in cfg.monitor.statistics.iter().enumerate() {
                if !active[i] {
                    continue;
                }
                let residuals = record
                    .deltas
                    .iter()
                    .map(|d| phase2_statistic(d, basis.as_ref(), statistic))
                    .collect::<Result<Vec<_>>>()?;
                let mut rng = monitor_seeds.stream(names::MONITOR, &[i as u64, t as u64]);
                let (row, decision) = monitors[i].observe(t, &residuals, &mut rng)?;
                traces[i].push(row);
                if !decision.alarmed {
                    continue;
                }
                let det = &mut detections[i];
                det.alarms += 1;
                if det.run_length.is_none() {
                    det.run_length = Some(t - t0);
                    det.flagged = decision.flagged;
                    det.correct = (!cfg.attack.is_none()).then(|| decision.flagged == Some(cfg.attack.target_client));
                }
                match cfg.monitor.after_alarm {
                    AfterAlarm::Stop => active[i] = false,
                    AfterAlarm::Reset => {
                        let flagged = decision.flagged.expect("alarm names a client");
                        monitors[i].bank_mut().reset(flagged);
                        if cfg.monitor.exclude_flagged && i == 0 {
                            fed.exclude(flagged);
                        }
                    }
                }
            }
        }

        Ok(ReplicationRun {
            report: ReplicationReport {
                index,
                training_seed: seeds.root(),
                monitor_seed: monitor_seeds.root(),
                subspace_dim: basis.as_ref().map(|b| b.rank()),
                detections,
            },
            phase1_profile,
            traces,
        })
    }

    /// Runs every replication; when `out_dir` is given, writes
    /// `rep_NNNN/{report.json, trace*.csv}` plus a top-level `report.json`.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<RunReport> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        self.run_with_threads(out_dir, workers)
    }

    /// Like [`Experiment::run`] with an explicit worker count. Replications
    /// own their random streams, so the report does not depend on `threads`.
    pub fn run_with_threads(&self, out_dir: Option<&Path>, threads: usize) -> Result<RunReport> {
        let n = self.cfg.replications;
        let threads = threads.clamp(1, n);
        let one = |r: usize| -> Result<(ReplicationReport, Option<Vec<f64>>)> {
            let run = self.run_replication(r)?;
            if let Some(dir) = out_dir {
                self.write_replication(dir, &run)?;
            }
            Ok((run.report, run.phase1_profile))
        };
        type Slot = Option<Result<(ReplicationReport, Option<Vec<f64>>)>>;
        let mut results: Vec<Slot> = (0..n).map(|_| None).collect();
        if threads == 1 {
            for (r, slot) in results.iter_mut().enumerate() {
                *slot = Some(one(r));
            }
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|w| {
                        let one = &one;
                        scope.spawn(move || (w..n).step_by(threads).map(|r| (r, one(r))).collect::<Vec<_>>())
                    })
                    .collect();
                for h in handles {
                    for (r, res) in h.join().expect("replication worker panicked") {
                        results[r] = Some(res);
                    }
                }
            });
        }
        let mut replications = Vec::with_capacity(n);
        let mut phase1_profile = Vec::new();
        for res in results {
            let (report, profile) = res.expect("every replication ran")?;
            if let Some(p) = profile {
                phase1_profile = p;
            }
            replications.push(report);
        }
        let summaries = self.cfg.monitor.statistics.iter().map(|&s| summarize(s, &replications)).collect();
        let report = RunReport {
            config: self.cfg.clone(),
            limit: self.limit,
            calibration: self.calibration,
            parameter_count: self.cfg.model.parameter_count(),
            phase1_profile,
            replications,
            summaries,
        };
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        Ok(report)
    }

    fn write_replication(&self, dir: &Path, run: &ReplicationRun) -> Result<()> {
        let rep_dir = dir.join(format!("rep_{:04}", run.report.index));
        fs::create_dir_all(&rep_dir)?;
        fs::write(rep_dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
        let k = self.cfg.training.client_count;
        for (&stat, rows) in self.cfg.monitor.statistics.iter().zip(&run.traces) {
            let mut w = TraceWriter::create(rep_dir.join(trace_file_name(&self.cfg, stat)), k)?;
            for row in rows {
                w.write(row)?;
            }
            w.finish()?;
        }
        Ok(())
    }
}

fn summarize(statistic: Statistic, reps: &[ReplicationReport]) -> DetectionSummary {
    let dets: Vec<&Detection> =
        reps.iter().flat_map(|r| r.detections.iter().filter(|d| d.statistic == statistic)).collect();
    let lengths: Vec<f64> = dets.iter().filter_map(|d| d.run_length.map(|l| l as f64)).collect();
    let n = lengths.len();
    let mean = (n > 0).then(|| lengths.iter().sum::<f64>() / n as f64);
    let std = mean
        .filter(|_| n > 1)
        .map(|m| (lengths.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / (n - 1) as f64).sqrt());
    let judged: Vec<bool> = dets.iter().filter_map(|d| d.correct).collect();
    DetectionSummary {
        statistic,
        alarmed: n,
        censored: dets.len() - n,
        mean_run_length: mean,
        std_run_length: std,
        std_error: std.map(|s| s / (n as f64).sqrt()),
        correct_rate: (!judged.is_empty()).then(|| judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64),
    }
}

pub fn run_experiment(cfg: ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    Experiment::new(cfg)?.run(out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankRow {
    /// Rounds `T` included.
    pub rounds: usize,
    /// Update columns `T·K`.
    pub columns: usize,
    pub components_90: usize,
    pub components_95: usize,
    pub components_99: usize,
}

/// Components needed for 90/95/99 % of Phase I variance using the first
/// `T·K` updates, for `T = 1..=T0`.
pub fn run_lowrank_diagnostic(cfg: &ExperimentConfig) -> Result<Vec<LowRankRow>> {
    if !cfg.attack.is_none() {
        return Err(Error::config("the low-rank diagnostic runs without an attack"));
    }
    let mut cfg = cfg.clone();
    // Phase I needs no control limit.
    cfg.monitor.limit.get_or_insert(1.0);
    let exp = Experiment::new(cfg)?;
    let buffer = exp.phase_one(0)?;
    let k = exp.cfg.training.client_count;
    let profiles = nested_variance_profiles(buffer.columns(), k)?;
    Ok(profiles
        .iter()
        .enumerate()
        .map(|(i, p)| LowRankRow {
            rounds: i + 1,
            columns: (i + 1) * k,
            components_90: components_for(p, 0.90),
            components_95: components_for(p, 0.95),
            components_99: components_for(p, 0.99),
        })
        .collect())
}
