//! `fedmon`: calibrate control limits, run monitoring experiments, inspect
//! Phase I rank and audit monitor traces.
//!
//! Exit codes: 0 success, 1 I/O failure or an inconsistent trace,
//! 2 configuration error, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedmon_core::calibration::CalibrationRecord;
use fedmon_core::experiment::{run_lowrank_diagnostic, Experiment, ExperimentConfig, Preset, RunReport};
use fedmon_core::monitor::{read_trace, replay_trace};
use fedmon_core::{find_limit, Allowance, CalibrationConfig, Error};

#[derive(Parser, Debug)]
#[command(name = "fedmon", version, about = "Rank-based CUSUM monitoring of federated learning clients")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Find the control limit H that gives the target in-control ARL; prints a JSON record.
    Calibrate(CalibrateArgs),
    /// Run Phase I and Phase II for every replication and write reports and traces.
    Run(RunArgs),
    /// Components needed for 90/95/99% of Phase I variance, per round (CSV).
    Lowrank(LowrankArgs),
    /// Recompute a monitor trace row by row and report the first inconsistency.
    ReplayTrace(ReplayArgs),
    /// Print a preset configuration as TOML.
    ShowConfig(ConfigArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AllowanceArg {
    /// Subtract d/2 from each score.
    Half,
    /// Subtract d from each score.
    Full,
}

impl From<AllowanceArg> for Allowance {
    fn from(a: AllowanceArg) -> Self {
        match a {
            AllowanceArg::Half => Allowance::HalfReference,
            AllowanceArg::Full => Allowance::FullReference,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PresetArg {
    Desk,
    Compact,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(short = 'k', long, default_value_t = 5)]
    clients: usize,
    /// Reference value d.
    #[arg(short, long, default_value_t = 0.5)]
    reference: f64,
    #[arg(long, default_value_t = 30.0)]
    target_arl: f64,
    /// Monte-Carlo replications M.
    #[arg(short = 'm', long, default_value_t = 10_000)]
    replications: usize,
    #[arg(long, value_enum, default_value = "half")]
    allowance: AllowanceArg,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the record to this file.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config; overrides the preset.
    #[arg(short, long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(short, long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Override a config key, e.g. `--set monitor.reference=0.4`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to `<output root>/<name>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, env = "FEDMON_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[arg(long, default_value = "run")]
    name: String,
    /// Worker threads for replications (default: all cores).
    #[arg(short = 'j', long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct LowrankArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Write CSV here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    trace: PathBuf,
    /// Top-level `report.json` of the run; supplies d, H, allowance and reset mode.
    #[arg(long, required_unless_present_all = ["reference", "limit"])]
    report: Option<PathBuf>,
    #[arg(short, long, conflicts_with = "report")]
    reference: Option<f64>,
    #[arg(short = 'H', long, conflicts_with = "report")]
    limit: Option<f64>,
    #[arg(long, value_enum, default_value = "half", conflicts_with = "report")]
    allowance: AllowanceArg,
    /// Charts of flagged clients restart at zero after an alarm.
    #[arg(long, conflicts_with = "report")]
    reset: bool,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if k.trim().is_empty() {
        return Err("empty key".into());
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => {
                let preset = match self.preset {
                    PresetArg::Desk => Preset::Desk,
                    PresetArg::Compact => Preset::Compact,
                };
                let text = ExperimentConfig::preset(preset).to_toml()?;
                ExperimentConfig::from_toml_with_overrides(&text, &self.overrides)
            }
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<(), Error> {
    let mut cfg = CalibrationConfig::new(args.clients, args.reference, args.target_arl);
    cfg.replications = args.replications;
    cfg.allowance = args.allowance.into();
    cfg.tolerance = args.tolerance;
    cfg.rng_seed = args.seed;
    let search = find_limit(&cfg)?;
    let record = CalibrationRecord::new(&cfg, &search);
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&record)?)?;
    }
    print_json(&record)
}

fn setup(cfg: ExperimentConfig) -> Result<Experiment, Error> {
    // A missing data file is a configuration problem, not an I/O crash.
    Experiment::new(cfg).map_err(|e| match e {
        Error::Io(io) => Error::Config(io.to_string()),
        other => other,
    })
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let exp = setup(args.config.load()?)?;
    let dir = args.out.clone().unwrap_or_else(|| args.output_root.join(&args.name));
    let report = match args.threads {
        Some(t) => exp.run_with_threads(Some(&dir), t)?,
        None => exp.run(Some(&dir))?,
    };
    eprintln!("wrote {}", dir.join("report.json").display());
    print_json(&Summary::from(&report))
}

#[derive(serde::Serialize)]
struct Summary<'a> {
    limit: f64,
    replications: usize,
    summaries: &'a [fedmon_core::experiment::DetectionSummary],
}

impl<'a> From<&'a RunReport> for Summary<'a> {
    fn from(r: &'a RunReport) -> Self {
        Summary { limit: r.limit, replications: r.replications.len(), summaries: &r.summaries }
    }
}

fn lowrank(args: &LowrankArgs) -> Result<(), Error> {
    let rows = run_lowrank_diagnostic(&args.config.load()?)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn replay_params(args: &ReplayArgs) -> Result<(f64, f64, Allowance, bool), Error> {
    match &args.report {
        Some(path) => {
            let report: RunReport =
                serde_json::from_slice(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let m = &report.config.monitor;
            let reset = m.after_alarm == fedmon_core::experiment::AfterAlarm::Reset;
            Ok((m.reference, report.limit, m.allowance, reset))
        }
        None => Ok((
            args.reference.expect("clap requires it"),
            args.limit.expect("clap requires it"),
            args.allowance.into(),
            args.reset,
        )),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Returns whether the trace replayed cleanly.
fn replay(args: &ReplayArgs) -> Result<bool, Error> {
    let (reference, limit, allowance, reset) = replay_params(args)?;
    if !args.trace.exists() {
        return Err(Error::Config(format!("{}: no such file", args.trace.display())));
    }
    let rows = read_trace(&args.trace)?;
    let report = replay_trace(&rows, reference, limit, allowance, reset);
    print_json(&report)?;
    Ok(report.is_consistent())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match &cli.command {
        Command::Calibrate(a) => calibrate(a).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Lowrank(a) => lowrank(a).map(|_| true),
        Command::ReplayTrace(a) => replay(a),
        Command::ShowConfig(a) => a.load().and_then(|c| c.to_toml()).map(|t| {
            print!("{t}");
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: trace is inconsistent with the CUSUM recursion");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
