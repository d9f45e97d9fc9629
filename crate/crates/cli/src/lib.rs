//! Experiment driver: every subcommand writes its outputs plus a `manifest.json`
//! into `--out`, and `rerun` replays a manifest into a fresh directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusesim::{Calibration, PhaseKind, Setting};
use serde::{Deserialize, Serialize};

mod commands;
pub mod manifest;

pub use manifest::RunManifest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SIMULATION: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;
pub const EXIT_CALIBRATION: u8 = 5;
pub const EXIT_IO: u8 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "fusesim",
    version,
    about = "Mobile DVFS simulator for on-device LLM inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Run one phase and write its per-tick trace.
    Simulate(SimulateArgs),
    /// Profile every pinned combination of a grid for one phase.
    Sweep(SweepArgs),
    /// Two-step frequency search for one phase.
    Search(SearchArgs),
    /// Build the six-entry runtime lookup table.
    Table(TableArgs),
    /// Serve a request set under a policy.
    Replay(ReplayArgs),
    /// Pareto fronts and comparison tables from earlier outputs.
    Report(ReportArgs),
    /// Refit the performance model to the calibration's anchors.
    Calibrate(CalibrateArgs),
    /// Re-execute the command recorded in a manifest.
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Sweep(_) => "sweep",
            Command::Search(_) => "search",
            Command::Table(_) => "table",
            Command::Replay(_) => "replay",
            Command::Report(_) => "report",
            Command::Calibrate(_) => "calibrate",
            Command::Rerun(_) => "rerun",
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::Simulate(a) => Some(&mut a.common),
            Command::Sweep(a) => Some(&mut a.common),
            Command::Search(a) => Some(&mut a.common),
            Command::Table(a) => Some(&mut a.common),
            Command::Replay(a) => Some(&mut a.common),
            Command::Report(a) => Some(&mut a.common),
            Command::Calibrate(a) => Some(&mut a.common),
            Command::Rerun(_) => None,
        }
    }

    /// Rewrites every input path as absolute so a manifest is usable from any directory.
    fn absolutize(&mut self) -> std::io::Result<()> {
        fn abs(p: &mut PathBuf) -> std::io::Result<()> {
            *p = std::path::absolute(&*p)?;
            Ok(())
        }
        fn abs_opt(p: &mut Option<PathBuf>) -> std::io::Result<()> {
            p.as_mut().map_or(Ok(()), abs)
        }
        if let Some(c) = self.common_mut() {
            abs_opt(&mut c.calib)?;
            abs(&mut c.out)?;
        }
        match self {
            Command::Replay(a) => {
                abs_opt(&mut a.requests)?;
                abs_opt(&mut a.table)?;
            }
            Command::Report(a) => {
                abs_opt(&mut a.profiles)?;
                abs_opt(&mut a.base)?;
                abs_opt(&mut a.other)?;
            }
            Command::Rerun(a) => {
                abs(&mut a.manifest)?;
                abs_opt(&mut a.out)?;
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// Calibration TOML; the built-in default when omitted.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: GovernorOverrides,
}

/// Governor parameters that replace the calibration file's values.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct GovernorOverrides {
    /// GPU governor lower utilization band, applied to every row but the lowest.
    #[arg(long, requires = "gpu_band_hi")]
    pub gpu_band_lo: Option<f64>,
    /// GPU governor upper utilization band, applied to every row but the highest.
    #[arg(long, requires = "gpu_band_lo")]
    pub gpu_band_hi: Option<f64>,
    /// GPU governor evaluation window.
    #[arg(long)]
    pub gpu_window_ms: Option<u32>,
    /// CPU load decay half-life.
    #[arg(long)]
    pub cpu_half_life_ms: Option<f64>,
    /// CPU frequency headroom factor over tracked load.
    #[arg(long)]
    pub cpu_headroom: Option<f64>,
    /// Memory governor target load.
    #[arg(long)]
    pub mem_target_load: Option<f64>,
    /// Memory governor sampling period.
    #[arg(long)]
    pub mem_period_ms: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseArg {
    Prefill,
    Decode,
}

impl From<PhaseArg> for PhaseKind {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Prefill => PhaseKind::Prefill,
            PhaseArg::Decode => PhaseKind::Decode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PhaseOpts {
    #[arg(long, value_enum, default_value = "decode")]
    pub phase: PhaseArg,
    /// Prompt tokens (prefill).
    #[arg(long, default_value_t = 32)]
    pub np: u32,
    /// Generated tokens (decode).
    #[arg(long, default_value_t = 32)]
    pub nd: u32,
}

impl PhaseOpts {
    pub fn kind(&self) -> PhaseKind {
        self.phase.into()
    }

    pub fn tokens(&self) -> u32 {
        match self.phase {
            PhaseArg::Prefill => self.np,
            PhaseArg::Decode => self.nd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpiralArg {
    /// GPU pinned at its maximum, released at `--unpin-at`.
    Gpu,
    /// CPU pinned at 2188 MHz, released at `--unpin-at`.
    Cpu,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub phase: PhaseOpts,
    /// MHz or `gov`.
    #[arg(long, default_value = "gov")]
    pub pin_cpu: Setting,
    #[arg(long, default_value = "gov")]
    pub pin_gpu: Setting,
    #[arg(long, default_value = "gov")]
    pub pin_mem: Setting,
    /// Release all pins at this simulated time.
    #[arg(long)]
    pub unpin_at: Option<u64>,
    /// Pin preset for the governor feedback scenarios; implies `--unpin-at 250` unless given.
    #[arg(long, value_enum, conflicts_with_all = ["pin_cpu", "pin_gpu", "pin_mem"])]
    pub spiral: Option<SpiralArg>,
    /// Stop after this much simulated time even if tokens remain.
    #[arg(long)]
    pub max_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridArg {
    /// CPU × GPU × memory.
    Full,
    /// CPU × GPU with memory governed.
    CpuGpu,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub phase: PhaseOpts,
    #[arg(long, value_enum, default_value = "full")]
    pub grid: GridArg,
    /// Parallel simulations; 0 uses one per core.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalArg {
    G1,
    G2,
}

/// Goal selection; the missing bound defaults to the governors' own measurement.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GoalOpts {
    #[arg(long, value_enum)]
    pub goal: GoalArg,
    /// Energy-per-token budget for g1.
    #[arg(long)]
    pub budget_mj: Option<f64>,
    /// Latency target for g2 (TTFT for prefill, TPOT for decode).
    #[arg(long)]
    pub target_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub phase: PhaseOpts,
    #[command(flatten)]
    pub goal: GoalOpts,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TableArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub goal: GoalOpts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Gov,
    Fuse,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "gov")]
    pub policy: PolicyArg,
    /// Lookup table for `--policy fuse`.
    #[arg(long, conflicts_with = "goal")]
    pub table: Option<PathBuf>,
    /// Build the lookup table in-process with governor-derived bounds.
    #[arg(long, value_enum)]
    pub goal: Option<GoalArg>,
    /// Request file, one JSON object per line; synthesized when omitted.
    #[arg(long)]
    pub requests: Option<PathBuf>,
    /// Number of synthesized requests.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Profile CSV from `sweep`.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Baseline replay CSV.
    #[arg(long, requires = "other")]
    pub base: Option<PathBuf>,
    /// Replay CSV compared against `--base`.
    #[arg(long, requires = "base")]
    pub other: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; the recorded one when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fusesim::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => core_exit_code(e),
            CliError::Io(_) | CliError::Json(_) | CliError::Csv(_) => EXIT_IO,
        }
    }
}

pub fn core_exit_code(e: &fusesim::Error) -> u8 {
    use fusesim::Error as E;
    match e {
        E::NotInTable { .. } | E::InvalidParams(_) | E::RequestMismatch(_) | E::Empty(_) => {
            EXIT_USAGE
        }
        E::NonTermination { .. } | E::AtPoint { .. } => EXIT_SIMULATION,
        E::Infeasible | E::BudgetInfeasible { .. } | E::TargetInfeasible { .. } => EXIT_INFEASIBLE,
        E::CalibrationInfeasible { .. } | E::CalibrationMismatch { .. } | E::InvalidTable(_) => {
            EXIT_CALIBRATION
        }
        E::Setting { source, .. } | E::Request { source, .. } => core_exit_code(source),
        E::Io(_)
        | E::Csv(_)
        | E::Parse { .. }
        | E::Schema { .. }
        | E::TomlDe(_)
        | E::TomlSer(_)
        | E::Json(_) => EXIT_IO,
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the calibration for `common` with its governor overrides applied.
pub fn load_calibration(common: &Common) -> CliResult<Calibration> {
    let mut cal = match &common.calib {
        Some(p) => Calibration::load(p)?,
        None => Calibration::default_pixel7(),
    };
    let o = &common.overrides;
    let g = &mut cal.governors;
    if let (Some(lo), Some(hi)) = (o.gpu_band_lo, o.gpu_band_hi) {
        g.quickstep.rows =
            fusesim::governors::QuickstepParams::uniform(&cal.table, lo, hi, g.quickstep.window_ms)
                .rows;
    }
    if let Some(w) = o.gpu_window_ms {
        g.quickstep.window_ms = w;
    }
    if let Some(h) = o.cpu_half_life_ms {
        g.eas.half_life_ms = h;
    }
    if let Some(h) = o.cpu_headroom {
        g.eas.headroom = h;
    }
    if let Some(t) = o.mem_target_load {
        g.interactive.target_load = t;
    }
    if let Some(p) = o.mem_period_ms {
        g.interactive.period_ms = p;
    }
    cal.validate()?;
    Ok(cal)
}

/// Executes `command`, writing its outputs and manifest. Returns the manifest.
pub fn execute(mut command: Command) -> CliResult<RunManifest> {
    command.absolutize()?;
    if let Command::Rerun(r) = command {
        let recorded = RunManifest::load(&r.manifest)?;
        let mut inner = recorded.command()?;
        if let Some(out) = r.out {
            if let Some(c) = inner.common_mut() {
                c.out = out;
            }
        }
        return execute(inner);
    }
    let start = Instant::now();
    let out = command
        .common_mut()
        .map(|c| c.out.clone())
        .expect("non-rerun commands have outputs");
    std::fs::create_dir_all(&out)?;
    let run = commands::run(&command, &out)?;
    let manifest = RunManifest::new(
        &command,
        run.calib_hash,
        run.seed,
        run.artifacts,
        start.elapsed(),
    )?;
    manifest.save(&out.join(manifest::MANIFEST_FILE))?;
    Ok(manifest)
}

/// What a finished command reports back for its manifest.
pub(crate) struct RunOutput {
    pub calib_hash: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
}

/// Parses `args` (without the program name), runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("fusesim"))
        .chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(m) => {
            for a in &m.artifacts {
                println!("{}", a.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

pub(crate) fn relative_to(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrapped_errors_keep_their_class() {
        let inner = fusesim::Error::BudgetInfeasible { budget_mj: 1.0 };
        let e = fusesim::Error::Setting {
            setting: "decode-32".into(),
            source: Box::new(inner),
        };
        assert_eq!(core_exit_code(&e), EXIT_INFEASIBLE);
        let e = fusesim::Error::NonTermination {
            limit_ms: 1,
            last_ms: 0,
        };
        assert_eq!(CliError::Core(e).exit_code(), EXIT_SIMULATION);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
    }

    #[test]
    fn manifest_round_trips_the_command() {
        let cli = Cli::try_parse_from([
            "fusesim", "replay", "--n", "3", "--seed", "9", "--out", "/tmp/x",
        ])
        .unwrap();
        let m = RunManifest::new(
            &cli.command,
            "h".into(),
            Some(9),
            vec!["replay.csv".into()],
            std::time::Duration::ZERO,
        )
        .unwrap();
        assert_eq!(m.command().unwrap(), cli.command);
        assert_eq!(m.command, "replay");
    }

    #[test]
    fn overrides_replace_calibration_values() {
        let cli = Cli::try_parse_from([
            "fusesim",
            "calibrate",
            "--mem-target-load",
            "0.5",
            "--gpu-band-lo",
            "0.6",
            "--gpu-band-hi",
            "0.9",
        ])
        .unwrap();
        let Command::Calibrate(a) = cli.command else {
            unreachable!()
        };
        let cal = load_calibration(&a.common).unwrap();
        assert_eq!(cal.governors.interactive.target_load, 0.5);
        assert_eq!(cal.governors.quickstep.rows[1].min_util, 0.6);
        assert_ne!(cal.hash(), Calibration::default_pixel7().hash());
    }
}
