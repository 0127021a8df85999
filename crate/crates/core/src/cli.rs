//! Command-line front end: `run`, `sweep` and `plot`.
//!
//! Exit statuses: 0 for a collision-free run, 2 when a collision was
//! recorded, 1 for configuration, usage or I/O errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{load_curve, ForcedLoss, LossSchedule, PdrCurve};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, emit_plot, emit_summary_csv, emit_trace_csv, read_trace_csv, Band, PlotKind,
    RunSummary, SweepSummary,
};
use crate::scenario::{run, Links, ScenarioConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_COLLISION: u8 = 2;

/// On-disk experiment definition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfigFile {
    pub scenario: ScenarioConfig,
    /// Curve file per protocol name. Relative paths resolve against the
    /// config file's directory. Protocols not listed fall back to the
    /// built-in `dsrc` and `lte` curves.
    pub curves: BTreeMap<String, PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl CliConfigFile {
    /// Parse and validate the JSON text without touching the filesystem.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CliConfigFile = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        cfg.scenario.validate()?;
        Ok(cfg)
    }
}

/// A config file with its curve files read and checked.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: CliConfigFile,
    pub curves: BTreeMap<String, PdrCurve>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = CliConfigFile::from_json(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut curves = BTreeMap::new();
        for (name, rel) in &file.curves {
            let p = base.join(rel);
            let src = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let curve = load_curve(&src).map_err(|e| match e {
                Error::Parse { location, message } => Error::Parse {
                    location: format!("{}: {location}", p.display()),
                    message,
                },
                other => other,
            })?;
            curves.insert(name.clone(), curve);
        }
        Ok(Self { file, curves })
    }

    pub fn curve(&self, protocol: &str) -> Result<PdrCurve> {
        if let Some(c) = self.curves.get(protocol) {
            return Ok(c.clone());
        }
        PdrCurve::builtin(protocol).ok_or_else(|| {
            Error::invalid(
                "protocol",
                format!(
                    "no curve for `{protocol}`; add it under `curves` or use dsrc, lte or lossless"
                ),
            )
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "platoon",
    version,
    about = "Truck platoon simulator over lossy V2V links"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write trace.csv and summary.json.
    Run(RunArgs),
    /// Run protocols x rates x seeds and write summary.csv.
    Sweep(SweepArgs),
    /// Render a trace CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment file. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Desired inter-vehicle distance in meters.
    #[arg(long)]
    pub ivd: Option<f64>,
    /// Force losses, e.g. `member=4,dir=down,ticks=8000..8040`. Repeatable.
    #[arg(long = "force-loss", value_name = "SPEC")]
    pub force_loss: Vec<ForcedLoss>,
    /// Deliver every message regardless of the curve.
    #[arg(long)]
    pub lossless: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Message rate in Hz; also sets the tick length.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub protocol: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// First seed; run i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "rate", value_delimiter = ',', default_values_t = [80.0, 40.0, 10.0])]
    pub rates: Vec<f64>,
    #[arg(long = "protocol", value_delimiter = ',', default_values_t = [String::from("dsrc"), String::from("lte")])]
    pub protocols: Vec<String>,
    /// Seeds per (protocol, rate) cell.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Worker threads. Output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Trace CSV written by `run`.
    pub trace: PathBuf,
    /// `speed` or `ivd`.
    #[arg(long)]
    pub kind: String,
    /// Band settings are read from here when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ivd: Option<f64>,
    /// SVG file to write. Defaults to the trace path with `.<kind>.svg`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (program name first) and execute. Messages go to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| EXIT_OK),
        Command::Plot(a) => cmd_plot(&a).map(|_| EXIT_OK),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn load(path: Option<&Path>) -> Result<LoadedConfig> {
    match path {
        Some(p) => LoadedConfig::load(p),
        None => Ok(LoadedConfig {
            file: CliConfigFile::default(),
            curves: BTreeMap::new(),
        }),
    }
}

fn out_dir(common: &CommonArgs, loaded: &LoadedConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| loaded.file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn schedule(common: &CommonArgs) -> LossSchedule {
    common
        .force_loss
        .iter()
        .fold(LossSchedule::none(), |s, e| s.with(e.clone()))
}

fn links(loaded: &LoadedConfig, protocol: &str, lossless: bool) -> Result<Links> {
    if lossless {
        return Ok(Links::symmetric(PdrCurve::lossless(protocol)));
    }
    Ok(Links::symmetric(loaded.curve(protocol)?))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid("summary", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Effective scenario for `run`: file values with flags on top.
pub fn run_config(args: &RunArgs, loaded: &LoadedConfig) -> Result<ScenarioConfig> {
    let mut c = loaded.file.scenario.clone();
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(r) = args.rate {
        c.message_rate_hz = r;
    }
    if let Some(p) = &args.protocol {
        c.protocol = p.clone();
    }
    if let Some(d) = args.common.ivd {
        c.desired_ivd_m = d;
    }
    c.validate()?;
    Ok(c)
}

/// Returns the exit status: 0, or 2 when the run ended in a collision.
pub fn cmd_run(args: &RunArgs) -> Result<u8> {
    let loaded = load(args.common.config.as_deref())?;
    let config = run_config(args, &loaded)?;
    let links = links(&loaded, &config.protocol, args.common.lossless)?;
    let out = run(&config, &links, &schedule(&args.common))?;

    let dir = out_dir(&args.common, &loaded);
    create_dir(&dir)?;
    emit_trace_csv(&out.trace, &dir.join("trace.csv"))?;
    write_json(&out.summary, &dir.join("summary.json"))?;

    let s = &out.summary;
    if let Some(c) = &s.collision {
        eprintln!(
            "collision at tick {}: vehicle {} ran into vehicle {} closing at {:.3} m/s",
            c.tick, c.follower_id, c.leader_id, c.closing_speed
        );
        return Ok(EXIT_COLLISION);
    }
    match s.time_to_stability_s {
        Some(t) => eprintln!("stable {t:.3} s after the acceleration start"),
        None if s.stability_applicable => eprintln!("warning: stability was not reached"),
        None => {}
    }
    Ok(EXIT_OK)
}

/// Every (protocol, rate, seed) configuration of a sweep, in output order.
pub fn sweep_configs(args: &SweepArgs, loaded: &LoadedConfig) -> Result<Vec<ScenarioConfig>> {
    if args.seeds == 0 {
        return Err(Error::invalid("sweep", "--seeds must be at least 1"));
    }
    let mut base = loaded.file.scenario.clone();
    if let Some(d) = args.common.ivd {
        base.desired_ivd_m = d;
    }
    let first_seed = args.seed.unwrap_or(base.seed);
    let mut out = Vec::new();
    for protocol in &args.protocols {
        for &rate in &args.rates {
            for i in 0..args.seeds {
                let c = ScenarioConfig {
                    protocol: protocol.clone(),
                    message_rate_hz: rate,
                    seed: first_seed.wrapping_add(i),
                    ..base.clone()
                };
                c.validate()?;
                out.push(c);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    protocols: &'a [String],
    rates_hz: &'a [f64],
    seeds: u64,
    lossless: bool,
    forced_losses: &'a [ForcedLoss],
    scenario: &'a ScenarioConfig,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepSummary> {
    let loaded = load(args.common.config.as_deref())?;
    let configs = sweep_configs(args, &loaded)?;
    let mut protocol_links = BTreeMap::new();
    for p in &args.protocols {
        protocol_links.insert(p.clone(), links(&loaded, p, args.common.lossless)?);
    }
    let sched = schedule(&args.common);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::invalid("--jobs", e.to_string()))?;
    let summaries: Vec<RunSummary> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run(c, &protocol_links[&c.protocol], &sched).map(|o| o.summary))
            .collect::<Result<_>>()
    })?;
    let sweep = aggregate(&summaries);

    let dir = out_dir(&args.common, &loaded);
    create_dir(&dir)?;
    emit_summary_csv(&sweep, &dir.join("summary.csv"))?;
    let mut echo_base = loaded.file.scenario.clone();
    if let Some(d) = args.common.ivd {
        echo_base.desired_ivd_m = d;
    }
    echo_base.seed = args.seed.unwrap_or(echo_base.seed);
    write_json(
        &SweepEcho {
            protocols: &args.protocols,
            rates_hz: &args.rates,
            seeds: args.seeds,
            lossless: args.common.lossless,
            forced_losses: &args.common.force_loss,
            scenario: &echo_base,
        },
        &dir.join("sweep.json"),
    )?;
    for cell in &sweep.cells {
        if cell.mean_time_to_stability_s.is_none() {
            eprintln!(
                "warning: {} at {} Hz has no stable collision-free run ({} collisions)",
                cell.protocol, cell.message_rate_hz, cell.collision_runs
            );
        }
    }
    Ok(sweep)
}

pub fn cmd_plot(args: &PlotArgs) -> Result<PathBuf> {
    let kind: PlotKind = args.kind.parse()?;
    let mut band = Band::default();
    if let Some(p) = &args.config {
        let loaded = LoadedConfig::load(p)?;
        band.desired_ivd_m = loaded.file.scenario.desired_ivd_m;
        band.tolerance_frac = loaded.file.scenario.tolerance_frac;
    }
    if let Some(d) = args.ivd {
        band.desired_ivd_m = d;
    }
    let trace = read_trace_csv(&args.trace)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let ext = match kind {
            PlotKind::Speed => "speed.svg",
            PlotKind::Ivd => "ivd.svg",
        };
        args.trace.with_extension(ext)
    });
    emit_plot(&trace, kind, band, &out)?;
    Ok(out)
}
