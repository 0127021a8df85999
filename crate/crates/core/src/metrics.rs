//! Trace records, run and sweep summaries, CSV and SVG output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Action, Phase};
use crate::error::{Error, Result};
use crate::scenario::{detect_stability, CollisionRecord, ScenarioConfig};

pub const TRACE_HEADER: [&str; 11] = [
    "tick",
    "time_s",
    "vehicle_id",
    "front_pos_m",
    "speed_mps",
    "ivd_m",
    "last_command",
    "command_age_ticks",
    "uplink_delivered",
    "downlink_delivered",
    "phase",
];

pub const SUMMARY_HEADER: [&str; 6] = [
    "protocol",
    "message_rate_hz",
    "seeds",
    "collision_runs",
    "mean_time_to_stability_s",
    "stddev_s",
];

/// Round to the 6 decimals written to CSV, so that a parsed trace compares
/// equal to the recorded one.
pub fn quantize(x: f64) -> f64 {
    let q = (x * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

/// One vehicle at one tick. Rows are written front to back within a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub tick: u64,
    pub time_s: f64,
    pub vehicle_id: u32,
    pub front_pos_m: f64,
    pub speed_mps: f64,
    /// `None` for the front vehicle.
    pub ivd_m: Option<f64>,
    pub last_command: Option<Action>,
    /// Ticks since a command was last received.
    pub command_age_ticks: Option<u64>,
    /// `None` when no report was sent this tick.
    pub uplink_delivered: Option<bool>,
    /// `None` when no command was sent this tick.
    pub downlink_delivered: Option<bool>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTally {
    pub sent: u64,
    pub lost: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberLosses {
    pub vehicle_id: u32,
    pub uplink_lost: u64,
    pub downlink_lost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub ticks: u64,
    /// False for a leader-only run, where there is nothing to stabilize.
    pub stability_applicable: bool,
    pub time_to_stability_s: Option<f64>,
    pub collision: Option<CollisionRecord>,
    pub uplink: LinkTally,
    pub downlink: LinkTally,
    pub member_losses: Vec<MemberLosses>,
}

/// Derive the run summary from a complete trace.
pub fn summarize(trace: &[TraceRecord], config: &ScenarioConfig) -> Result<RunSummary> {
    let vehicles = config.spawn_plan().len();
    let mut last_complete: Option<u64> = None;
    for (i, chunk) in trace.chunk_by(|a, b| a.tick == b.tick).enumerate() {
        let tick = chunk[0].tick;
        if tick != i as u64 || chunk.len() != vehicles {
            return Err(Error::TruncatedTrace {
                last_tick: last_complete.unwrap_or(0),
            });
        }
        last_complete = Some(tick);
    }
    let Some(last_tick) = last_complete else {
        return Err(Error::TruncatedTrace { last_tick: 0 });
    };

    let collision = trace.chunk_by(|a, b| a.tick == b.tick).find_map(|rows| {
        rows.windows(2).find_map(|w| match w[1].ivd_m {
            Some(g) if g <= 0.0 => Some(CollisionRecord {
                tick: w[1].tick,
                follower_id: w[1].vehicle_id,
                leader_id: w[0].vehicle_id,
                closing_speed: w[1].speed_mps - w[0].speed_mps,
            }),
            _ => None,
        })
    });

    let stability_applicable = vehicles > 1;
    let time_to_stability_s = if collision.is_some() || !stability_applicable {
        None
    } else {
        trace
            .iter()
            .find(|r| r.phase >= Phase::Acceleration)
            .and_then(|r| {
                detect_stability(
                    trace,
                    config.desired_ivd_m,
                    config.tolerance_frac,
                    config.stability_dwell_s,
                    r.time_s,
                )
            })
    };

    let mut uplink = LinkTally::default();
    let mut downlink = LinkTally::default();
    let mut per_member: BTreeMap<u32, MemberLosses> = BTreeMap::new();
    for r in trace {
        if let Some(ok) = r.uplink_delivered {
            uplink.sent += 1;
            let m = per_member.entry(r.vehicle_id).or_insert(MemberLosses {
                vehicle_id: r.vehicle_id,
                ..Default::default()
            });
            if !ok {
                uplink.lost += 1;
                m.uplink_lost += 1;
            }
        }
        if let Some(ok) = r.downlink_delivered {
            downlink.sent += 1;
            let m = per_member.entry(r.vehicle_id).or_insert(MemberLosses {
                vehicle_id: r.vehicle_id,
                ..Default::default()
            });
            if !ok {
                downlink.lost += 1;
                m.downlink_lost += 1;
            }
        }
    }

    Ok(RunSummary {
        config: config.clone(),
        seed: config.seed,
        ticks: last_tick + 1,
        stability_applicable,
        time_to_stability_s,
        collision,
        uplink,
        downlink,
        member_losses: per_member.into_values().collect(),
    })
}

/// One (protocol, rate) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub protocol: String,
    pub message_rate_hz: f64,
    pub seeds: usize,
    pub collision_runs: usize,
    /// Collision-free runs that never met the stability criterion.
    pub unstable_runs: usize,
    /// `None` when no collision-free run reached stability.
    pub mean_time_to_stability_s: Option<f64>,
    pub stddev_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
}

impl SweepSummary {
    pub fn cell(&self, protocol: &str, rate_hz: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.protocol == protocol && c.message_rate_hz == rate_hz)
    }
}

/// Group by (protocol, rate) in first-seen order and average the stability
/// time over runs without a collision.
pub fn aggregate(summaries: &[RunSummary]) -> SweepSummary {
    let mut cells: Vec<(SweepCell, Vec<f64>)> = Vec::new();
    for s in summaries {
        let key = (&s.config.protocol, s.config.message_rate_hz);
        let at = match cells
            .iter()
            .position(|(c, _)| (&c.protocol, c.message_rate_hz) == key)
        {
            Some(i) => i,
            None => {
                cells.push((
                    SweepCell {
                        protocol: s.config.protocol.clone(),
                        message_rate_hz: s.config.message_rate_hz,
                        seeds: 0,
                        collision_runs: 0,
                        unstable_runs: 0,
                        mean_time_to_stability_s: None,
                        stddev_s: None,
                    },
                    Vec::new(),
                ));
                cells.len() - 1
            }
        };
        let (cell, times) = &mut cells[at];
        cell.seeds += 1;
        if s.collision.is_some() {
            cell.collision_runs += 1;
        } else if let Some(t) = s.time_to_stability_s {
            times.push(t);
        } else {
            cell.unstable_runs += 1;
        }
    }
    let cells = cells
        .into_iter()
        .map(|(mut cell, times)| {
            if !times.is_empty() {
                let n = times.len() as f64;
                let mean = times.iter().sum::<f64>() / n;
                let var = if times.len() > 1 {
                    times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                cell.mean_time_to_stability_s = Some(mean);
                cell.stddev_s = Some(var.sqrt());
            }
            cell
        })
        .collect();
    SweepSummary { cells }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn trace_row(r: &TraceRecord) -> [String; 11] {
    [
        r.tick.to_string(),
        fmt_f(r.time_s),
        r.vehicle_id.to_string(),
        fmt_f(r.front_pos_m),
        fmt_f(r.speed_mps),
        r.ivd_m.map(fmt_f).unwrap_or_default(),
        fmt_opt(r.last_command),
        fmt_opt(r.command_age_ticks),
        fmt_opt(r.uplink_delivered),
        fmt_opt(r.downlink_delivered),
        r.phase.to_string(),
    ]
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.write_record(trace_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_csv_string(trace: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn emit_trace_csv(trace: &[TraceRecord], destination: &Path) -> Result<()> {
    fs::write(destination, trace_csv_string(trace)).map_err(|e| Error::io(destination, e))
}

fn parse_field<T: FromStr>(line: u64, name: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::parse(format!("line {line}, field {name}"), e.to_string()))
}

fn parse_opt<T: FromStr>(line: u64, name: &str, raw: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if raw.is_empty() {
        Ok(None)
    } else {
        parse_field(line, name, raw).map(Some)
    }
}

fn parse_finite(line: u64, name: &str, raw: &str) -> Result<f64> {
    let v: f64 = parse_field(line, name, raw)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(
            format!("line {line}, field {name}"),
            "value is not finite",
        ))
    }
}

/// Parse a trace CSV as written by [`write_trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty file, expected a header row"))?
        .map_err(|e| Error::parse("line 1", e.to_string()))?;
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::parse(
            "line 1",
            format!("unexpected header, expected `{}`", TRACE_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(format!("line {line}"), e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != TRACE_HEADER.len() {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected {} fields, got {}", TRACE_HEADER.len(), row.len()),
            ));
        }
        let f = |i: usize| &row[i];
        let ivd_m = if f(5).is_empty() {
            None
        } else {
            Some(parse_finite(line, "ivd_m", f(5))?)
        };
        out.push(TraceRecord {
            tick: parse_field(line, "tick", f(0))?,
            time_s: parse_finite(line, "time_s", f(1))?,
            vehicle_id: parse_field(line, "vehicle_id", f(2))?,
            front_pos_m: parse_finite(line, "front_pos_m", f(3))?,
            speed_mps: parse_finite(line, "speed_mps", f(4))?,
            ivd_m,
            last_command: parse_opt(line, "last_command", f(6))?,
            command_age_ticks: parse_opt(line, "command_age_ticks", f(7))?,
            uplink_delivered: parse_opt(line, "uplink_delivered", f(8))?,
            downlink_delivered: parse_opt(line, "downlink_delivered", f(9))?,
            phase: parse_field(line, "phase", f(10))?,
        });
    }
    Ok(out)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text)
}

pub fn write_summary_csv<W: Write>(sweep: &SweepSummary, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for c in &sweep.cells {
        let or_na = |x: Option<f64>| x.map(fmt_f).unwrap_or_else(|| "unavailable".into());
        w.write_record([
            c.protocol.clone(),
            fmt_f(c.message_rate_hz),
            c.seeds.to_string(),
            c.collision_runs.to_string(),
            or_na(c.mean_time_to_stability_s),
            or_na(c.stddev_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_summary_csv(sweep: &SweepSummary, destination: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_summary_csv(sweep, &mut buf).expect("writing to memory cannot fail");
    fs::write(destination, buf).map_err(|e| Error::io(destination, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Speed,
    Ivd,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(PlotKind::Speed),
            "ivd" => Ok(PlotKind::Ivd),
            other => Err(Error::UnknownPlotKind(other.to_string())),
        }
    }
}

/// Desired gap and tolerance used to shade the band on IVD plots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub desired_ivd_m: f64,
    pub tolerance_frac: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band {
            desired_ivd_m: 5.0,
            tolerance_frac: 0.10,
        }
    }
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Render one line per vehicle over time as SVG.
pub fn render_plot(trace: &[TraceRecord], kind: PlotKind, band: Band) -> Result<String> {
    let mut series: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in trace {
        let y = match kind {
            PlotKind::Speed => Some(r.speed_mps),
            PlotKind::Ivd => r.ivd_m,
        };
        let entry = series.entry(r.vehicle_id).or_default();
        if let Some(y) = y {
            entry.push((r.time_s, y));
        }
    }
    let (lo, hi) = (
        band.desired_ivd_m * (1.0 - band.tolerance_frac),
        band.desired_ivd_m * (1.0 + band.tolerance_frac),
    );
    let t_max = trace.iter().map(|r| r.time_s).fold(1.0f64, f64::max);
    let t_min = trace
        .iter()
        .map(|r| r.time_s)
        .fold(t_max, f64::min)
        .min(t_max - 1.0);
    let ys = series.values().flatten().map(|p| p.1);
    let (mut y_min, mut y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    if kind == PlotKind::Ivd {
        y_min = y_min.min(lo);
        y_max = y_max.max(hi);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(0.5);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let (title, y_label) = match kind {
        PlotKind::Speed => ("Speed", "speed (m/s)"),
        PlotKind::Ivd => ("Inter-vehicle distance", "IVD (m)"),
    };

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (1000, 600)).into_drawing_area();
        let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(60)
            .build_cartesian_2d(t_min..t_max, y_min..y_max)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("time (s)")
            .y_desc(y_label)
            .draw()
            .map_err(|e| plot_err(&e))?;
        if kind == PlotKind::Ivd {
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(t_min, lo), (t_max, hi)],
                    RGBColor(44, 160, 44).mix(0.2).filled(),
                )))
                .map_err(|e| plot_err(&e))?
                .label(format!("band [{lo:.2}, {hi:.2}] m"))
                .legend(|(x, y)| {
                    Rectangle::new(
                        [(x, y - 5), (x + 15, y + 5)],
                        RGBColor(44, 160, 44).mix(0.2).filled(),
                    )
                });
        }
        for (i, (id, points)) in series.iter().enumerate() {
            if points.is_empty() {
                continue;
            }
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(
                    points.iter().copied(),
                    color.stroke_width(1),
                ))
                .map_err(|e| plot_err(&e))?
                .label(format!("vehicle {id}"))
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

pub fn emit_plot(
    trace: &[TraceRecord],
    kind: PlotKind,
    band: Band,
    destination: &Path,
) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::invalid("trace", "cannot plot an empty trace"));
    }
    let svg = render_plot(trace, kind, band)?;
    fs::write(destination, svg).map_err(|e| Error::io(destination, e))
}
