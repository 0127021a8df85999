//! Distance-dependent lossy V2V delivery.
//!
//! Each radio technology is reduced to a packet delivery ratio (PDR) that is
//! piecewise constant in antenna separation. Delivery is an independent
//! Bernoulli trial per message; a [`LossSchedule`] can force losses on chosen
//! ticks to reproduce consecutive-loss situations exactly.

use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DSRC_CURVE: &str = include_str!("../curves/dsrc.json");
pub const DEFAULT_LTE_CURVE: &str = include_str!("../curves/lte.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdrBin {
    pub max_distance_m: f64,
    pub pdr: f64,
}

/// Piecewise-constant PDR over distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdrCurve {
    pub protocol: String,
    pub bins: Vec<PdrBin>,
    pub tail_pdr: f64,
}

impl PdrCurve {
    /// A curve that delivers everything.
    pub fn lossless(protocol: impl Into<String>) -> Self {
        Self {
            protocol: protocol.into(),
            bins: Vec::new(),
            tail_pdr: 1.0,
        }
    }

    pub fn default_dsrc() -> Self {
        load_curve(DEFAULT_DSRC_CURVE).expect("bundled DSRC curve is valid")
    }

    pub fn default_lte() -> Self {
        load_curve(DEFAULT_LTE_CURVE).expect("bundled LTE curve is valid")
    }

    /// Bundled curve by protocol name (`dsrc`, `lte` or `lossless`).
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "lossless" => Some(Self::lossless("lossless")),
            "dsrc" => Some(Self::default_dsrc()),
            "lte" | "lte-v2v" | "lte_v2v" => Some(Self::default_lte()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64, at: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(
                    "pdr curve",
                    format!("{at}: pdr must lie in [0, 1], got {p}"),
                ))
            }
        };
        let mut prev = None;
        for (i, bin) in self.bins.iter().enumerate() {
            let at = format!("bins[{i}]");
            check_p(bin.pdr, &at)?;
            if !(bin.max_distance_m > 0.0) {
                return Err(Error::invalid(
                    "pdr curve",
                    format!(
                        "{at}: max_distance_m must be > 0, got {}",
                        bin.max_distance_m
                    ),
                ));
            }
            if let Some(p) = prev {
                if bin.max_distance_m <= p {
                    return Err(Error::invalid(
                        "pdr curve",
                        format!(
                            "{at}: bin upper bounds must be strictly increasing ({} after {p})",
                            bin.max_distance_m
                        ),
                    ));
                }
            }
            prev = Some(bin.max_distance_m);
        }
        check_p(self.tail_pdr, "tail_pdr")
    }

    /// PDR of the first bin whose upper bound exceeds `distance_m`, else the
    /// tail value.
    pub fn pdr_at_distance(&self, distance_m: f64) -> f64 {
        debug_assert!(distance_m >= 0.0);
        self.bins
            .iter()
            .find(|b| distance_m < b.max_distance_m)
            .map_or(self.tail_pdr, |b| b.pdr)
    }
}

/// Parse and validate a curve document.
pub fn load_curve(source: &str) -> Result<PdrCurve> {
    let curve: PdrCurve = serde_json::from_str(source).map_err(|e| {
        Error::parse(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    curve.validate()?;
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Member to controller (status reports).
    Up,
    /// Controller to member (action commands).
    Down,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" | "uplink" => Ok(Direction::Up),
            "down" | "downlink" => Ok(Direction::Down),
            other => Err(Error::parse(
                "direction",
                format!("expected up or down, got `{other}`"),
            )),
        }
    }
}

/// Seeded draw source for delivery trials.
#[derive(Debug, Clone)]
pub struct ChannelRng {
    seed: u64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl ChannelRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform sample in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        self.draws += 1;
        self.rng.gen::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedLoss {
    pub direction: Direction,
    pub vehicle_id: u32,
    pub first_tick: u64,
    pub last_tick: u64,
}

impl ForcedLoss {
    pub fn ticks(&self) -> RangeInclusive<u64> {
        self.first_tick..=self.last_tick
    }

    pub fn width(&self) -> u64 {
        self.last_tick.saturating_sub(self.first_tick) + 1
    }

    fn matches(&self, tick: u64, direction: Direction, vehicle_id: u32) -> bool {
        self.direction == direction && self.vehicle_id == vehicle_id && self.ticks().contains(&tick)
    }
}

impl FromStr for ForcedLoss {
    type Err = Error;

    /// `member=4,dir=down,ticks=8000..8100` (inclusive range).
    fn from_str(s: &str) -> Result<Self> {
        let mut member = None;
        let mut direction = None;
        let mut ticks = None;
        for part in s.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::parse("force-loss", format!("expected key=value, got `{part}`"))
            })?;
            match key.trim() {
                "member" => {
                    member = Some(
                        value
                            .trim()
                            .parse::<u32>()
                            .map_err(|e| Error::parse("force-loss member", e.to_string()))?,
                    )
                }
                "dir" => direction = Some(value.trim().parse::<Direction>()?),
                "ticks" => {
                    let (a, b) = value.trim().split_once("..").ok_or_else(|| {
                        Error::parse("force-loss ticks", format!("expected a..b, got `{value}`"))
                    })?;
                    let b = b.strip_prefix('=').unwrap_or(b);
                    let parse = |t: &str| {
                        t.trim()
                            .parse::<u64>()
                            .map_err(|e| Error::parse("force-loss ticks", e.to_string()))
                    };
                    let (a, b) = (parse(a)?, parse(b)?);
                    if b < a {
                        return Err(Error::parse(
                            "force-loss ticks",
                            format!("range end {b} precedes start {a}"),
                        ));
                    }
                    ticks = Some((a, b));
                }
                other => return Err(Error::parse("force-loss", format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::parse("force-loss", format!("missing `{k}`"));
        let (first_tick, last_tick) = ticks.ok_or_else(|| missing("ticks"))?;
        Ok(ForcedLoss {
            direction: direction.ok_or_else(|| missing("dir"))?,
            vehicle_id: member.ok_or_else(|| missing("member"))?,
            first_tick,
            last_tick,
        })
    }
}

/// Ticks on which delivery to or from a given vehicle always fails.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossSchedule {
    pub entries: Vec<ForcedLoss>,
}

impl LossSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, entry: ForcedLoss) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn forces(&self, tick: u64, direction: Direction, vehicle_id: u32) -> bool {
        self.entries
            .iter()
            .any(|e| e.matches(tick, direction, vehicle_id))
    }
}

/// Decide whether one message gets through.
///
/// Exactly one draw is taken from `rng` on every call, forced loss or not, so
/// that runs with and without a schedule see the same random stream.
pub fn transmit(
    curve: &PdrCurve,
    rng: &mut ChannelRng,
    schedule: &LossSchedule,
    distance_m: f64,
    tick: u64,
    direction: Direction,
    vehicle_id: u32,
) -> bool {
    let u = rng.next_unit();
    if schedule.forces(tick, direction, vehicle_id) {
        return false;
    }
    u < curve.pdr_at_distance(distance_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        assert_eq!(PdrCurve::default_dsrc().pdr_at_distance(85.0), 0.91);
        assert_eq!(PdrCurve::default_lte().pdr_at_distance(85.0), 0.97);
    }

    #[test]
    fn lossless_curve_is_one_everywhere() {
        let c = load_curve(r#"{"protocol":"ideal","bins":[],"tail_pdr":1.0}"#).unwrap();
        for d in [0.0, 1.0, 74.4, 1e6] {
            assert_eq!(c.pdr_at_distance(d), 1.0);
        }
        let inf = PdrCurve {
            protocol: "x".into(),
            bins: vec![PdrBin {
                max_distance_m: f64::MAX,
                pdr: 1.0,
            }],
            tail_pdr: 0.0,
        };
        assert_eq!(inf.pdr_at_distance(12345.0), 1.0);
    }

    #[test]
    fn authored_bins_lookup() {
        let c = load_curve(
            r#"{"protocol":"t","bins":[{"max_distance_m":75,"pdr":0.95},{"max_distance_m":100,"pdr":0.91}],"tail_pdr":0.80}"#,
        )
        .unwrap();
        assert_eq!(c.pdr_at_distance(50.0), 0.95);
        assert_eq!(c.pdr_at_distance(85.0), 0.91);
        assert_eq!(c.pdr_at_distance(150.0), 0.80);
        // upper bounds are exclusive
        assert_eq!(c.pdr_at_distance(75.0), 0.91);
    }

    #[test]
    fn rejects_out_of_range_pdr() {
        let err = load_curve(
            r#"{"protocol":"t","bins":[{"max_distance_m":75,"pdr":1.2}],"tail_pdr":0.8}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("[0, 1]"), "{err}");
    }

    #[test]
    fn rejects_non_monotone_bins() {
        let err = load_curve(
            r#"{"protocol":"t","bins":[{"max_distance_m":100,"pdr":0.9},{"max_distance_m":75,"pdr":0.9}],"tail_pdr":0.8}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = load_curve("{\n  \"protocol\": \"t\",\n  \"bins\": [,\n}").unwrap_err();
        assert!(
            matches!(err, Error::Parse { ref location, .. } if location.starts_with("line 3")),
            "{err}"
        );
        let err = load_curve(r#"{"protocol":"t","bins":[],"tail_pdr":1.0,"extra":1}"#).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn bundled_lte_dominates_dsrc() {
        let (d, l) = (PdrCurve::default_dsrc(), PdrCurve::default_lte());
        let mut x = 0.0;
        while x < 2000.0 {
            assert!(l.pdr_at_distance(x) >= d.pdr_at_distance(x), "at {x} m");
            x += 0.25;
        }
    }

    #[test]
    fn bundled_curves_are_non_increasing() {
        for c in [PdrCurve::default_dsrc(), PdrCurve::default_lte()] {
            let mut values: Vec<f64> = c.bins.iter().map(|b| b.pdr).collect();
            values.push(c.tail_pdr);
            assert!(values.windows(2).all(|w| w[0] >= w[1]), "{}", c.protocol);
        }
    }

    #[test]
    fn extreme_pdrs() {
        let mut rng = ChannelRng::new(1);
        let none = LossSchedule::none();
        let always = PdrCurve::lossless("x");
        let never = PdrCurve {
            protocol: "x".into(),
            bins: vec![],
            tail_pdr: 0.0,
        };
        for t in 0..1000 {
            assert!(transmit(
                &always,
                &mut rng,
                &none,
                10.0,
                t,
                Direction::Down,
                1
            ));
            assert!(!transmit(
                &never,
                &mut rng,
                &none,
                10.0,
                t,
                Direction::Down,
                1
            ));
        }
    }

    #[test]
    fn bernoulli_rate_matches_pdr() {
        let curve = PdrCurve {
            protocol: "x".into(),
            bins: vec![],
            tail_pdr: 0.91,
        };
        let mut rng = ChannelRng::new(20190601);
        let none = LossSchedule::none();
        let n = 100_000;
        let hits = (0..n)
            .filter(|&t| transmit(&curve, &mut rng, &none, 85.0, t, Direction::Up, 2))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.91).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn schedule_overrides_and_still_draws() {
        let curve = PdrCurve::lossless("x");
        let schedule = LossSchedule::none().with(ForcedLoss {
            direction: Direction::Down,
            vehicle_id: 4,
            first_tick: 10,
            last_tick: 19,
        });
        let mut rng = ChannelRng::new(7);
        let got: Vec<bool> = (0..30)
            .map(|t| transmit(&curve, &mut rng, &schedule, 0.0, t, Direction::Down, 4))
            .collect();
        assert_eq!(rng.draws(), 30);
        assert!(got[10..20].iter().all(|d| !d));
        assert!(got[..10].iter().chain(&got[20..]).all(|d| *d));
        // other direction and other vehicles unaffected
        assert!(transmit(
            &curve,
            &mut rng,
            &schedule,
            0.0,
            15,
            Direction::Up,
            4
        ));
        assert!(transmit(
            &curve,
            &mut rng,
            &schedule,
            0.0,
            15,
            Direction::Down,
            3
        ));
    }

    #[test]
    fn parses_force_loss_spec() {
        let f: ForcedLoss = "member=4,dir=down,ticks=8000..8099".parse().unwrap();
        assert_eq!(
            f,
            ForcedLoss {
                direction: Direction::Down,
                vehicle_id: 4,
                first_tick: 8000,
                last_tick: 8099
            }
        );
        assert_eq!(f.width(), 100);
        assert!("member=4,dir=sideways,ticks=1..2"
            .parse::<ForcedLoss>()
            .is_err());
        assert!("member=4,dir=up,ticks=5..2".parse::<ForcedLoss>().is_err());
        assert!("member=4,dir=up".parse::<ForcedLoss>().is_err());
        assert!("bogus".parse::<ForcedLoss>().is_err());
    }

    #[test]
    fn equal_seeds_equal_outcomes() {
        let curve = PdrCurve::default_dsrc();
        let none = LossSchedule::none();
        let run = |seed| {
            let mut rng = ChannelRng::new(seed);
            (0..500u64)
                .map(|t| {
                    transmit(
                        &curve,
                        &mut rng,
                        &none,
                        (t % 200) as f64,
                        t,
                        Direction::Up,
                        1,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
