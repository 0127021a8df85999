//! Centralized platoon controller hosted by the platoon leader.
//!
//! The controller knows members only through their last delivered
//! [`StatusReport`]. Each tick it answers every member with one
//! [`ActionCommand`] derived from that member's own inter-vehicle distance
//! (IVD) and the scenario phase: a bang-bang rule around a tolerance band,
//! nudging speed up or down by a fixed margin.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Formation,
    Cruise,
    EmergencyBraking,
    Standstill,
    Acceleration,
    Stable,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Formation,
        Phase::Cruise,
        Phase::EmergencyBraking,
        Phase::Standstill,
        Phase::Acceleration,
        Phase::Stable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Formation => "formation",
            Phase::Cruise => "cruise",
            Phase::EmergencyBraking => "emergency_braking",
            Phase::Standstill => "standstill",
            Phase::Acceleration => "acceleration",
            Phase::Stable => "stable",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::parse("phase", format!("unknown phase `{s}`")))
    }
}

/// What a member is told to do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Raise speed by the run's margin.
    Accelerate,
    /// Lower speed by the run's margin.
    Decelerate,
    Maintain,
    EmergencyBrake,
    Resume {
        target_speed: f64,
    },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Accelerate => f.write_str("accelerate"),
            Action::Decelerate => f.write_str("decelerate"),
            Action::Maintain => f.write_str("maintain"),
            Action::EmergencyBrake => f.write_str("emergency_brake"),
            Action::Resume { target_speed } => write!(f, "resume:{target_speed:.6}"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accelerate" => Ok(Action::Accelerate),
            "decelerate" => Ok(Action::Decelerate),
            "maintain" => Ok(Action::Maintain),
            "emergency_brake" => Ok(Action::EmergencyBrake),
            _ => {
                let v = s
                    .strip_prefix("resume:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse("action", format!("unknown action `{s}`")))?;
                Ok(Action::Resume { target_speed: v })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub member_id: u32,
    pub action: Action,
    pub issue_tick: u64,
}

/// Uplink payload sent by a member every tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub member_id: u32,
    /// Front bumper position.
    pub position_m: f64,
    pub speed: f64,
    /// Gap from the predecessor's rear bumper to this member's front bumper.
    pub ivd_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredReport {
    pub report: StatusReport,
    pub received_tick: u64,
    pub age_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Truck,
    Car,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleDescriptor {
    pub id: u32,
    pub kind: VehicleKind,
    pub front_pos_m: f64,
}

/// The frontmost truck leads. Ties go to the lower id.
pub fn select_leader(vehicles: &[VehicleDescriptor]) -> Result<u32> {
    vehicles
        .iter()
        .filter(|v| v.kind == VehicleKind::Truck)
        .max_by(|a, b| {
            a.front_pos_m
                .total_cmp(&b.front_pos_m)
                .then_with(|| b.id.cmp(&a.id))
        })
        .map(|v| v.id)
        .ok_or(Error::NoTruck)
}

/// A vehicle that could join the platoon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateInfo {
    pub vehicle_id: u32,
    pub distance_to_last_member_m: f64,
    pub speed: f64,
}

/// Candidates whose speed is within 25% of the platoon speed (inclusive),
/// nearest first.
pub fn eligible_candidates(platoon_speed: f64, candidates: &[CandidateInfo]) -> Vec<CandidateInfo> {
    let (lo, hi) = (0.75 * platoon_speed, 1.25 * platoon_speed);
    let mut out: Vec<CandidateInfo> = candidates
        .iter()
        .filter(|c| c.speed >= lo && c.speed <= hi)
        .copied()
        .collect();
    out.sort_by(|a, b| {
        a.distance_to_last_member_m
            .total_cmp(&b.distance_to_last_member_m)
            .then_with(|| a.vehicle_id.cmp(&b.vehicle_id))
    });
    out
}

/// Tunables of the regulation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub desired_ivd_m: f64,
    pub tolerance_frac: f64,
    pub margin_mps: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            desired_ivd_m: 5.0,
            tolerance_frac: 0.10,
            margin_mps: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    config: ControllerConfig,
    members: Vec<u32>,
    reports: BTreeMap<u32, StoredReport>,
    phase: Phase,
    dropped_reports: u64,
}

impl ControllerState {
    pub fn new(config: ControllerConfig) -> Self {
        Self {
            config,
            members: Vec::new(),
            reports: BTreeMap::new(),
            phase: Phase::Formation,
            dropped_reports: 0,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Members front to back, leader excluded.
    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn is_member(&self, id: u32) -> bool {
        self.members.contains(&id)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn dropped_reports(&self) -> u64 {
        self.dropped_reports
    }

    pub fn stored_report(&self, id: u32) -> Option<&StoredReport> {
        self.reports.get(&id)
    }

    /// Inclusive IVD tolerance band.
    pub fn band(&self) -> (f64, f64) {
        let d = self.config.desired_ivd_m;
        let tol = self.config.tolerance_frac;
        (d * (1.0 - tol), d * (1.0 + tol))
    }

    /// Admit `candidate`. Without a hint it joins at the tail; with
    /// `merge_at_front_pos` it is placed among the members according to that
    /// position and the members' last reported positions.
    pub fn admit_member(
        &mut self,
        candidate: u32,
        merge_at_front_pos: Option<f64>,
    ) -> Result<usize> {
        if self.is_member(candidate) {
            return Err(Error::DuplicateMember(candidate));
        }
        let index = match merge_at_front_pos {
            None => self.members.len(),
            Some(pos) => self
                .members
                .iter()
                .take_while(|id| {
                    self.reports
                        .get(id)
                        .is_none_or(|r| r.report.position_m > pos)
                })
                .count(),
        };
        self.members.insert(index, candidate);
        Ok(index)
    }

    /// Age every stored report by one tick. Called once at the start of each
    /// tick, before that tick's deliveries.
    pub fn begin_tick(&mut self) {
        for r in self.reports.values_mut() {
            r.age_ticks += 1;
        }
    }

    pub fn on_status_report(&mut self, report: StatusReport, tick: u64) {
        if !self.is_member(report.member_id) {
            self.dropped_reports += 1;
            return;
        }
        self.reports.insert(
            report.member_id,
            StoredReport {
                report,
                received_tick: tick,
                age_ticks: 0,
            },
        );
    }

    /// Band rule on a known gap.
    pub fn regulate(&self, ivd_m: f64) -> Action {
        let (lo, hi) = self.band();
        if ivd_m > hi {
            Action::Accelerate
        } else if ivd_m < lo {
            Action::Decelerate
        } else {
            Action::Maintain
        }
    }

    pub fn compute_action(&self, member_id: u32, tick: u64) -> Result<ActionCommand> {
        if !self.is_member(member_id) {
            return Err(Error::UnknownMember(member_id));
        }
        let action = match self.phase {
            Phase::EmergencyBraking | Phase::Standstill => Action::EmergencyBrake,
            _ => match self.reports.get(&member_id) {
                Some(r) => self.regulate(r.report.ivd_m),
                None => Action::Maintain,
            },
        };
        Ok(ActionCommand {
            member_id,
            action,
            issue_tick: tick,
        })
    }
}
