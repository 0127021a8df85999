//! Longitudinal truck dynamics.
//!
//! A vehicle tracks a target speed at its acceleration and deceleration
//! limits. Commands from the controller reach the pedals through a
//! [`DelayBuffer`] that holds each received command for the reaction time.

use serde::{Deserialize, Serialize};

use crate::controller::{Action, ActionCommand};
use crate::error::{Error, Result};

/// Slack used when comparing simulated times that were built from sums of
/// tick lengths.
pub const TIME_EPS: f64 = 1e-9;

/// Static limits of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub length_m: f64,
    pub max_accel: f64,
    /// Positive magnitude.
    pub max_decel: f64,
    pub max_speed: f64,
    /// Distance of the antenna behind the front bumper.
    pub antenna_offset_m: f64,
    pub reaction_time_s: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self::truck()
    }
}

impl VehicleParams {
    /// Heavy truck limits used throughout the default scenario.
    pub fn truck() -> Self {
        Self {
            length_m: 13.6,
            max_accel: 2.5,
            max_decel: 10.0,
            max_speed: 27.77,
            antenna_offset_m: 0.5,
            reaction_time_s: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length_m", self.length_m),
            ("max_accel", self.max_accel),
            ("max_decel", self.max_decel),
            ("max_speed", self.max_speed),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(
                    "vehicle parameters",
                    format!("{name} must be finite and > 0, got {value}"),
                ));
            }
        }
        if !(self.antenna_offset_m >= 0.0 && self.antenna_offset_m <= self.length_m) {
            return Err(Error::invalid(
                "vehicle parameters",
                format!(
                    "antenna_offset_m must lie in [0, length_m], got {}",
                    self.antenna_offset_m
                ),
            ));
        }
        if !(self.reaction_time_s.is_finite() && self.reaction_time_s >= 0.0) {
            return Err(Error::invalid(
                "vehicle parameters",
                format!("reaction_time_s must be >= 0, got {}", self.reaction_time_s),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regulated,
    EmergencyBraking,
    Halted,
}

/// Per-tick longitudinal state. Position is the front bumper's arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub id: u32,
    pub front_pos_m: f64,
    pub speed: f64,
    pub target_speed: f64,
    pub mode: Mode,
}

impl VehicleState {
    pub fn cruising(id: u32, front_pos_m: f64, speed: f64) -> Self {
        Self {
            id,
            front_pos_m,
            speed,
            target_speed: speed,
            mode: Mode::Regulated,
        }
    }

    pub fn rear_pos_m(&self, params: &VehicleParams) -> f64 {
        self.front_pos_m - params.length_m
    }

    pub fn antenna_pos_m(&self, params: &VehicleParams) -> f64 {
        self.front_pos_m - params.antenna_offset_m
    }

    /// Apply a matured command to the target speed.
    ///
    /// Accelerate and Decelerate move the target by `margin` from the
    /// point selected by `reference`; Maintain leaves the target alone.
    pub fn actuate(
        &mut self,
        command: &ActionCommand,
        margin: f64,
        reference: MarginReference,
        params: &VehicleParams,
    ) {
        let base = match reference {
            MarginReference::Actuated => self.speed,
            MarginReference::Commanded => self.target_speed,
        };
        match command.action {
            Action::Accelerate => {
                self.target_speed = (base + margin).clamp(0.0, params.max_speed);
                self.mode = Mode::Regulated;
            }
            Action::Decelerate => {
                self.target_speed = (base - margin).clamp(0.0, params.max_speed);
                self.mode = Mode::Regulated;
            }
            Action::Maintain => {}
            Action::EmergencyBrake => {
                self.target_speed = 0.0;
                if self.mode != Mode::Halted {
                    self.mode = Mode::EmergencyBraking;
                }
            }
            Action::Resume { target_speed } => {
                self.target_speed = target_speed.clamp(0.0, params.max_speed);
                self.mode = Mode::Regulated;
            }
        }
    }
}

/// What an Accelerate or Decelerate step is measured from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginReference {
    /// The speed the vehicle is doing when the command matures.
    #[default]
    Actuated,
    /// The target left by the previous command, so steps accumulate.
    Commanded,
}

/// Speed ceiling a vehicle keeps behind its predecessor, in the form used
/// by Krauss-type car-following models: never faster than what still lets
/// it stop, braking at `decel_mps2`, short of `standoff_m` behind a
/// predecessor that stops at the same rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowGuard {
    pub decel_mps2: f64,
    /// `None` uses the lower edge of the IVD band.
    #[serde(default)]
    pub standoff_m: Option<f64>,
}

impl Default for FollowGuard {
    fn default() -> Self {
        Self {
            decel_mps2: 4.0,
            standoff_m: None,
        }
    }
}

impl FollowGuard {
    pub fn validate(&self) -> Result<()> {
        if !(self.decel_mps2.is_finite() && self.decel_mps2 > 0.0) {
            return Err(Error::invalid(
                "follow guard",
                format!("decel_mps2 must be finite and > 0, got {}", self.decel_mps2),
            ));
        }
        if let Some(s) = self.standoff_m {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(
                    "follow guard",
                    format!("standoff_m must be >= 0, got {s}"),
                ));
            }
        }
        Ok(())
    }

    /// Highest speed allowed at `gap_m` behind a predecessor doing
    /// `predecessor_speed`. The guard only ever brakes at its own rate, so
    /// the ceiling never drops faster than `decel_mps2` per second.
    pub fn ceiling(
        &self,
        speed: f64,
        predecessor_speed: f64,
        gap_m: f64,
        standoff_m: f64,
        dt: f64,
    ) -> f64 {
        let room = (gap_m - standoff_m).max(0.0);
        let safe = (predecessor_speed * predecessor_speed + 2.0 * self.decel_mps2 * room).sqrt();
        safe.max(speed - self.decel_mps2 * dt)
    }
}

/// Advance one vehicle by `dt` seconds with semi-implicit Euler.
pub fn step_vehicle(state: &VehicleState, params: &VehicleParams, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let target = state.target_speed.clamp(0.0, params.max_speed);
    let accel = ((target - state.speed) / dt).clamp(-params.max_decel, params.max_accel);
    let speed = (state.speed + accel * dt).clamp(0.0, params.max_speed);
    let mode = if speed == 0.0 && target == 0.0 {
        Mode::Halted
    } else {
        state.mode
    };
    VehicleState {
        id: state.id,
        front_pos_m: state.front_pos_m + speed * dt,
        speed,
        target_speed: target,
        mode,
    }
}

/// [`step_vehicle`] with the target temporarily capped at `ceiling`. The
/// commanded target itself is kept for later ticks.
pub fn step_capped(
    state: &VehicleState,
    params: &VehicleParams,
    dt: f64,
    ceiling: Option<f64>,
) -> VehicleState {
    let Some(cap) = ceiling else {
        return step_vehicle(state, params, dt);
    };
    let capped = VehicleState {
        target_speed: state.target_speed.min(cap),
        ..*state
    };
    let mut next = step_vehicle(&capped, params, dt);
    next.target_speed = state.target_speed.clamp(0.0, params.max_speed);
    if next.mode == Mode::Halted && next.target_speed > 0.0 {
        next.mode = state.mode;
    }
    next
}

/// Number of commands sent at `rate_hz` while a vehicle waits out one
/// reaction time, i.e. how many arrive before the first one is acted on.
pub fn commands_per_reaction_window(rate_hz: f64, reaction_time_s: f64) -> u32 {
    (rate_hz * reaction_time_s).round() as u32
}

#[derive(Debug, Clone, PartialEq)]
struct Pending<T> {
    effective_s: f64,
    seq: u64,
    item: T,
}

/// Holds received commands until their reaction time has elapsed.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer<T = ActionCommand> {
    queue: Vec<Pending<T>>,
    next_seq: u64,
}

impl<T> Default for DelayBuffer<T> {
    fn default() -> Self {
        Self {
            queue: Vec::new(),
            next_seq: 0,
        }
    }
}

impl<T> DelayBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Store `item`, received at `receipt_s`, until `receipt_s + reaction_s`.
    /// Returns the effective time.
    pub fn enqueue(&mut self, item: T, receipt_s: f64, reaction_s: f64) -> f64 {
        let effective_s = receipt_s + reaction_s;
        let seq = self.next_seq;
        self.next_seq += 1;
        // Keep sorted by (effective, seq); new items almost always go last.
        let at = self
            .queue
            .iter()
            .rposition(|p| p.effective_s <= effective_s)
            .map_or(0, |i| i + 1);
        self.queue.insert(
            at,
            Pending {
                effective_s,
                seq,
                item,
            },
        );
        effective_s
    }

    /// Number of items whose effective time is at or before `now_s`.
    pub fn matured_count(&self, now_s: f64) -> usize {
        self.queue
            .iter()
            .take_while(|p| p.effective_s <= now_s + TIME_EPS)
            .count()
    }

    /// Remove every matured item and return the newest one. Older matured
    /// items are superseded and dropped.
    pub fn pop_effective(&mut self, now_s: f64) -> Option<T> {
        let n = self.matured_count(now_s);
        if n == 0 {
            return None;
        }
        self.queue.drain(..n).last().map(|p| p.item)
    }

    /// Like [`pop_effective`](Self::pop_effective) but also reports how many
    /// superseded items were discarded.
    pub fn pop_effective_counted(&mut self, now_s: f64) -> (Option<T>, usize) {
        let n = self.matured_count(now_s);
        (self.pop_effective(now_s), n.saturating_sub(1))
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Action, ActionCommand};

    fn cmd(action: Action, tick: u64) -> ActionCommand {
        ActionCommand {
            member_id: 1,
            action,
            issue_tick: tick,
        }
    }

    #[test]
    fn accel_is_capped() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 20.0);
        s.target_speed = 20.4;
        let n = step_vehicle(&s, &p, 0.0125);
        assert!((n.speed - 20.03125).abs() < 1e-12);
        assert!((n.front_pos_m - 0.250390625).abs() < 1e-12);
    }

    #[test]
    fn full_stop_distance_within_one_percent() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 27.77);
        s.target_speed = 0.0;
        let mut t = 0.0_f64;
        while s.speed > 0.0 {
            s = step_vehicle(&s, &p, 0.0125);
            t += 0.0125;
        }
        let closed = 27.77f64.powi(2) / (2.0 * 10.0);
        assert!((closed - 38.56).abs() < 0.01);
        assert!(
            (s.front_pos_m - closed).abs() / closed < 0.01,
            "{}",
            s.front_pos_m
        );
        assert!((t - 2.7875).abs() < 0.02);
        assert_eq!(s.mode, Mode::Halted);
    }

    #[test]
    fn standstill_is_fixed_point() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 42.0, 0.0);
        s.target_speed = 0.0;
        let n = step_vehicle(&s, &p, 0.1);
        assert_eq!(n.front_pos_m, 42.0);
        assert_eq!(n.speed, 0.0);
        assert_eq!(n.mode, Mode::Halted);
    }

    #[test]
    fn negative_target_clamps_to_zero() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 0.2);
        s.actuate(
            &cmd(Action::Decelerate, 0),
            0.4,
            MarginReference::Actuated,
            &p,
        );
        assert_eq!(s.target_speed, 0.0);
        let n = step_vehicle(&s, &p, 0.1);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::truck().validate().is_ok());
        let mut p = VehicleParams::truck();
        p.antenna_offset_m = 20.0;
        assert!(p.validate().is_err());
        let mut p = VehicleParams::truck();
        p.max_decel = 0.0;
        assert!(p.validate().is_err());
        let mut p = VehicleParams::truck();
        p.reaction_time_s = -0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn enqueue_adds_reaction_time() {
        let mut b = DelayBuffer::new();
        let eff = b.enqueue(cmd(Action::Maintain, 80), 1.0, 0.3);
        assert!((eff - 1.3).abs() < 1e-12);
        assert!(b.pop_effective(1.2875).is_none());
        assert!(b.pop_effective(1.3).is_some());
    }

    #[test]
    fn zero_reaction_is_immediate() {
        let mut b = DelayBuffer::new();
        b.enqueue(cmd(Action::Accelerate, 3), 0.0375, 0.0);
        assert_eq!(b.pop_effective(0.0375).unwrap().issue_tick, 3);
    }

    #[test]
    fn equal_delays_pop_in_receipt_order() {
        let mut b = DelayBuffer::new();
        b.enqueue(cmd(Action::Accelerate, 80), 1.0, 0.3);
        b.enqueue(cmd(Action::Decelerate, 81), 1.0125, 0.3);
        assert_eq!(b.pop_effective(1.3).unwrap().issue_tick, 80);
        assert!(b.pop_effective(1.3).is_none());
        assert_eq!(b.pop_effective(1.3125).unwrap().issue_tick, 81);
    }

    #[test]
    fn newest_matured_wins() {
        let mut b = DelayBuffer::new();
        for k in 0..24u64 {
            let action = if k == 23 {
                Action::Decelerate
            } else {
                Action::Accelerate
            };
            b.enqueue(cmd(action, k), k as f64 / 80.0, 0.3);
        }
        b.enqueue(cmd(Action::Maintain, 99), 5.0, 0.3);
        let (got, dropped) = b.pop_effective_counted(23.0 / 80.0 + 0.3);
        assert_eq!(got.unwrap().action, Action::Decelerate);
        assert_eq!(dropped, 23);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn empty_buffer_pops_nothing() {
        let mut b: DelayBuffer = DelayBuffer::new();
        assert!(b.pop_effective(100.0).is_none());
    }

    #[test]
    fn future_item_stays_queued() {
        let mut b = DelayBuffer::new();
        b.enqueue(cmd(Action::Maintain, 0), 0.0, 0.3);
        b.enqueue(cmd(Action::Accelerate, 1), 0.5, 0.3);
        assert_eq!(b.pop_effective(0.4).unwrap().issue_tick, 0);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn reaction_window_counts() {
        assert_eq!(commands_per_reaction_window(80.0, 0.3), 24);
        assert_eq!(commands_per_reaction_window(40.0, 0.3), 12);
        assert_eq!(commands_per_reaction_window(10.0, 0.3), 3);
    }

    #[test]
    fn margin_reference_choices() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 10.0);
        s.target_speed = 12.0;
        let mut a = s;
        a.actuate(
            &cmd(Action::Accelerate, 0),
            0.4,
            MarginReference::Actuated,
            &p,
        );
        assert!((a.target_speed - 10.4).abs() < 1e-12);
        let mut c = s;
        c.actuate(
            &cmd(Action::Accelerate, 0),
            0.4,
            MarginReference::Commanded,
            &p,
        );
        assert!((c.target_speed - 12.4).abs() < 1e-12);
        c.actuate(
            &cmd(Action::Decelerate, 1),
            0.4,
            MarginReference::Commanded,
            &p,
        );
        assert!((c.target_speed - 12.0).abs() < 1e-12);
    }

    #[test]
    fn maintain_freezes_target() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 10.0);
        s.target_speed = 10.4;
        s.actuate(
            &cmd(Action::Maintain, 0),
            0.4,
            MarginReference::Actuated,
            &p,
        );
        assert_eq!(s.target_speed, 10.4);
    }

    #[test]
    fn guard_ceiling_matches_stopping_distance() {
        let g = FollowGuard::default();
        // 8 m of room at 4 m/s^2 behind a stopped predecessor: v^2 = 2 * 4 * 8.
        let c = g.ceiling(0.0, 0.0, 12.5, 4.5, 0.0125);
        assert!((c - 8.0).abs() < 1e-12);
        // Inside the standoff only the predecessor's speed is allowed.
        assert!((g.ceiling(0.0, 15.0, 3.0, 4.5, 0.0125) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn guard_never_brakes_harder_than_its_rate() {
        let g = FollowGuard::default();
        let c = g.ceiling(20.0, 0.0, 0.0, 4.5, 0.1);
        assert!((c - 19.6).abs() < 1e-12);
    }

    #[test]
    fn capped_step_keeps_commanded_target() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 20.0);
        s.target_speed = 25.0;
        let n = step_capped(&s, &p, 0.1, Some(19.0));
        assert!((n.speed - 19.0).abs() < 1e-12);
        assert_eq!(n.target_speed, 25.0);
        assert_eq!(step_capped(&s, &p, 0.1, None), step_vehicle(&s, &p, 0.1));
    }

    #[test]
    fn capped_to_zero_is_not_halted() {
        let p = VehicleParams::truck();
        let mut s = VehicleState::cruising(1, 0.0, 0.0);
        s.target_speed = 5.0;
        let n = step_capped(&s, &p, 0.1, Some(0.0));
        assert_eq!(n.speed, 0.0);
        assert_eq!(n.mode, Mode::Regulated);
    }

    #[test]
    fn guard_validation() {
        assert!(FollowGuard::default().validate().is_ok());
        let bad = FollowGuard {
            decel_mps2: 0.0,
            standoff_m: None,
        };
        assert!(bad.validate().is_err());
        let bad = FollowGuard {
            decel_mps2: 4.0,
            standoff_m: Some(-1.0),
        };
        assert!(bad.validate().is_err());
    }
}
