//! World orchestration: spawn, tick loop, message exchange, phase machine,
//! collision and stability detection.

use serde::{Deserialize, Serialize};

use crate::channel::{transmit, ChannelRng, Direction, LossSchedule, PdrCurve};
use crate::controller::{
    eligible_candidates, select_leader, Action, ActionCommand, CandidateInfo, ControllerConfig,
    ControllerState, Phase, StatusReport, VehicleDescriptor, VehicleKind,
};
use crate::error::{Error, Result};
use crate::kinematics::{
    step_capped, DelayBuffer, FollowGuard, MarginReference, Mode, VehicleParams, VehicleState,
    TIME_EPS,
};
use crate::metrics::{quantize, summarize, RunSummary, TraceRecord};

/// One truck's starting condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnEntry {
    pub front_pos_m: f64,
    pub speed: f64,
    /// Earliest time the truck may be admitted to the platoon. It drives at
    /// its spawn speed until then.
    #[serde(default)]
    pub entry_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub road_length_m: f64,
    pub road_speed_limit: f64,
    pub truck_count: u32,
    pub desired_ivd_m: f64,
    pub tolerance_frac: f64,
    pub margin_mps: f64,
    pub message_rate_hz: f64,
    pub protocol: String,
    pub braking_trigger_s: f64,
    pub acceleration_trigger_s: f64,
    pub resume_speed: f64,
    /// Gap between consecutive trucks in the generated spawn plan.
    pub spawn_gap_m: f64,
    /// Spawn speed as a fraction of `resume_speed` in the generated plan.
    pub spawn_speed_frac: f64,
    /// Explicit spawn plan, front to back. Overrides the generated one.
    pub spawn: Option<Vec<SpawnEntry>>,
    pub seed: u64,
    pub stability_dwell_s: f64,
    pub max_time_s: f64,
    /// Physics steps per message tick.
    pub physics_substeps: u32,
    pub margin_reference: MarginReference,
    /// Local safe-speed ceiling behind the predecessor; `null` disables it.
    pub follow_guard: Option<FollowGuard>,
    pub vehicle: VehicleParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road_length_m: 4000.0,
            road_speed_limit: 36.11,
            truck_count: 5,
            desired_ivd_m: 5.0,
            tolerance_frac: 0.10,
            margin_mps: 0.4,
            message_rate_hz: 80.0,
            protocol: "dsrc".into(),
            braking_trigger_s: 100.0,
            acceleration_trigger_s: 125.0,
            resume_speed: 22.22,
            spawn_gap_m: 25.0,
            spawn_speed_frac: 0.8,
            spawn: None,
            seed: 0,
            stability_dwell_s: 1.0,
            max_time_s: 400.0,
            physics_substeps: 1,
            margin_reference: MarginReference::default(),
            follow_guard: Some(FollowGuard::default()),
            vehicle: VehicleParams::truck(),
        }
    }
}

impl ScenarioConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.message_rate_hz
    }

    pub fn time_of(&self, tick: u64) -> f64 {
        tick as f64 / self.message_rate_hz
    }

    /// First tick whose time is at or after `t`.
    pub fn tick_at(&self, t: f64) -> u64 {
        (t * self.message_rate_hz - TIME_EPS).ceil().max(0.0) as u64
    }

    pub fn max_ticks(&self) -> u64 {
        self.tick_at(self.max_time_s)
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            desired_ivd_m: self.desired_ivd_m,
            tolerance_frac: self.tolerance_frac,
            margin_mps: self.margin_mps,
        }
    }

    /// Spawn plan in effect, front to back.
    pub fn spawn_plan(&self) -> Vec<SpawnEntry> {
        if let Some(plan) = &self.spawn {
            return plan.clone();
        }
        let n = self.truck_count as usize;
        let pitch = self.vehicle.length_m + self.spawn_gap_m;
        let speed = self.spawn_speed_frac * self.resume_speed;
        (0..n)
            .map(|i| SpawnEntry {
                front_pos_m: (n - 1 - i) as f64 * pitch + self.vehicle.length_m,
                speed,
                entry_time_s: 0.0,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("scenario config", reason));
        self.vehicle.validate()?;
        if !(self.message_rate_hz.is_finite() && self.message_rate_hz > 0.0) {
            return bad(format!(
                "message_rate_hz must be > 0, got {}",
                self.message_rate_hz
            ));
        }
        for (name, v) in [
            ("road_length_m", self.road_length_m),
            ("road_speed_limit", self.road_speed_limit),
            ("desired_ivd_m", self.desired_ivd_m),
            ("margin_mps", self.margin_mps),
            ("max_time_s", self.max_time_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.tolerance_frac) {
            return bad(format!(
                "tolerance_frac must lie in [0, 1), got {}",
                self.tolerance_frac
            ));
        }
        if !(self.stability_dwell_s >= 0.0) {
            return bad(format!(
                "stability_dwell_s must be >= 0, got {}",
                self.stability_dwell_s
            ));
        }
        if !(self.braking_trigger_s < self.acceleration_trigger_s) {
            return bad(format!(
                "braking_trigger_s ({}) must precede acceleration_trigger_s ({})",
                self.braking_trigger_s, self.acceleration_trigger_s
            ));
        }
        if !(self.resume_speed >= 0.0 && self.resume_speed <= self.vehicle.max_speed) {
            return bad(format!(
                "resume_speed must lie in [0, max_speed], got {}",
                self.resume_speed
            ));
        }
        if let Some(g) = &self.follow_guard {
            g.validate()?;
        }
        if self.physics_substeps == 0 {
            return bad("physics_substeps must be >= 1".into());
        }
        let plan = self.spawn_plan();
        if plan.is_empty() {
            return bad("at least one truck is required".into());
        }
        if self.spawn.is_some() && plan.len() != self.truck_count as usize {
            return bad(format!(
                "spawn plan lists {} trucks but truck_count is {}",
                plan.len(),
                self.truck_count
            ));
        }
        for (i, e) in plan.iter().enumerate() {
            if !(e.speed >= 0.0 && e.speed <= self.vehicle.max_speed) {
                return bad(format!("spawn[{i}].speed out of range: {}", e.speed));
            }
            if !e.front_pos_m.is_finite() || !(e.entry_time_s >= 0.0) {
                return bad(format!(
                    "spawn[{i}] has a non-finite position or negative entry time"
                ));
            }
        }
        for (i, w) in plan.windows(2).enumerate() {
            let gap = w[0].front_pos_m - self.vehicle.length_m - w[1].front_pos_m;
            if !(gap > 0.0) {
                return bad(format!(
                    "spawn[{}] must start strictly behind spawn[{i}] with a positive gap (gap {gap})",
                    i + 1
                ));
            }
        }
        Ok(())
    }
}

/// Phase and the tick it was entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub entry_tick: u64,
}

impl PhaseState {
    /// Move forward to `next`; moving backwards is ignored.
    fn advance(&mut self, next: Phase, tick: u64) -> bool {
        if next > self.phase {
            self.phase = next;
            self.entry_tick = tick;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub tick: u64,
    pub follower_id: u32,
    pub leader_id: u32,
    pub closing_speed: f64,
}

/// Bumper-to-bumper gap from the leader's rear to the follower's front.
pub fn pair_gap(
    leader: &VehicleState,
    leader_params: &VehicleParams,
    follower: &VehicleState,
) -> f64 {
    leader.rear_pos_m(leader_params) - follower.front_pos_m
}

pub fn antenna_distance(
    pl: &VehicleState,
    pl_params: &VehicleParams,
    pm: &VehicleState,
    pm_params: &VehicleParams,
) -> f64 {
    (pl.antenna_pos_m(pl_params) - pm.antenna_pos_m(pm_params)).abs()
}

/// Online detector: all members inside the band for `dwell_s` without a
/// break.
#[derive(Debug, Clone)]
pub struct StabilityTracker {
    lo: f64,
    hi: f64,
    dwell_s: f64,
    run_start_s: Option<f64>,
}

impl StabilityTracker {
    pub fn new(desired_ivd: f64, tolerance_frac: f64, dwell_s: f64) -> Self {
        Self {
            lo: desired_ivd * (1.0 - tolerance_frac),
            hi: desired_ivd * (1.0 + tolerance_frac),
            dwell_s,
            run_start_s: None,
        }
    }

    pub fn in_band(&self, ivd: f64) -> bool {
        ivd >= self.lo && ivd <= self.hi
    }

    /// Feed one instant. Returns the time the dwell requirement was met.
    pub fn observe(&mut self, time_s: f64, ivds: impl IntoIterator<Item = f64>) -> Option<f64> {
        let mut any = false;
        let mut all_in = true;
        for g in ivds {
            any = true;
            all_in &= self.in_band(g);
        }
        if !(any && all_in) {
            self.run_start_s = None;
            return None;
        }
        let start = *self.run_start_s.get_or_insert(time_s);
        (time_s - start + TIME_EPS >= self.dwell_s).then_some(time_s)
    }
}

/// Time from `acceleration_start_s` until every member has stayed inside the
/// band for `dwell_s`.
///
/// The search opens once every vehicle in the trace is moving again after
/// the acceleration start. A platoon parked at the desired spacing is
/// trivially inside the band, and counting that would measure nothing.
pub fn detect_stability(
    trace: &[TraceRecord],
    desired_ivd: f64,
    tolerance_frac: f64,
    dwell_s: f64,
    acceleration_start_s: f64,
) -> Option<f64> {
    let mut tracker = StabilityTracker::new(desired_ivd, tolerance_frac, dwell_s);
    let mut departed = false;
    for tick_records in trace.chunk_by(|a, b| a.tick == b.tick) {
        let t = tick_records[0].time_s;
        if t + TIME_EPS < acceleration_start_s {
            continue;
        }
        departed |= tick_records.iter().all(|r| r.speed_mps > 0.0);
        if !departed {
            continue;
        }
        let ivds = tick_records.iter().filter_map(|r| r.ivd_m);
        if let Some(done) = tracker.observe(t, ivds) {
            return Some(done - acceleration_start_s);
        }
    }
    None
}

#[derive(Debug, Clone)]
struct Vehicle {
    state: VehicleState,
    spawn: SpawnEntry,
    buffer: DelayBuffer,
    last_command: Option<Action>,
    last_receipt_tick: Option<u64>,
    uplink: Option<bool>,
    downlink: Option<bool>,
}

/// Curves used for each link direction.
#[derive(Debug, Clone)]
pub struct Links {
    pub uplink: PdrCurve,
    pub downlink: PdrCurve,
}

impl Links {
    pub fn symmetric(curve: PdrCurve) -> Self {
        Self {
            uplink: curve.clone(),
            downlink: curve,
        }
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub summary: RunSummary,
    pub phases: Vec<PhaseState>,
}

/// Simulate one scenario to completion.
pub fn run(config: &ScenarioConfig, links: &Links, schedule: &LossSchedule) -> Result<RunOutput> {
    let mut sim = Simulation::new(config, links, schedule)?;
    while sim.step()? {}
    sim.finish()
}

/// Tick-by-tick driver behind [`run`].
pub struct Simulation<'a> {
    config: &'a ScenarioConfig,
    links: &'a Links,
    schedule: &'a LossSchedule,
    params: VehicleParams,
    vehicles: Vec<Vehicle>,
    leader: usize,
    controller: ControllerState,
    rng: ChannelRng,
    phase: PhaseState,
    phases: Vec<PhaseState>,
    formation_tracker: StabilityTracker,
    stability_tracker: StabilityTracker,
    braking_tick: u64,
    accel_tick: u64,
    rest_ticks: u64,
    departed: bool,
    tick: u64,
    done: bool,
    trace: Vec<TraceRecord>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: &'a ScenarioConfig,
        links: &'a Links,
        schedule: &'a LossSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let vehicles: Vec<Vehicle> = config
            .spawn_plan()
            .iter()
            .enumerate()
            .map(|(i, e)| Vehicle {
                state: VehicleState::cruising(i as u32, e.front_pos_m, e.speed),
                spawn: *e,
                buffer: DelayBuffer::new(),
                last_command: None,
                last_receipt_tick: None,
                uplink: None,
                downlink: None,
            })
            .collect();
        let descriptors: Vec<VehicleDescriptor> = vehicles
            .iter()
            .map(|v| VehicleDescriptor {
                id: v.state.id,
                kind: VehicleKind::Truck,
                front_pos_m: v.state.front_pos_m,
            })
            .collect();
        let leader = select_leader(&descriptors)? as usize;
        let tracker = StabilityTracker::new(
            config.desired_ivd_m,
            config.tolerance_frac,
            config.stability_dwell_s,
        );
        let phase = PhaseState {
            phase: Phase::Formation,
            entry_tick: 0,
        };
        Ok(Self {
            config,
            links,
            schedule,
            params: config.vehicle,
            leader,
            controller: ControllerState::new(config.controller_config()),
            rng: ChannelRng::new(config.seed),
            phase,
            phases: vec![phase],
            formation_tracker: tracker.clone(),
            stability_tracker: tracker,
            braking_tick: config.tick_at(config.braking_trigger_s),
            accel_tick: config.tick_at(config.acceleration_trigger_s),
            rest_ticks: config.tick_at(config.acceleration_trigger_s)
                - config.tick_at(config.braking_trigger_s),
            departed: false,
            tick: 0,
            done: false,
            trace: Vec::new(),
            vehicles,
        })
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn phase(&self) -> Phase {
        self.phase.phase
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn vehicle(&self, id: u32) -> Option<&VehicleState> {
        self.vehicles.get(id as usize).map(|v| &v.state)
    }

    pub fn leader_id(&self) -> u32 {
        self.vehicles[self.leader].state.id
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    fn follow_guard_standoff(&self) -> Option<f64> {
        let g = self.config.follow_guard?;
        Some(g.standoff_m.unwrap_or(self.controller.band().0))
    }

    fn advance(&mut self, next: Phase) {
        if self.phase.advance(next, self.tick) {
            self.phases.push(self.phase);
            self.controller.set_phase(next);
        }
    }

    /// The leader's own commands skip the radio but not the reaction time.
    fn command_leader(&mut self, action: Action, now: f64) {
        let reaction = self.params.reaction_time_s;
        let l = &mut self.vehicles[self.leader];
        let cmd = ActionCommand {
            member_id: l.state.id,
            action,
            issue_tick: self.tick,
        };
        l.buffer.enqueue(cmd, now, reaction);
        l.last_receipt_tick = Some(self.tick);
    }

    /// Run one tick. Returns `false` once the run is over.
    pub fn step(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        let tick = self.tick;
        let now = self.config.time_of(tick);
        let params = self.params;
        let order = physical_order(&self.vehicles);

        let collision = order.windows(2).find_map(|w| {
            let (a, b) = (&self.vehicles[w[0]].state, &self.vehicles[w[1]].state);
            (pair_gap(a, &params, b) <= 0.0).then_some(CollisionRecord {
                tick,
                follower_id: b.id,
                leader_id: a.id,
                closing_speed: b.speed - a.speed,
            })
        });

        for v in self.vehicles.iter_mut() {
            v.uplink = None;
            v.downlink = None;
        }

        if collision.is_none() {
            match self.phase.phase {
                Phase::Cruise if tick >= self.braking_tick => {
                    self.advance(Phase::EmergencyBraking);
                    self.command_leader(Action::EmergencyBrake, now);
                    // A late braking start pushes the restart back by the same amount.
                    self.accel_tick = self.accel_tick.max(tick + self.rest_ticks);
                }
                Phase::EmergencyBraking if self.vehicles.iter().all(|v| v.state.speed == 0.0) => {
                    self.advance(Phase::Standstill);
                }
                Phase::Standstill if tick >= self.accel_tick => {
                    self.advance(Phase::Acceleration);
                    self.command_leader(
                        Action::Resume {
                            target_speed: self.config.resume_speed,
                        },
                        now,
                    );
                }
                _ => {}
            }

            if self.phase.phase == Phase::Formation {
                admit_next(
                    &mut self.controller,
                    &self.vehicles,
                    &order,
                    self.leader,
                    now,
                    &params,
                );
            }
            self.exchange(tick, now, &order);
        }

        let member_ivds: Vec<f64> = self
            .controller
            .members()
            .iter()
            .filter_map(|&id| predecessor_gap(&self.vehicles, &order, id as usize, &params))
            .map(quantize)
            .collect();
        if collision.is_none() {
            match self.phase.phase {
                Phase::Formation => {
                    let all_admitted = self.controller.members().len() + 1 == self.vehicles.len();
                    let settled = self
                        .formation_tracker
                        .observe(now, member_ivds.iter().copied());
                    if all_admitted && (settled.is_some() || member_ivds.is_empty()) {
                        self.advance(Phase::Cruise);
                    }
                }
                Phase::Acceleration => {
                    self.departed |= self.vehicles.iter().all(|v| v.state.speed > 0.0);
                    if self.departed
                        && self
                            .stability_tracker
                            .observe(now, member_ivds.iter().copied())
                            .is_some()
                    {
                        self.advance(Phase::Stable);
                    }
                }
                _ => {}
            }
        }

        for &idx in &order {
            let v = &self.vehicles[idx];
            self.trace.push(TraceRecord {
                tick,
                time_s: quantize(now),
                vehicle_id: v.state.id,
                front_pos_m: quantize(v.state.front_pos_m),
                speed_mps: quantize(v.state.speed),
                ivd_m: predecessor_gap(&self.vehicles, &order, idx, &params).map(quantize),
                last_command: v.last_command,
                command_age_ticks: v.last_receipt_tick.map(|t| tick - t),
                uplink_delivered: v.uplink,
                downlink_delivered: v.downlink,
                phase: self.phase.phase,
            });
        }

        let road_end = self.vehicles[self.leader].state.front_pos_m >= self.config.road_length_m;
        if collision.is_some() || road_end || tick >= self.config.max_ticks() {
            self.done = true;
            return Ok(false);
        }

        let substeps = self.config.physics_substeps;
        let sub_dt = self.config.dt() / substeps as f64;
        let standoff = self.follow_guard_standoff().unwrap_or_default();
        for _ in 0..substeps {
            let order = physical_order(&self.vehicles);
            let mut ceilings = vec![None; self.vehicles.len()];
            if let Some(guard) = &self.config.follow_guard {
                for w in order.windows(2) {
                    let (p, me) = (&self.vehicles[w[0]].state, &self.vehicles[w[1]].state);
                    if me.mode == Mode::Regulated {
                        let gap = pair_gap(p, &params, me);
                        ceilings[w[1]] =
                            Some(guard.ceiling(me.speed, p.speed, gap, standoff, sub_dt));
                    }
                }
            }
            for (v, cap) in self.vehicles.iter_mut().zip(ceilings) {
                v.state = step_capped(&v.state, &params, sub_dt, cap);
            }
        }
        self.tick += 1;
        Ok(true)
    }

    /// Uplink reports, controller decisions, downlink commands, actuation.
    fn exchange(&mut self, tick: u64, now: f64, order: &[usize]) {
        let params = self.params;
        let leader_state = self.vehicles[self.leader].state;
        let members: Vec<u32> = self.controller.members().to_vec();

        self.controller.begin_tick();
        for &id in &members {
            let idx = id as usize;
            let ivd = predecessor_gap(&self.vehicles, order, idx, &params);
            let state = self.vehicles[idx].state;
            let report = StatusReport {
                member_id: id,
                position_m: state.front_pos_m,
                speed: state.speed,
                ivd_m: ivd.unwrap_or(f64::INFINITY),
            };
            let dist = antenna_distance(&leader_state, &params, &state, &params);
            let ok = transmit(
                &self.links.uplink,
                &mut self.rng,
                self.schedule,
                dist,
                tick,
                Direction::Up,
                id,
            );
            self.vehicles[idx].uplink = Some(ok);
            if ok {
                self.controller.on_status_report(report, tick);
            }
        }

        for &id in &members {
            let idx = id as usize;
            let command = self
                .controller
                .compute_action(id, tick)
                .expect("members list and controller agree");
            let dist = antenna_distance(&leader_state, &params, &self.vehicles[idx].state, &params);
            let ok = transmit(
                &self.links.downlink,
                &mut self.rng,
                self.schedule,
                dist,
                tick,
                Direction::Down,
                id,
            );
            let v = &mut self.vehicles[idx];
            v.downlink = Some(ok);
            if ok {
                v.buffer.enqueue(command, now, params.reaction_time_s);
                v.last_receipt_tick = Some(tick);
            }
        }

        let margin = self.config.margin_mps;
        let reference = self.config.margin_reference;
        for v in self.vehicles.iter_mut() {
            if let Some(cmd) = v.buffer.pop_effective(now) {
                v.state.actuate(&cmd, margin, reference, &params);
                v.last_command = Some(cmd.action);
            }
        }
    }

    pub fn finish(self) -> Result<RunOutput> {
        let summary = summarize(&self.trace, self.config)?;
        Ok(RunOutput {
            trace: self.trace,
            summary,
            phases: self.phases,
        })
    }
}

/// Vehicle indices sorted front to back.
fn physical_order(vehicles: &[Vehicle]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vehicles.len()).collect();
    order.sort_by(|&a, &b| {
        vehicles[b]
            .state
            .front_pos_m
            .total_cmp(&vehicles[a].state.front_pos_m)
            .then(a.cmp(&b))
    });
    order
}

fn predecessor_gap(
    vehicles: &[Vehicle],
    order: &[usize],
    idx: usize,
    params: &VehicleParams,
) -> Option<f64> {
    let pos = order.iter().position(|&i| i == idx)?;
    let prev = *order.get(pos.checked_sub(1)?)?;
    Some(pair_gap(
        &vehicles[prev].state,
        params,
        &vehicles[idx].state,
    ))
}

/// Admit the nearest eligible truck once every current member is inside the
/// band.
fn admit_next(
    controller: &mut ControllerState,
    vehicles: &[Vehicle],
    order: &[usize],
    leader: usize,
    now: f64,
    params: &VehicleParams,
) {
    let (lo, hi) = controller.band();
    let settled = controller.members().iter().all(|&id| {
        predecessor_gap(vehicles, order, id as usize, params).is_some_and(|g| g >= lo && g <= hi)
    });
    if !settled {
        return;
    }
    let tail = controller
        .members()
        .last()
        .map_or(leader, |&id| id as usize);
    let tail_rear = vehicles[tail].state.rear_pos_m(params);
    let candidates: Vec<CandidateInfo> = vehicles
        .iter()
        .enumerate()
        .filter(|(i, v)| {
            *i != leader
                && !controller.is_member(v.state.id)
                && v.spawn.entry_time_s <= now + TIME_EPS
        })
        .map(|(_, v)| CandidateInfo {
            vehicle_id: v.state.id,
            distance_to_last_member_m: (tail_rear - v.state.front_pos_m).abs(),
            speed: v.state.speed,
        })
        .collect();
    let platoon_speed = vehicles[leader].state.speed;
    if platoon_speed <= 0.0 {
        return;
    }
    if let Some(best) = eligible_candidates(platoon_speed, &candidates).first() {
        let v = &vehicles[best.vehicle_id as usize];
        let hint = (v.state.front_pos_m > tail_rear).then_some(v.state.front_pos_m);
        let _ = controller.admit_member(best.vehicle_id, hint);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATE: f64 = 10.0;

    /// A three-truck trace at 10 Hz from `t0` to `t1`; `ivd(t, member)` and
    /// `speed(t)` shape it.
    fn trace(
        t0: f64,
        t1: f64,
        ivd: impl Fn(f64, u32) -> f64,
        speed: impl Fn(f64) -> f64,
    ) -> Vec<TraceRecord> {
        let first = (t0 * RATE).round() as u64;
        let last = (t1 * RATE).round() as u64;
        let mut out = Vec::new();
        for tick in first..=last {
            let t = tick as f64 / RATE;
            for id in 0..3u32 {
                out.push(TraceRecord {
                    tick,
                    time_s: t,
                    vehicle_id: id,
                    front_pos_m: 100.0 - 20.0 * id as f64,
                    speed_mps: speed(t),
                    ivd_m: (id > 0).then(|| ivd(t, id)),
                    last_command: None,
                    command_age_ticks: None,
                    uplink_delivered: None,
                    downlink_delivered: None,
                    phase: Phase::Acceleration,
                });
            }
        }
        out
    }

    fn settles_at_125(t: f64, _: u32) -> f64 {
        if t + TIME_EPS < 125.0 {
            8.0
        } else {
            5.0
        }
    }

    #[test]
    fn stability_after_dwell() {
        let tr = trace(100.0, 130.0, settles_at_125, |_| 20.0);
        let got = detect_stability(&tr, 5.0, 0.1, 1.0, 100.0).unwrap();
        assert!((got - 26.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn zero_dwell_is_first_instant() {
        let tr = trace(100.0, 130.0, settles_at_125, |_| 20.0);
        let got = detect_stability(&tr, 5.0, 0.1, 0.0, 100.0).unwrap();
        assert!((got - 25.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn flicker_never_stabilizes() {
        let flicker = |t: f64, id: u32| {
            let half_seconds = (t * 2.0 + TIME_EPS).floor() as u64;
            if id == 2 && half_seconds % 2 == 1 {
                6.0
            } else {
                5.0
            }
        };
        let tr = trace(100.0, 200.0, flicker, |_| 20.0);
        assert_eq!(detect_stability(&tr, 5.0, 0.1, 1.0, 100.0), None);
    }

    #[test]
    fn band_edges_are_inside() {
        let tr = trace(0.0, 3.0, |_, id| if id == 1 { 4.5 } else { 5.5 }, |_| 1.0);
        assert_eq!(detect_stability(&tr, 5.0, 0.1, 1.0, 0.0), Some(1.0));
    }

    #[test]
    fn parked_platoon_does_not_count() {
        // In band the whole time, but nobody moves until 3 s.
        let tr = trace(0.0, 10.0, |_, _| 5.0, |t| if t < 3.0 { 0.0 } else { 1.0 });
        let got = detect_stability(&tr, 5.0, 0.1, 1.0, 0.0).unwrap();
        assert!((got - 4.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn ignores_records_before_start() {
        let tr = trace(0.0, 10.0, |_, _| 5.0, |_| 1.0);
        let got = detect_stability(&tr, 5.0, 0.1, 1.0, 5.0).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn pair_gap_and_antenna_distance() {
        let p = VehicleParams::truck();
        let lead = VehicleState::cruising(0, 100.0, 0.0);
        let follow = VehicleState::cruising(1, 81.4, 0.0);
        assert!((pair_gap(&lead, &p, &follow) - 5.0).abs() < 1e-9);
        // Antennas sit at the same offset, so the distance is the pitch.
        assert!((antenna_distance(&lead, &p, &follow, &p) - 18.6).abs() < 1e-9);
        let touching = VehicleState::cruising(1, 86.4, 0.0);
        assert!(pair_gap(&lead, &p, &touching) <= 0.0);
    }

    #[test]
    fn pm4_antenna_distance_at_desired_spacing() {
        let p = VehicleParams::truck();
        let pitch = p.length_m + 5.0;
        let pl = VehicleState::cruising(0, 4.0 * pitch, 0.0);
        let pm4 = VehicleState::cruising(4, 0.0, 0.0);
        assert!((antenna_distance(&pl, &p, &pm4, &p) - 74.4).abs() < 1e-9);
    }

    #[test]
    fn phase_never_moves_backwards() {
        let mut ps = PhaseState {
            phase: Phase::Formation,
            entry_tick: 0,
        };
        assert!(ps.advance(Phase::EmergencyBraking, 10));
        assert!(!ps.advance(Phase::Cruise, 11));
        assert_eq!(ps.phase, Phase::EmergencyBraking);
        assert_eq!(ps.entry_tick, 10);
    }

    #[test]
    fn tick_time_conversions() {
        let c = ScenarioConfig::default();
        assert_eq!(c.tick_at(100.0), 8000);
        assert_eq!(c.time_of(8000), 100.0);
        assert_eq!(c.tick_at(0.3), 24);
        let c10 = ScenarioConfig {
            message_rate_hz: 10.0,
            ..Default::default()
        };
        assert_eq!(c10.tick_at(125.0), 1250);
    }

    #[test]
    fn generated_spawn_plan_is_ordered() {
        let c = ScenarioConfig::default();
        let plan = c.spawn_plan();
        assert_eq!(plan.len(), 5);
        for w in plan.windows(2) {
            let gap = w[0].front_pos_m - c.vehicle.length_m - w[1].front_pos_m;
            assert!((gap - c.spawn_gap_m).abs() < 1e-9);
        }
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let bad = [
            ScenarioConfig {
                message_rate_hz: 0.0,
                ..Default::default()
            },
            ScenarioConfig {
                tolerance_frac: 1.5,
                ..Default::default()
            },
            ScenarioConfig {
                braking_trigger_s: 130.0,
                ..Default::default()
            },
            ScenarioConfig {
                resume_speed: 40.0,
                ..Default::default()
            },
            ScenarioConfig {
                truck_count: 0,
                ..Default::default()
            },
            ScenarioConfig {
                physics_substeps: 0,
                ..Default::default()
            },
            ScenarioConfig {
                spawn: Some(vec![
                    SpawnEntry {
                        front_pos_m: 10.0,
                        speed: 5.0,
                        entry_time_s: 0.0,
                    },
                    SpawnEntry {
                        front_pos_m: 10.0,
                        speed: 5.0,
                        entry_time_s: 0.0,
                    },
                ]),
                truck_count: 2,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let c: ScenarioConfig = serde_json::from_str(r#"{"message_rate_hz": 40}"#).unwrap();
        assert_eq!(c.message_rate_hz, 40.0);
        assert_eq!(c.truck_count, 5);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"bogus": 1}"#).is_err());
        let off: ScenarioConfig = serde_json::from_str(r#"{"follow_guard": null}"#).unwrap();
        assert!(off.follow_guard.is_none());
    }
}
