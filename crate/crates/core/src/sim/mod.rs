//! The closed-loop race world and the offline race runner.

mod driver;
mod trace;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

pub use driver::line_follower_control;
pub use trace::{
    read_trace, Event, EventKind, ForcedOverrun, InputScript, RaceOutcome, ScriptedInput,
    StopReason, TraceRow, TraceWriter, VehicleOutcome, VehicleRow, TRACE_SCHEMA_VERSION,
};

use crate::brmppi::{br_mppi_cycle, predict_opponent, AgentRole, BrAgent, OpponentPlan};
use crate::config::{Config, Driver, VehicleSpec};
use crate::cost::{longitudinal_sign, relative_longitudinal, running_cost};
use crate::dynamics::{rollout, step, BasisModel, DynamicsModel};
use crate::error::{Error, Result};
use crate::mppi::{derive_seed, ControlSequence, PlanOutput};
use crate::state::{ControlInput, VehicleState};
use crate::track::TrackMap;
use crate::v2v::{Channel, Downsampler, Inbox};

/// Seed stream reserved for the radio channel.
const CHANNEL_STREAM: u64 = 0xC4A7;

#[derive(Debug, Clone, Default)]
struct Score {
    /// Progress accumulated across laps, relative to the start.
    travelled: f64,
    last_progress: f64,
    laps: i64,
    gained_lead: u32,
    lost_lead: u32,
    collisions: u32,
    off_track: u32,
    is_off_track: bool,
    speed_sum: f64,
    max_speed: f64,
    distance: f64,
    samples: u64,
}

/// What an observer last predicted for one opponent.
#[derive(Debug, Clone)]
struct CachedPrediction {
    made_at_step: u64,
    states: Vec<VehicleState>,
}

#[derive(Debug, Clone)]
struct Vehicle {
    spec: VehicleSpec,
    state: VehicleState,
    /// Control held since the last decision.
    control: ControlInput,
    /// Incumbent plan, aligned with the next replan.
    plan: Option<ControlSequence>,
    planned_path: Vec<[f64; 2]>,
    last_prediction: Option<CachedPrediction>,
    plan_cost: Option<f64>,
    score: Score,
}

#[derive(Debug, Clone, Copy, Default)]
struct PairState {
    /// +1 when the higher-index vehicle is ahead of the lower-index one.
    sign: i8,
    in_collision: bool,
}

/// Everything the world stepper owns.
pub struct RaceWorld {
    config: Config,
    track: TrackMap,
    plant: Arc<dyn DynamicsModel>,
    controller_model: Arc<dyn DynamicsModel>,
    peer_model: BasisModel,
    vehicles: Vec<Vehicle>,
    pairs: Vec<PairState>,
    obstacle_contact: Vec<Vec<bool>>,
    channel: Channel,
    inbox: Inbox,
    downsamplers: Vec<Downsampler>,
    human_input: ControlInput,
    steps: u64,
    fault: Option<Error>,
    events: Vec<Event>,
    replans: u64,
    overruns: u64,
    planner_errors: u64,
    stale_predictions: u64,
    planner_slowdown: f64,
    forced_overruns: BTreeSet<(u64, u8)>,
}

impl std::fmt::Debug for RaceWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RaceWorld")
            .field("steps", &self.steps)
            .field("vehicles", &self.vehicles.len())
            .field("fault", &self.fault)
            .finish_non_exhaustive()
    }
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    // Row-major upper triangle without the diagonal.
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl RaceWorld {
    /// Validates `config` and places every vehicle at its start pose.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let track = config.build_track()?;
        let controller_model = config.build_controller_model()?;
        let mut channel_params = config.channel.clone();
        channel_params.rng_seed = derive_seed(config.race.seed, CHANNEL_STREAM ^ config.channel.rng_seed);
        let channel = Channel::new(channel_params)?;
        let mut vehicles = Vec::with_capacity(config.race.vehicles.len());
        let mut downsamplers = Vec::with_capacity(config.race.vehicles.len());
        for spec in &config.race.vehicles {
            let (x, y, yaw) = track.pose_at(spec.start_progress, spec.start_lateral);
            let state = VehicleState {
                x,
                y,
                yaw,
                v_x: spec.start_speed,
                ..Default::default()
            };
            let progress = track.progress(x, y);
            let plan = (spec.driver == Driver::Autonomous).then(|| ControlSequence::zeros(config.mppi.horizon));
            vehicles.push(Vehicle {
                spec: spec.clone(),
                state,
                control: ControlInput::ZERO,
                plan,
                planned_path: Vec::new(),
                last_prediction: None,
                plan_cost: None,
                score: Score {
                    last_progress: progress,
                    ..Default::default()
                },
            });
            downsamplers.push(Downsampler::new(spec.id, config.channel.broadcast_hz)?);
        }
        let n = vehicles.len();
        let obstacle_contact = vec![vec![false; config.costs.static_obstacles.len()]; n];
        Ok(Self {
            track,
            plant: config.build_plant_model()?,
            controller_model,
            peer_model: BasisModel::reference(),
            pairs: vec![PairState::default(); n * n.saturating_sub(1) / 2],
            obstacle_contact,
            channel,
            inbox: Inbox::new(),
            downsamplers,
            vehicles,
            human_input: ControlInput::ZERO,
            steps: 0,
            fault: None,
            events: Vec::new(),
            replans: 0,
            overruns: 0,
            planner_errors: 0,
            stale_predictions: 0,
            planner_slowdown: 1.0,
            forced_overruns: BTreeSet::new(),
            config,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn track(&self) -> &TrackMap {
        &self.track
    }

    /// Simulation clock: `steps * dt`.
    pub fn clock(&self) -> f64 {
        self.steps as f64 * self.config.race.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn fault(&self) -> Option<&Error> {
        self.fault.as_ref()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn vehicle_ids(&self) -> Vec<u8> {
        self.vehicles.iter().map(|v| v.spec.id).collect()
    }

    pub fn state(&self, id: u8) -> Option<VehicleState> {
        self.vehicles.iter().find(|v| v.spec.id == id).map(|v| v.state)
    }

    /// Positions of the most recent plan of an autonomous vehicle.
    pub fn planned_path(&self, id: u8) -> &[[f64; 2]] {
        self.vehicles
            .iter()
            .find(|v| v.spec.id == id)
            .map_or(&[], |v| v.planned_path.as_slice())
    }

    pub fn human_vehicle(&self) -> Option<u8> {
        self.vehicles
            .iter()
            .find(|v| v.spec.driver == Driver::Human)
            .map(|v| v.spec.id)
    }

    pub fn human_input(&self) -> ControlInput {
        self.human_input
    }

    pub fn overruns(&self) -> u64 {
        self.overruns
    }

    /// Test hook: measured replan times are multiplied by `factor` before
    /// being compared with the budget.
    pub fn set_planner_slowdown(&mut self, factor: f64) {
        self.planner_slowdown = factor;
    }

    /// Makes the replan of `vehicle` at `step` count as overrun, whatever its
    /// real duration. Used to replay recorded sessions.
    pub fn force_overrun(&mut self, step: u64, vehicle: u8) {
        self.forced_overruns.insert((step, vehicle));
    }

    fn t_of(&self, step: u64) -> f64 {
        step as f64 * self.config.race.dt
    }

    fn push_event(&mut self, events: &mut Vec<Event>, kind: EventKind) {
        let ev = Event {
            step: self.steps,
            t: self.t_of(self.steps + 1),
            kind,
        };
        events.push(ev.clone());
        self.events.push(ev);
    }

    /// Advances the world by one physics step.
    ///
    /// `human_input`, when given, replaces the held input of the human
    /// vehicle (clamped to the actuator limits); otherwise the previous one
    /// is held.
    pub fn world_step(&mut self, human_input: Option<ControlInput>) -> Result<TraceRow> {
        if let Some(f) = &self.fault {
            return Err(f.clone());
        }
        if let Some(u) = human_input {
            if !u.is_finite() {
                return Err(Error::NonFinite("human input".into()));
            }
            self.human_input = u.clamped();
        }
        let now = self.clock();
        let mut events = Vec::new();

        self.exchange_poses(now);
        let mut overran = Vec::new();
        if self.steps % self.config.race.replan_every as u64 == 0 {
            self.replan(now, &mut events, &mut overran);
        } else {
            for v in &mut self.vehicles {
                v.plan_cost = None;
            }
        }

        let dt = self.config.race.dt;
        let mut next_states = Vec::with_capacity(self.vehicles.len());
        for v in &mut self.vehicles {
            v.control = match &v.spec.driver {
                Driver::Autonomous => v.control,
                Driver::Human => self.human_input,
                Driver::Parked => ControlInput::ZERO,
                Driver::LineFollower { speed, lateral } => {
                    line_follower_control(&self.track, &v.state, *speed, *lateral)
                }
            };
            let next = if v.spec.driver == Driver::Parked {
                Ok(v.state)
            } else {
                // A finite but absurd state can still overflow the derived
                // trace columns, so those count as a blowup too.
                step(self.plant.as_ref(), &v.state, &v.control, dt).and_then(|s| {
                    let cost = running_cost(&s, 0, &self.track, &self.config.costs.running);
                    if cost.is_finite() {
                        Ok(s)
                    } else {
                        Err(Error::DynamicsBlowup { step: 0, field: "running cost" })
                    }
                })
            };
            match next {
                Ok(s) => next_states.push(s),
                Err(e) => {
                    let message = format!("vehicle {}: {e}", v.spec.id);
                    self.fault = Some(e.clone());
                    let ev = Event {
                        step: self.steps,
                        t: self.t_of(self.steps + 1),
                        kind: EventKind::Fault { message },
                    };
                    self.events.push(ev);
                    return Err(e);
                }
            }
        }
        for (v, s) in self.vehicles.iter_mut().zip(next_states) {
            let (dx, dy) = (s.x - v.state.x, s.y - v.state.y);
            v.score.distance += dx.hypot(dy);
            v.state = s;
        }
        self.detect_events(&mut events);
        self.steps += 1;

        let rows = self.vehicle_rows();
        Ok(TraceRow {
            schema_version: TRACE_SCHEMA_VERSION,
            step: self.steps - 1,
            t: self.clock(),
            vehicles: rows,
            events,
            human_input: self.human_vehicle().map(|_| self.human_input),
            overruns: overran,
        })
    }

    fn exchange_poses(&mut self, now: f64) {
        for (v, ds) in self.vehicles.iter().zip(self.downsamplers.iter_mut()) {
            if let Some(msg) = ds.push(now, &v.state) {
                // Drops are the channel's business; the sender never learns of them.
                let _ = self.channel.transmit(msg, now);
            }
        }
        for msg in self.channel.poll(now) {
            self.inbox.deliver(msg);
        }
    }

    /// Prediction of `target` for the planners, from its latest pose.
    fn predict_from_pose(
        &mut self,
        target: usize,
        now: f64,
        events: &mut Vec<Event>,
    ) -> Option<Vec<VehicleState>> {
        let horizon = self.config.mppi.horizon;
        let dt = self.config.mppi.dt;
        let id = self.vehicles[target].spec.id;
        let fresh = self.inbox.receive_latest(id, now).and_then(|(msg, _)| {
            predict_opponent(
                &OpponentPlan::Pose {
                    msg,
                    now,
                    staleness_limit: self.config.channel.staleness_limit,
                },
                horizon,
                dt,
            )
        });
        match fresh {
            Ok(states) => {
                self.vehicles[target].last_prediction = Some(CachedPrediction {
                    made_at_step: self.steps,
                    states: states.clone(),
                });
                Some(states)
            }
            Err(Error::EmptyInbox(_)) => None,
            Err(Error::StaleOpponent { age, .. }) => {
                self.stale_predictions += 1;
                for observer in 0..self.vehicles.len() {
                    if self.vehicles[observer].spec.driver == Driver::Autonomous {
                        let vehicle = self.vehicles[observer].spec.id;
                        self.push_event(
                            events,
                            EventKind::StalePrediction {
                                vehicle,
                                opponent: id,
                                age,
                            },
                        );
                    }
                }
                let cached = self.vehicles[target].last_prediction.as_ref()?;
                // Re-align the cached prediction with the current grid.
                let every = self.config.race.replan_every as u64;
                let shift = ((self.steps - cached.made_at_step) / every) as usize;
                let last = *cached.states.last()?;
                Some(
                    (0..=horizon)
                        .map(|t| cached.states.get(t + shift).copied().unwrap_or(last))
                        .collect(),
                )
            }
            Err(_) => None,
        }
    }

    fn replan(&mut self, now: f64, events: &mut Vec<Event>, overran: &mut Vec<u8>) {
        let n = self.vehicles.len();
        if !self.vehicles.iter().any(|v| v.spec.driver == Driver::Autonomous) {
            return;
        }
        let mut predictions: Vec<Option<Vec<VehicleState>>> = vec![None; n];
        for (i, pred) in predictions.iter_mut().enumerate() {
            if self.vehicles[i].spec.driver != Driver::Autonomous {
                *pred = self.predict_from_pose(i, now, events);
            }
        }
        let seed = derive_seed(self.config.race.seed, self.steps);
        let results = {
            let agents: Vec<BrAgent<'_>> = self
                .vehicles
                .iter()
                .zip(predictions)
                .map(|(v, prediction)| BrAgent {
                    role: if v.spec.driver == Driver::Autonomous {
                        AgentRole::Controlled
                    } else {
                        AgentRole::Predicted
                    },
                    state: v.state,
                    plan: v.plan.clone(),
                    model: self.controller_model.as_ref(),
                    costs: &self.config.costs,
                    prediction,
                })
                .collect();
            br_mppi_cycle(&agents, &self.peer_model, &self.track, &self.config.mppi, seed)
        };
        self.replans += 1;
        let budget_us = self.config.race.replan_budget_ms.map(|ms| ms * 1000.0);
        for (i, result) in results.into_iter().enumerate() {
            let Some(result) = result else {
                continue;
            };
            let id = self.vehicles[i].spec.id;
            let forced = self.forced_overruns.contains(&(self.steps, id));
            match result {
                Ok(out) => {
                    let measured = out.diagnostics.micros as f64 * self.planner_slowdown;
                    let over_budget = budget_us.is_some_and(|b| measured > b);
                    if forced || over_budget {
                        self.overruns += 1;
                        overran.push(id);
                        self.push_event(events, EventKind::Overrun { vehicle: id });
                        self.keep_incumbent(i);
                    } else {
                        self.accept_plan(i, out);
                    }
                }
                Err(e) => {
                    self.planner_errors += 1;
                    self.push_event(
                        events,
                        EventKind::PlannerError {
                            vehicle: id,
                            message: e.to_string(),
                        },
                    );
                    self.keep_incumbent(i);
                }
            }
        }
    }

    fn accept_plan(&mut self, i: usize, out: PlanOutput) {
        let v = &mut self.vehicles[i];
        v.planned_path = rollout(self.controller_model.as_ref(), &v.state, out.plan.as_slice(), self.config.mppi.dt)
            .map(|traj| traj.iter().map(VehicleState::position).collect())
            .unwrap_or_default();
        v.control = out.control;
        v.plan = Some(out.next);
        v.plan_cost = Some(out.diagnostics.min_cost);
    }

    /// Degraded path: actuate the incumbent's next control and shift it.
    fn keep_incumbent(&mut self, i: usize) {
        let v = &mut self.vehicles[i];
        v.plan_cost = None;
        if let Some(plan) = &v.plan {
            v.control = plan.first();
            v.plan = Some(plan.shift_receding());
        }
    }

    fn detect_events(&mut self, events: &mut Vec<Event>) {
        let n = self.vehicles.len();
        let r1 = self.config.costs.obstacle.r1;
        let racing = self.config.costs.racing;
        let hw = self.track.half_width();

        for i in 0..n {
            let s = self.vehicles[i].state;
            let id = self.vehicles[i].spec.id;
            let proj = self.track.project(s.x, s.y);
            let progress = {
                let f = proj.arc / self.track.length();
                if f >= 1.0 {
                    f - 1.0
                } else {
                    f
                }
            };
            let score = &mut self.vehicles[i].score;
            let mut delta = progress - score.last_progress;
            if delta > 0.5 {
                delta -= 1.0;
            } else if delta < -0.5 {
                delta += 1.0;
            }
            score.travelled += delta;
            score.last_progress = progress;
            let laps = score.travelled.floor() as i64;
            let lap_changed = laps != score.laps;
            score.laps = laps;
            let speed = s.speed();
            score.speed_sum += speed;
            score.samples += 1;
            score.max_speed = score.max_speed.max(speed);
            let off = proj.lateral.abs() > hw;
            let entered_off = off && !score.is_off_track;
            if entered_off {
                score.off_track += 1;
            }
            score.is_off_track = off;
            if lap_changed && laps > 0 {
                self.push_event(events, EventKind::Lap { vehicle: id, laps });
            }
            if entered_off {
                self.push_event(
                    events,
                    EventKind::OffTrack {
                        vehicle: id,
                        lateral: proj.lateral,
                    },
                );
            }
            for k in 0..self.config.costs.static_obstacles.len() {
                let o = self.config.costs.static_obstacles[k];
                let d = ((o.x - s.x).powi(2) + (o.y - s.y).powi(2)).sqrt();
                let inside = d < o.r1;
                if inside && !self.obstacle_contact[i][k] {
                    self.vehicles[i].score.collisions += 1;
                    self.push_event(events, EventKind::ObstacleCollision { vehicle: id, obstacle: k });
                }
                self.obstacle_contact[i][k] = inside;
            }
        }

        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (self.vehicles[i].state, self.vehicles[j].state);
                let (ida, idb) = (self.vehicles[i].spec.id, self.vehicles[j].spec.id);
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                let k = pair_index(n, i, j);
                let mut pair = self.pairs[k];
                let colliding = d < r1;
                if colliding && !pair.in_collision {
                    self.vehicles[i].score.collisions += 1;
                    self.vehicles[j].score.collisions += 1;
                    self.push_event(
                        events,
                        EventKind::Collision {
                            vehicles: [ida, idb],
                            distance: d,
                        },
                    );
                }
                pair.in_collision = colliding;
                if d <= racing.pass_gate {
                    let sign = longitudinal_sign(
                        pair.sign,
                        relative_longitudinal(&a, b.position()),
                        racing.sign_dead_band,
                    );
                    let passer = match (pair.sign, sign) {
                        (1, -1) => Some((i, j)),
                        (-1, 1) => Some((j, i)),
                        _ => None,
                    };
                    if let Some((w, l)) = passer {
                        let (wid, lid) = (self.vehicles[w].spec.id, self.vehicles[l].spec.id);
                        self.vehicles[w].score.gained_lead += 1;
                        self.vehicles[l].score.lost_lead += 1;
                        self.push_event(events, EventKind::GainedLead { vehicle: wid, other: lid });
                        self.push_event(events, EventKind::LostLead { vehicle: lid, other: wid });
                    }
                    pair.sign = sign;
                } else {
                    pair.sign = 0;
                }
                self.pairs[k] = pair;
            }
        }
    }

    /// Whether every autonomous vehicle has completed `laps` laps.
    pub fn laps_reached(&self, laps: u32) -> bool {
        let mut any = false;
        for v in &self.vehicles {
            if v.spec.driver == Driver::Autonomous {
                any = true;
                if v.score.laps < laps as i64 {
                    return false;
                }
            }
        }
        any
    }

    /// Per-vehicle rows for the current state, as they appear in the trace.
    pub fn vehicle_rows(&self) -> Vec<VehicleRow> {
        self.vehicles
            .iter()
            .map(|v| VehicleRow {
                id: v.spec.id,
                state: v.state,
                control: v.control,
                progress: v.score.last_progress,
                laps: v.score.laps,
                cost: running_cost(&v.state, 0, &self.track, &self.config.costs.running),
                plan_cost: v.plan_cost,
            })
            .collect()
    }

    /// Running score of every vehicle.
    pub fn vehicle_outcomes(&self) -> Vec<VehicleOutcome> {
        self.vehicles
            .iter()
            .map(|v| VehicleOutcome {
                id: v.spec.id,
                driver: v.spec.driver.name().to_string(),
                laps: v.score.laps,
                gained_lead: v.score.gained_lead,
                lost_lead: v.score.lost_lead,
                collisions: v.score.collisions,
                off_track: v.score.off_track,
                mean_speed: if v.score.samples > 0 {
                    v.score.speed_sum / v.score.samples as f64
                } else {
                    0.0
                },
                max_speed: v.score.max_speed,
                distance: v.score.distance,
            })
            .collect()
    }

    pub fn outcome(&self, stop_reason: StopReason) -> RaceOutcome {
        let vehicles = self.vehicle_outcomes();
        let collisions = self
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Collision { .. } | EventKind::ObstacleCollision { .. }))
            .count() as u32;
        RaceOutcome {
            schema_version: TRACE_SCHEMA_VERSION,
            seed: self.config.race.seed,
            steps: self.steps,
            duration: self.clock(),
            stop_reason,
            fault: self.fault.as_ref().map(|e| e.to_string()),
            pass_events: vehicles.iter().map(|v| v.gained_lead).sum(),
            off_track: vehicles.iter().map(|v| v.off_track).sum(),
            vehicles,
            collisions,
            replans: self.replans,
            overruns: self.overruns,
            planner_errors: self.planner_errors,
            stale_predictions: self.stale_predictions,
        }
    }
}

/// Arc-length fraction of the centerline point nearest to `(x, y)`, in `[0, 1)`.
pub fn progress(track: &TrackMap, x: f64, y: f64) -> f64 {
    track.progress(x, y)
}

/// Number of physics steps in `duration` seconds.
pub fn step_count(duration: f64, dt: f64) -> u64 {
    (duration / dt - 1e-9).ceil().max(0.0) as u64
}

/// Worker pool honouring `race.threads`, or the `BRRACE_THREADS` cap, or all cores.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let env_cap = std::env::var("BRRACE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = threads.or(env_cap).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::invalid("race.threads", e.to_string()))
}

/// Runs a race to its duration or lap target, optionally writing a JSONL
/// trace. A dynamics fault ends the run and is reported in the outcome.
pub fn run_race(
    config: &Config,
    script: Option<&InputScript>,
    trace_path: Option<&Path>,
) -> Result<RaceOutcome> {
    let pool = thread_pool(config.race.threads)?;
    pool.install(|| run_race_in_pool(config, script, trace_path))
}

/// Re-simulates a recorded trace: same config, the recorded human inputs and
/// overruns, and as many steps as there are rows. The wall-clock budget is
/// dropped because the recorded overruns already say which replans missed it.
pub fn run_replay(config: &Config, rows: &[TraceRow], trace_path: Option<&Path>) -> Result<RaceOutcome> {
    let mut cfg = config.clone();
    cfg.race.replan_budget_ms = None;
    cfg.race.lap_target = None;
    cfg.race.stop_on_collision = false;
    cfg.race.duration = rows.len() as f64 * cfg.race.dt;
    let script = InputScript::from_trace(rows);
    run_race(&cfg, Some(&script), trace_path)
}

fn run_race_in_pool(
    config: &Config,
    script: Option<&InputScript>,
    trace_path: Option<&Path>,
) -> Result<RaceOutcome> {
    if let Some(s) = script {
        s.validate()?;
    }
    let mut world = RaceWorld::new(config.clone())?;
    if let Some(s) = script {
        for o in &s.overruns {
            world.force_overrun(o.step, o.vehicle);
        }
    }
    let mut writer = match trace_path {
        Some(p) => Some(TraceWriter::create(p)?),
        None => None,
    };
    let total = step_count(config.race.duration, config.race.dt);
    let inputs = script.map_or(&[][..], |s| s.inputs.as_slice());
    let mut next_input = 0;
    let mut stop = StopReason::Duration;
    for k in 0..total {
        let mut input = None;
        while next_input < inputs.len() && inputs[next_input].step <= k {
            let u = inputs[next_input];
            input = Some(ControlInput::new(u.steering, u.throttle));
            next_input += 1;
        }
        let row = match world.world_step(input) {
            Ok(row) => row,
            Err(_) if world.fault().is_some() => {
                stop = StopReason::Fault;
                break;
            }
            Err(e) => return Err(e),
        };
        let collided = row
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Collision { .. } | EventKind::ObstacleCollision { .. }));
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        if collided && config.race.stop_on_collision {
            stop = StopReason::Collision;
            break;
        }
        if let Some(target) = config.race.lap_target {
            if world.laps_reached(target) {
                stop = StopReason::LapTarget;
                break;
            }
        }
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(world.outcome(stop))
}
