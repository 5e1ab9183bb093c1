//! One live session: a dedicated thread owning a `RaceWorld`, fed by a
//! command queue and publishing on a broadcast channel.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;
use tokio::sync::broadcast;

use brrace_core::config::{Config, Driver};
use brrace_core::sim::{thread_pool, Event, RaceWorld, TraceWriter};
use brrace_core::ControlInput;

use crate::protocol::{
    EventMessage, Fault, FaultCode, Frame, FrameVehicle, MessageType, ObstacleInfo, PlannedPath, Radii,
    ScoreEntry, SessionInfo, SessionState, TrackInfo, VehicleInfo,
};

/// Capacity of each session's outgoing broadcast. Slow clients skip ahead.
const BROADCAST_CAPACITY: usize = 64;
const COMMAND_CAPACITY: usize = 4096;
/// Upper bound on events carried inside one frame.
const FRAME_EVENT_LIMIT: usize = 32;

#[derive(Debug, Clone)]
pub(crate) enum Command {
    Start,
    Pause,
    Input { control: ControlInput, received: Instant },
    Slowdown(f64),
    Close,
}

/// A server message published to every client of a session.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub kind: MessageType,
    pub payload: Value,
}

impl Outgoing {
    fn new(kind: MessageType, payload: impl serde::Serialize) -> Arc<Self> {
        Arc::new(Self {
            kind,
            payload: serde_json::to_value(payload).expect("payload serialises"),
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SessionOptions {
    pub frame_hz: f64,
    pub dead_man: Duration,
    pub replay_dir: Option<PathBuf>,
}

pub(crate) type Registry = Arc<Mutex<std::collections::HashMap<String, Arc<SessionHandle>>>>;

#[derive(Debug)]
pub(crate) struct SessionHandle {
    pub info: SessionInfo,
    commands: SyncSender<Command>,
    out: broadcast::Sender<Arc<Outgoing>>,
    clients: AtomicUsize,
    state: Arc<Mutex<SessionState>>,
}

impl SessionHandle {
    pub fn send(&self, cmd: Command) -> Result<(), Fault> {
        match self.commands.try_send(cmd) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) => Err(Fault {
                code: FaultCode::Busy,
                message: "session command queue is full".into(),
                terminal: false,
            }),
            Err(TrySendError::Disconnected(_)) => Err(Fault {
                code: FaultCode::NotFound,
                message: "session has ended".into(),
                terminal: true,
            }),
        }
    }

    pub fn state(&self) -> SessionState {
        *self.state.lock().expect("state lock")
    }

    pub fn attach(&self) -> broadcast::Receiver<Arc<Outgoing>> {
        self.clients.fetch_add(1, Ordering::SeqCst);
        self.out.subscribe()
    }

    /// Closes the session when its last client leaves.
    pub fn detach(&self) {
        if self.clients.fetch_sub(1, Ordering::SeqCst) == 1 {
            let _ = self.commands.try_send(Command::Close);
        }
    }
}

fn rejection(code: FaultCode, message: impl Into<String>) -> Fault {
    Fault {
        code,
        message: message.into(),
        terminal: false,
    }
}

/// Checks a session configuration and fills in the live defaults.
pub(crate) fn prepare_config(mut config: Config) -> Result<Config, Fault> {
    config
        .validate()
        .map_err(|e| rejection(FaultCode::InvalidConfig, e.to_string()))?;
    let humans = config
        .race
        .vehicles
        .iter()
        .filter(|v| v.driver == Driver::Human)
        .count();
    if humans != 1 {
        return Err(rejection(
            FaultCode::InvalidConfig,
            format!("a live session needs exactly one human-driven vehicle, config has {humans}"),
        ));
    }
    if config.race.replan_budget_ms.is_none() {
        config.race.replan_budget_ms = Some(config.mppi.dt * 1000.0);
    }
    Ok(config)
}

fn session_info(id: &str, world: &RaceWorld) -> SessionInfo {
    let cfg = world.config();
    SessionInfo {
        session_id: id.to_string(),
        state: SessionState::Paused,
        human_vehicle: world.human_vehicle().expect("validated"),
        dt: cfg.race.dt,
        track: TrackInfo {
            half_width: world.track().half_width(),
            centerline: world.track().centerline().to_vec(),
        },
        radii: Radii {
            r1: cfg.costs.obstacle.r1,
            r2: cfg.costs.obstacle.r2,
        },
        vehicles: cfg
            .race
            .vehicles
            .iter()
            .map(|v| VehicleInfo {
                id: v.id,
                driver: v.driver.name().to_string(),
            })
            .collect(),
        static_obstacles: cfg
            .costs
            .static_obstacles
            .iter()
            .map(|o| ObstacleInfo {
                x: o.x,
                y: o.y,
                r1: o.r1,
                r2: o.r2,
            })
            .collect(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Fault> {
    std::fs::write(path, text)
        .map_err(|e| rejection(FaultCode::InvalidConfig, format!("cannot write {}: {e}", path.display())))
}

/// Builds the world and starts its thread. The session is registered under `id`.
pub(crate) fn spawn(
    id: String,
    config: Config,
    options: SessionOptions,
    registry: Registry,
) -> Result<Arc<SessionHandle>, Fault> {
    let world = RaceWorld::new(config.clone()).map_err(|e| rejection(FaultCode::InvalidConfig, e.to_string()))?;
    let pool = thread_pool(config.race.threads).map_err(|e| rejection(FaultCode::InvalidConfig, e.to_string()))?;
    let replay = match &options.replay_dir {
        Some(dir) => {
            write_text(&dir.join(format!("{id}.toml")), &config.to_toml())?;
            let path = dir.join(format!("{id}.jsonl"));
            Some(TraceWriter::create(&path).map_err(|e| rejection(FaultCode::InvalidConfig, e.to_string()))?)
        }
        None => None,
    };
    let (tx, rx) = std::sync::mpsc::sync_channel(COMMAND_CAPACITY);
    let (out, _) = broadcast::channel(BROADCAST_CAPACITY);
    let state = Arc::new(Mutex::new(SessionState::Paused));
    let handle = Arc::new(SessionHandle {
        info: session_info(&id, &world),
        commands: tx,
        out: out.clone(),
        clients: AtomicUsize::new(0),
        state: state.clone(),
    });
    registry
        .lock()
        .expect("registry lock")
        .insert(id.clone(), handle.clone());
    let runner = Runner::new(id, world, pool, out, state, options, replay);
    std::thread::Builder::new()
        .name(format!("session-{}", runner.id))
        .spawn(move || {
            let id = runner.id.clone();
            runner.run(rx);
            registry.lock().expect("registry lock").remove(&id);
        })
        .map_err(|e| rejection(FaultCode::Busy, format!("cannot start session thread: {e}")))?;
    Ok(handle)
}

struct Runner {
    id: String,
    world: RaceWorld,
    pool: rayon::ThreadPool,
    out: broadcast::Sender<Arc<Outgoing>>,
    state: Arc<Mutex<SessionState>>,
    options: SessionOptions,
    replay: Option<TraceWriter>,
    running: bool,
    /// Wall time and step count when the clock last (re)started.
    anchor: (Instant, u64),
    input: Option<(ControlInput, Instant)>,
    frame_no: u64,
    pending: Vec<Event>,
    fault: Option<String>,
    closing: bool,
}

impl Runner {
    fn new(
        id: String,
        world: RaceWorld,
        pool: rayon::ThreadPool,
        out: broadcast::Sender<Arc<Outgoing>>,
        state: Arc<Mutex<SessionState>>,
        options: SessionOptions,
        replay: Option<TraceWriter>,
    ) -> Self {
        Self {
            id,
            world,
            pool,
            out,
            state,
            options,
            replay,
            running: false,
            anchor: (Instant::now(), 0),
            input: None,
            frame_no: 0,
            pending: Vec::new(),
            fault: None,
            closing: false,
        }
    }

    fn publish(&self, msg: Arc<Outgoing>) {
        // No receivers is fine: frames are only for whoever is listening.
        let _ = self.out.send(msg);
    }

    fn set_state(&self, s: SessionState) {
        *self.state.lock().expect("state lock") = s;
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Start => {
                if !self.running && self.fault.is_none() {
                    self.running = true;
                    self.anchor = (Instant::now(), self.world.steps());
                    self.set_state(SessionState::Running);
                }
            }
            Command::Pause => {
                if self.running {
                    self.running = false;
                    self.set_state(SessionState::Paused);
                }
            }
            Command::Input { control, received } => self.input = Some((control, received)),
            Command::Slowdown(f) => self.world.set_planner_slowdown(f),
            Command::Close => self.closing = true,
        }
    }

    fn drain(&mut self, rx: &Receiver<Command>) {
        while let Ok(cmd) = rx.try_recv() {
            self.handle(cmd);
        }
    }

    /// Latest input, or zero once it is older than the dead-man limit.
    fn human_input(&self, now: Instant) -> ControlInput {
        match self.input {
            Some((u, at)) if now.saturating_duration_since(at) <= self.options.dead_man => u,
            _ => ControlInput::ZERO,
        }
    }

    fn step_once(&mut self) {
        let u = self.human_input(Instant::now());
        let world = &mut self.world;
        match self.pool.install(|| world.world_step(Some(u))) {
            Ok(row) => {
                if let Some(w) = self.replay.as_mut() {
                    if let Err(e) = w.write(&row) {
                        tracing::warn!(session = %self.id, "replay write failed: {e}");
                        self.replay = None;
                    }
                }
                for ev in row.events {
                    self.publish(Outgoing::new(
                        MessageType::Event,
                        EventMessage {
                            session_id: self.id.clone(),
                            event: ev.clone(),
                        },
                    ));
                    self.pending.push(ev);
                }
            }
            Err(e) => {
                let message = e.to_string();
                self.fault = Some(message.clone());
                self.running = false;
                self.set_state(SessionState::Faulted);
                if let Some(ev) = self.world.events().last() {
                    self.pending.push(ev.clone());
                }
                self.publish(Outgoing::new(
                    MessageType::Fault,
                    Fault {
                        code: FaultCode::DynamicsFault,
                        message,
                        terminal: true,
                    },
                ));
                self.emit_frame();
            }
        }
    }

    fn emit_frame(&mut self) {
        let state = if self.fault.is_some() {
            SessionState::Faulted
        } else if self.running {
            SessionState::Running
        } else {
            SessionState::Paused
        };
        let mut events = std::mem::take(&mut self.pending);
        if events.len() > FRAME_EVENT_LIMIT {
            events.drain(..events.len() - FRAME_EVENT_LIMIT);
        }
        let ids = self.world.vehicle_ids();
        let frame = Frame {
            session_id: self.id.clone(),
            frame: self.frame_no,
            state,
            clock: self.world.clock(),
            step: self.world.steps(),
            vehicles: self.world.vehicle_rows().iter().map(FrameVehicle::from).collect(),
            planned: ids
                .iter()
                .filter(|&&id| !self.world.planned_path(id).is_empty())
                .map(|&id| PlannedPath {
                    id,
                    path: self.world.planned_path(id).to_vec(),
                })
                .collect(),
            score: self.world.vehicle_outcomes().iter().map(ScoreEntry::from).collect(),
            events,
            overruns: self.world.overruns(),
            fault: self.fault.clone(),
        };
        self.frame_no += 1;
        self.publish(Outgoing::new(MessageType::Frame, frame));
    }

    fn run(mut self, rx: Receiver<Command>) {
        let dt = self.world.config().race.dt;
        let frame_period = Duration::from_secs_f64(1.0 / self.options.frame_hz);
        let mut next_frame = Instant::now();
        loop {
            self.drain(&rx);
            if self.closing {
                break;
            }
            if self.running {
                let (t0, s0) = self.anchor;
                let due = s0 + (t0.elapsed().as_secs_f64() / dt) as u64;
                while self.running && self.world.steps() < due {
                    self.step_once();
                    self.drain(&rx);
                    if Instant::now() >= next_frame && self.fault.is_none() {
                        self.emit_frame();
                        next_frame += frame_period;
                    }
                }
            }
            let now = Instant::now();
            if now >= next_frame && self.fault.is_none() {
                self.emit_frame();
                next_frame += frame_period;
                if next_frame < now {
                    next_frame = now + frame_period;
                }
            }
            let mut wake = next_frame;
            if self.running {
                let (t0, s0) = self.anchor;
                let next_step = t0 + Duration::from_secs_f64((self.world.steps() + 1 - s0) as f64 * dt);
                wake = wake.min(next_step);
            }
            let timeout = wake.saturating_duration_since(Instant::now());
            match rx.recv_timeout(timeout) {
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        self.set_state(SessionState::Closed);
        if let Some(w) = self.replay.take() {
            if let Err(e) = w.finish() {
                tracing::warn!(session = %self.id, "replay flush failed: {e}");
            }
        }
    }
}
