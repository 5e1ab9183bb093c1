//! Live race sessions over WebSocket.
//!
//! `GET /session` upgrades to the JSON session protocol (see
//! [`protocol`]); `GET /health` reports build info and the number of live
//! sessions. Each session runs its world on a dedicated thread in wall-clock
//! time and publishes 20 Hz frames to every attached client.

pub mod protocol;
mod session;

use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};

use brrace_core::config::Config;
use brrace_core::ControlInput;

use protocol::{
    Bye, ClientHello, CreateRequest, Envelope, Fault, FaultCode, InputAck, InputMessage, MessageType, ModeAck,
    ServerHello, SessionState, PROTOCOL_VERSION,
};
pub use session::Outgoing;
use session::{Command, Registry, SessionHandle, SessionOptions};

pub const SERVER_NAME: &str = "brrace-gateway";

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    /// Configuration used by `create` requests that carry none.
    pub config: Config,
    /// Where `<session>.jsonl` replays and `<session>.toml` configs go.
    pub replay_dir: Option<PathBuf>,
    pub frame_hz: f64,
    /// Human input older than this decays to zero control.
    pub dead_man: Duration,
}

impl GatewayOptions {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            replay_dir: None,
            frame_hz: 20.0,
            dead_man: Duration::from_millis(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Health {
    pub name: String,
    pub version: String,
    pub active_sessions: usize,
}

struct Inner {
    options: GatewayOptions,
    sessions: Registry,
    shutdown: watch::Sender<bool>,
    connections: AtomicUsize,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("active_sessions", &self.active_sessions())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Fails when the default configuration could not start a session.
    pub fn new(options: GatewayOptions) -> Result<Self, String> {
        session::prepare_config(options.config.clone()).map_err(|f| f.message)?;
        if !(options.frame_hz > 0.0 && options.frame_hz.is_finite()) {
            return Err("frame rate must be positive".into());
        }
        if let Some(dir) = &options.replay_dir {
            std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        }
        Ok(Self {
            inner: Arc::new(Inner {
                options,
                sessions: Arc::new(Mutex::new(Default::default())),
                shutdown: watch::channel(false).0,
                connections: AtomicUsize::new(0),
            }),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/health", get(health))
            .route("/session", get(upgrade))
            .with_state(self.clone())
    }

    pub fn health(&self) -> Health {
        Health {
            name: SERVER_NAME.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            active_sessions: self.active_sessions(),
        }
    }

    pub fn active_sessions(&self) -> usize {
        self.inner.sessions.lock().expect("registry lock").len()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.sessions.lock().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Test hook: scales measured replan times of a session's planners.
    pub fn set_planner_slowdown(&self, session_id: &str, factor: f64) -> bool {
        match self.session(session_id) {
            Some(s) => s.send(Command::Slowdown(factor)).is_ok(),
            None => false,
        }
    }

    fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.inner.sessions.lock().expect("registry lock").get(id).cloned()
    }

    fn create_session(&self, request: CreateRequest) -> Result<Arc<SessionHandle>, Fault> {
        let config = match request.config {
            None => self.inner.options.config.clone(),
            Some(text) => {
                let mut c = Config::from_toml(&text).map_err(|e| Fault {
                    code: FaultCode::InvalidConfig,
                    message: e.to_string(),
                    terminal: false,
                })?;
                c.base_dir = self.inner.options.config.base_dir.clone();
                c
            }
        };
        let config = session::prepare_config(config)?;
        let id = {
            let sessions = self.inner.sessions.lock().expect("registry lock");
            loop {
                let id = format!("{:016x}", rand::random::<u64>());
                if !sessions.contains_key(&id) {
                    break id;
                }
            }
        };
        let options = SessionOptions {
            frame_hz: self.inner.options.frame_hz,
            dead_man: self.inner.options.dead_man,
            replay_dir: self.inner.options.replay_dir.clone(),
        };
        session::spawn(id, config, options, self.inner.sessions.clone())
    }

    /// Serves until `shutdown` resolves, then says bye to every client and
    /// closes all sessions.
    pub async fn serve(self, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let gw = self.clone();
        let signal = async move {
            shutdown.await;
            gw.begin_shutdown();
        };
        axum::serve(listener, self.router())
            .with_graceful_shutdown(signal)
            .await?;
        // Upgraded sockets outlive the HTTP server; give them a moment to
        // deliver their bye frames.
        let deadline = Instant::now() + Duration::from_secs(2);
        while self.inner.connections.load(Ordering::SeqCst) > 0 && Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let sessions: Vec<_> = self.inner.sessions.lock().expect("registry lock").values().cloned().collect();
        for s in sessions {
            let _ = s.send(Command::Close);
        }
        Ok(())
    }

    pub fn begin_shutdown(&self) {
        self.inner.shutdown.send_replace(true);
    }
}

async fn health(State(gw): State<Gateway>) -> impl IntoResponse {
    Json(gw.health())
}

async fn upgrade(ws: WebSocketUpgrade, State(gw): State<Gateway>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, gw))
}

enum Outbound {
    Reply(MessageType, serde_json::Value),
    Attach(broadcast::Receiver<Arc<Outgoing>>),
    /// Send `bye` and close.
    Bye(Bye),
}

fn reply(kind: MessageType, payload: impl Serialize) -> Outbound {
    Outbound::Reply(kind, serde_json::to_value(payload).expect("payload serialises"))
}

fn fault(code: FaultCode, message: impl Into<String>) -> Outbound {
    reply(
        MessageType::Fault,
        Fault {
            code,
            message: message.into(),
            terminal: false,
        },
    )
}

struct ConnectionGuard<'a>(&'a AtomicUsize);

impl Drop for ConnectionGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn connection(socket: WebSocket, gw: Gateway) {
    gw.inner.connections.fetch_add(1, Ordering::SeqCst);
    let _guard = ConnectionGuard(&gw.inner.connections);
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::channel::<Outbound>(64);
    let mut shutdown = gw.inner.shutdown.subscribe();

    let mut writer = tokio::spawn(async move {
        let mut seq = 0u64;
        let mut sub: Option<broadcast::Receiver<Arc<Outgoing>>> = None;
        let mut send = |kind: MessageType, payload: serde_json::Value| {
            seq += 1;
            Message::Text(
                Envelope {
                    kind,
                    seq,
                    payload,
                }
                .to_text(),
            )
        };
        loop {
            let msg = tokio::select! {
                out = rx.recv() => match out {
                    Some(Outbound::Reply(kind, payload)) => send(kind, payload),
                    Some(Outbound::Attach(r)) => {
                        sub = Some(r);
                        continue;
                    }
                    Some(Outbound::Bye(bye)) => {
                        let _ = sink.send(send(MessageType::Bye, serde_json::to_value(bye).expect("bye"))).await;
                        break;
                    }
                    None => break,
                },
                published = async { sub.as_mut().expect("guarded").recv().await }, if sub.is_some() => match published {
                    Ok(o) => send(o.kind, o.payload.clone()),
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => {
                        sub = None;
                        continue;
                    }
                },
                _ = async { shutdown.wait_for(|s| *s).await.map(|_| ()) } => {
                    let bye = Bye { reason: Some("server shutdown".into()) };
                    let _ = sink.send(send(MessageType::Bye, serde_json::to_value(bye).expect("bye"))).await;
                    break;
                }
            };
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut attached: Option<Arc<SessionHandle>> = None;
    let mut last_input_seq: Option<u64> = None;
    let mut writer_done = false;
    loop {
        // The writer finishing (shutdown, dead socket) ends the connection
        // even when the client has gone quiet.
        let msg = tokio::select! {
            m = stream.next() => match m {
                Some(Ok(m)) => m,
                _ => break,
            },
            _ = &mut writer => {
                writer_done = true;
                break;
            }
        };
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                if tx.send(fault(FaultCode::BadRequest, "binary messages are not supported")).await.is_err() {
                    break;
                }
                continue;
            }
            _ => continue,
        };
        let env: Envelope = match serde_json::from_str(&text) {
            Ok(e) => e,
            Err(e) => {
                if tx.send(fault(FaultCode::BadRequest, format!("malformed envelope: {e}"))).await.is_err() {
                    break;
                }
                continue;
            }
        };
        let (out, done) = dispatch(&gw, env, &mut attached, &mut last_input_seq);
        let mut closed = false;
        for o in out {
            if tx.send(o).await.is_err() {
                closed = true;
            }
        }
        if done || closed {
            break;
        }
    }
    if let Some(s) = attached.take() {
        s.detach();
    }
    drop(tx);
    if !writer_done {
        let _ = writer.await;
    }
}

fn parse<T: serde::de::DeserializeOwned>(payload: serde_json::Value) -> Result<T, Outbound> {
    serde_json::from_value(payload).map_err(|e| fault(FaultCode::BadRequest, format!("bad payload: {e}")))
}

/// Handles one client message; returns the replies and whether the
/// connection should close.
fn dispatch(
    gw: &Gateway,
    env: Envelope,
    attached: &mut Option<Arc<SessionHandle>>,
    last_input_seq: &mut Option<u64>,
) -> (Vec<Outbound>, bool) {
    let one = |o: Outbound| (vec![o], false);
    match env.kind {
        MessageType::Hello => {
            let hello: ClientHello = match parse(env.payload) {
                Ok(h) => h,
                Err(f) => return one(f),
            };
            if hello.protocol_version != PROTOCOL_VERSION {
                return one(fault(
                    FaultCode::BadRequest,
                    format!("protocol version {} not supported (server speaks {PROTOCOL_VERSION})", hello.protocol_version),
                ));
            }
            let mut out = Vec::new();
            let mut session = None;
            if let Some(id) = hello.session_id {
                if attached.is_some() {
                    return one(fault(FaultCode::BadRequest, "connection is already attached to a session"));
                }
                match gw.session(&id) {
                    Some(s) => {
                        out.push(Outbound::Attach(s.attach()));
                        let mut info = s.info.clone();
                        info.state = s.state();
                        session = Some(info);
                        *attached = Some(s);
                    }
                    None => return one(fault(FaultCode::NotFound, format!("no session `{id}`"))),
                }
            }
            out.insert(
                0,
                reply(
                    MessageType::Hello,
                    ServerHello {
                        protocol_version: PROTOCOL_VERSION,
                        server: SERVER_NAME.to_string(),
                        version: env!("CARGO_PKG_VERSION").to_string(),
                        session,
                    },
                ),
            );
            (out, false)
        }
        MessageType::Create => {
            if attached.is_some() {
                return one(fault(FaultCode::BadRequest, "connection is already attached to a session"));
            }
            let request: CreateRequest = match parse(env.payload) {
                Ok(r) => r,
                Err(f) => return one(f),
            };
            match gw.create_session(request) {
                Ok(s) => {
                    let sub = s.attach();
                    let info = s.info.clone();
                    *attached = Some(s);
                    (vec![reply(MessageType::Create, info), Outbound::Attach(sub)], false)
                }
                Err(f) => one(reply(MessageType::Fault, f)),
            }
        }
        MessageType::Start | MessageType::Pause => {
            let Some(s) = attached.as_ref() else {
                return one(fault(FaultCode::NoSession, "create or join a session first"));
            };
            if s.state() == SessionState::Faulted {
                return one(reply(
                    MessageType::Fault,
                    Fault {
                        code: FaultCode::DynamicsFault,
                        message: "session is faulted".into(),
                        terminal: true,
                    },
                ));
            }
            let (cmd, state) = if env.kind == MessageType::Start {
                (Command::Start, SessionState::Running)
            } else {
                (Command::Pause, SessionState::Paused)
            };
            match s.send(cmd) {
                Ok(()) => one(reply(
                    env.kind,
                    ModeAck {
                        session_id: s.info.session_id.clone(),
                        state,
                    },
                )),
                Err(f) => one(reply(MessageType::Fault, f)),
            }
        }
        MessageType::Input => {
            let Some(s) = attached.as_ref() else {
                return one(fault(FaultCode::NoSession, "create or join a session first"));
            };
            let input: InputMessage = match serde_json::from_value(env.payload) {
                Ok(i) => i,
                Err(e) => return one(fault(FaultCode::Rejected, format!("input rejected: {e}"))),
            };
            if !(input.steering.is_finite() && input.throttle.is_finite()) {
                return one(fault(FaultCode::Rejected, "input rejected: non-finite value"));
            }
            let raw = ControlInput::new(input.steering, input.throttle);
            let control = raw.clamped();
            let stale = last_input_seq.is_some_and(|last| env.seq <= last);
            if !stale {
                *last_input_seq = Some(env.seq);
                if let Err(f) = s.send(Command::Input {
                    control,
                    received: Instant::now(),
                }) {
                    return one(reply(MessageType::Fault, f));
                }
            }
            one(reply(
                MessageType::Input,
                InputAck {
                    ack: env.seq,
                    steering: control.steering,
                    throttle: control.throttle,
                    clamped: control != raw,
                    stale,
                },
            ))
        }
        MessageType::Bye => (
            vec![Outbound::Bye(Bye {
                reason: Some("client bye".into()),
            })],
            true,
        ),
        MessageType::Frame | MessageType::Event | MessageType::Fault => {
            one(fault(FaultCode::BadRequest, format!("`{:?}` is a server message", env.kind).to_lowercase()))
        }
    }
}
