//! Wire format of the `/session` WebSocket: JSON envelopes
//! `{ "type", "seq", "payload" }`. The shared JSON schema lives in
//! `schema/session-protocol.schema.json`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use brrace_core::sim::{Event, VehicleOutcome, VehicleRow};
use brrace_core::{ControlInput, VehicleState};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Create,
    Start,
    Pause,
    Input,
    Frame,
    Event,
    Fault,
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl Envelope {
    pub fn new(kind: MessageType, seq: u64, payload: impl Serialize) -> Self {
        Self {
            kind,
            seq,
            payload: serde_json::to_value(payload).expect("payload serialises"),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("envelope serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHello {
    pub protocol_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    /// Attach to an existing session instead of creating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerHello {
    pub protocol_version: u32,
    pub server: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionInfo>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// TOML configuration; the server's own configuration when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Paused,
    Running,
    Faulted,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub half_width: f64,
    pub centerline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radii {
    pub r1: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: u8,
    pub driver: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleInfo {
    pub x: f64,
    pub y: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Static description of a session, sent once on create or attach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub state: SessionState,
    pub human_vehicle: u8,
    pub dt: f64,
    pub track: TrackInfo,
    pub radii: Radii,
    pub vehicles: Vec<VehicleInfo>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub static_obstacles: Vec<ObstacleInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAck {
    pub session_id: String,
    pub state: SessionState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputMessage {
    pub steering: f64,
    pub throttle: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputAck {
    /// `seq` of the acknowledged input message.
    pub ack: u64,
    pub steering: f64,
    pub throttle: f64,
    pub clamped: bool,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVehicle {
    pub id: u8,
    pub state: VehicleState,
    pub control: ControlInput,
    pub progress: f64,
    pub laps: i64,
}

impl From<&VehicleRow> for FrameVehicle {
    fn from(r: &VehicleRow) -> Self {
        Self {
            id: r.id,
            state: r.state,
            control: r.control,
            progress: r.progress,
            laps: r.laps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub id: u8,
    pub path: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: u8,
    pub laps: i64,
    pub gained_lead: u32,
    pub lost_lead: u32,
    pub collisions: u32,
    pub off_track: u32,
}

impl From<&VehicleOutcome> for ScoreEntry {
    fn from(v: &VehicleOutcome) -> Self {
        Self {
            id: v.id,
            laps: v.laps,
            gained_lead: v.gained_lead,
            lost_lead: v.lost_lead,
            collisions: v.collisions,
            off_track: v.off_track,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session_id: String,
    /// Per-session counter shared by every attached client.
    pub frame: u64,
    pub state: SessionState,
    pub clock: f64,
    pub step: u64,
    pub vehicles: Vec<FrameVehicle>,
    pub planned: Vec<PlannedPath>,
    pub score: Vec<ScoreEntry>,
    /// Events since the previous frame.
    pub events: Vec<Event>,
    pub overruns: u64,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMessage {
    pub session_id: String,
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCode {
    BadRequest,
    InvalidConfig,
    NotFound,
    Rejected,
    NoSession,
    DynamicsFault,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub code: FaultCode,
    pub message: String,
    /// The session cannot continue.
    pub terminal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bye {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Client-side ordering guard: applies frames in `frame` order and drops
/// any that arrive late.
#[derive(Debug, Clone, Default)]
pub struct FrameSequencer {
    last: Option<u64>,
    dropped: u64,
}

impl FrameSequencer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether `frame` should be applied; updates the high-water mark.
    pub fn accept(&mut self, frame: u64) -> bool {
        match self.last {
            Some(last) if frame <= last => {
                self.dropped += 1;
                false
            }
            _ => {
                self.last = Some(frame);
                true
            }
        }
    }

    pub fn last(&self) -> Option<u64> {
        self.last
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip() {
        let e = Envelope::new(
            MessageType::Input,
            7,
            InputMessage {
                steering: 0.5,
                throttle: -1.0,
                client_time: None,
            },
        );
        let text = e.to_text();
        assert_eq!(text, r#"{"type":"input","seq":7,"payload":{"steering":0.5,"throttle":-1.0}}"#);
        assert_eq!(serde_json::from_str::<Envelope>(&text).unwrap(), e);
    }

    #[test]
    fn missing_payload_is_empty_object() {
        let e: Envelope = serde_json::from_str(r#"{"type":"start","seq":1}"#).unwrap();
        assert_eq!(e.payload, serde_json::json!({}));
    }

    #[test]
    fn unknown_type_is_rejected() {
        assert!(serde_json::from_str::<Envelope>(r#"{"type":"teleport","seq":1,"payload":{}}"#).is_err());
    }

    #[test]
    fn sequencer_drops_late_frames() {
        let mut s = FrameSequencer::new();
        assert!(s.accept(3));
        assert!(!s.accept(2));
        assert!(!s.accept(3));
        assert!(s.accept(9));
        assert_eq!((s.last(), s.dropped()), (Some(9), 2));
    }
}
