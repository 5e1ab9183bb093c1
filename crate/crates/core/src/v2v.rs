//! Simulated vehicle-to-vehicle pose radio: a downsampler from the state
//! stream to broadcast rate, a lossy delayed channel driven by the simulation
//! clock, and a per-peer inbox.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::VehicleState;

/// Size of an encoded [`PoseMessage`].
pub const WIRE_SIZE: usize = 69;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMessage {
    pub vehicle_id: u8,
    pub seq: u32,
    /// Simulation time at which the pose was sampled (s).
    pub t_sent: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub roll: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub yaw_rate: f64,
}

impl PoseMessage {
    pub fn from_state(vehicle_id: u8, seq: u32, t_sent: f64, s: &VehicleState) -> Self {
        Self {
            vehicle_id,
            seq,
            t_sent,
            x: s.x,
            y: s.y,
            yaw: s.yaw,
            roll: s.roll,
            v_x: s.v_x,
            v_y: s.v_y,
            yaw_rate: s.yaw_rate,
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
            roll: self.roll,
            v_x: self.v_x,
            v_y: self.v_y,
            yaw_rate: self.yaw_rate,
        }
    }

    /// Body-frame velocity rotated into the world frame.
    pub fn world_velocity(&self) -> [f64; 2] {
        self.state().world_velocity()
    }

    fn floats(&self) -> [f64; 8] {
        [
            self.t_sent,
            self.x,
            self.y,
            self.yaw,
            self.roll,
            self.v_x,
            self.v_y,
            self.yaw_rate,
        ]
    }

    /// Little-endian `id: u8, seq: u32`, then the eight `f64` fields in
    /// declaration order.
    pub fn encode(&self) -> [u8; WIRE_SIZE] {
        let mut out = [0u8; WIRE_SIZE];
        out[0] = self.vehicle_id;
        out[1..5].copy_from_slice(&self.seq.to_le_bytes());
        for (i, v) in self.floats().iter().enumerate() {
            let at = 5 + 8 * i;
            out[at..at + 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != WIRE_SIZE {
            return Err(Error::Codec(format!(
                "expected {WIRE_SIZE} bytes, got {}",
                bytes.len()
            )));
        }
        let mut f = [0.0; 8];
        for (i, v) in f.iter_mut().enumerate() {
            let at = 5 + 8 * i;
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        }
        Ok(Self {
            vehicle_id: bytes[0],
            seq: u32::from_le_bytes(bytes[1..5].try_into().expect("4-byte slice")),
            t_sent: f[0],
            x: f[1],
            y: f[2],
            yaw: f[3],
            roll: f[4],
            v_x: f[5],
            v_y: f[6],
            yaw_rate: f[7],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub broadcast_hz: f64,
    pub latency_mean: f64,
    pub latency_jitter: f64,
    pub drop_prob: f64,
    pub rng_seed: u64,
    /// Predictions from poses older than this raise a stale-opponent error (s).
    pub staleness_limit: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            broadcast_hz: 10.0,
            latency_mean: 0.03,
            latency_jitter: 0.01,
            drop_prob: 0.02,
            rng_seed: 0,
            staleness_limit: 0.5,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.broadcast_hz > 0.0 && self.broadcast_hz.is_finite()) {
            return Err(Error::invalid("channel.broadcast_hz", "must be > 0"));
        }
        if !(self.latency_mean >= 0.0 && self.latency_mean.is_finite()) {
            return Err(Error::invalid("channel.latency_mean", "must be >= 0"));
        }
        if !(self.latency_jitter >= 0.0 && self.latency_jitter.is_finite()) {
            return Err(Error::invalid("channel.latency_jitter", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid("channel.drop_prob", "must lie in [0, 1)"));
        }
        if !(self.staleness_limit > 0.0) {
            return Err(Error::invalid("channel.staleness_limit", "must be > 0"));
        }
        Ok(())
    }
}

/// Slack when comparing sample times against broadcast boundaries.
const BOUNDARY_EPS: f64 = 1e-9;

/// Zero-order-hold downsampler for one vehicle's state stream.
///
/// Boundaries sit at `t0 + k / broadcast_hz`, `t0` being the first sample
/// time. At each boundary the latest sample taken at or before it is emitted.
#[derive(Debug, Clone)]
pub struct Downsampler {
    vehicle_id: u8,
    hz: f64,
    t0: Option<f64>,
    k: u64,
    seq: u32,
    held: Option<(f64, VehicleState)>,
}

impl Downsampler {
    pub fn new(vehicle_id: u8, broadcast_hz: f64) -> Result<Self> {
        if !(broadcast_hz > 0.0 && broadcast_hz.is_finite()) {
            return Err(Error::invalid("channel.broadcast_hz", "must be > 0"));
        }
        Ok(Self {
            vehicle_id,
            hz: broadcast_hz,
            t0: None,
            k: 0,
            seq: 0,
            held: None,
        })
    }

    fn boundary(&self, k: u64) -> f64 {
        self.t0.unwrap_or(0.0) + k as f64 / self.hz
    }

    fn emit(&mut self, t: f64, s: &VehicleState) -> PoseMessage {
        self.seq += 1;
        PoseMessage::from_state(self.vehicle_id, self.seq, t, s)
    }

    /// Feeds one sample; returns the message due at a boundary, if any.
    pub fn push(&mut self, t: f64, state: &VehicleState) -> Option<PoseMessage> {
        if self.t0.is_none() {
            self.t0 = Some(t);
        }
        let mut out = None;
        let b = self.boundary(self.k);
        if t > b + BOUNDARY_EPS {
            // Passed a boundary without hitting it exactly: send what was
            // held just before it.
            if let Some((ht, hs)) = self.held {
                out = Some(self.emit(ht, &hs));
            }
            while self.boundary(self.k) < t - BOUNDARY_EPS {
                self.k += 1;
            }
        }
        if out.is_none() && (t - self.boundary(self.k)).abs() <= BOUNDARY_EPS {
            out = Some(self.emit(t, state));
            self.k += 1;
        }
        self.held = Some((t, *state));
        out
    }
}

/// Downsamples a whole recorded stream.
pub fn downsample(
    stream: &[(f64, VehicleState)],
    vehicle_id: u8,
    broadcast_hz: f64,
) -> Result<Vec<PoseMessage>> {
    let mut d = Downsampler::new(vehicle_id, broadcast_hz)?;
    let mut prev = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for (t, s) in stream {
        if *t < prev {
            return Err(Error::invalid("stream", "timestamps must be non-decreasing"));
        }
        prev = *t;
        out.extend(d.push(*t, s));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Delivery {
    Scheduled { deliver_at: f64 },
    Dropped,
}

#[derive(Debug, Clone)]
struct Pending {
    deliver_at: f64,
    order: u64,
    msg: PoseMessage,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed so the max-heap pops the earliest delivery first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .deliver_at
            .total_cmp(&self.deliver_at)
            .then(other.order.cmp(&self.order))
    }
}

/// Lossy broadcast channel: an event queue keyed by delivery time.
#[derive(Debug, Clone)]
pub struct Channel {
    params: ChannelParams,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Pending>,
    sent: u64,
}

impl Channel {
    pub fn new(params: ChannelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(params.rng_seed),
            params,
            queue: BinaryHeap::new(),
            sent: 0,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    /// Drops with probability `drop_prob`, otherwise schedules delivery at
    /// `now + latency_mean + U(-jitter, jitter)`, never before `now`.
    pub fn transmit(&mut self, msg: PoseMessage, now: f64) -> Delivery {
        // Both draws happen for every message so the stream stays aligned.
        let drop: f64 = self.rng.gen();
        let u: f64 = self.rng.gen();
        let order = self.sent;
        self.sent += 1;
        if drop < self.params.drop_prob {
            return Delivery::Dropped;
        }
        let jitter = self.params.latency_jitter * (2.0 * u - 1.0);
        let deliver_at = (now + self.params.latency_mean + jitter).max(now);
        self.queue.push(Pending {
            deliver_at,
            order,
            msg,
        });
        Delivery::Scheduled { deliver_at }
    }

    /// Removes and returns every message due at or before `now`, in delivery order.
    pub fn poll(&mut self, now: f64) -> Vec<PoseMessage> {
        let mut out = Vec::new();
        while self.queue.peek().is_some_and(|p| p.deliver_at <= now) {
            out.push(self.queue.pop().expect("peeked").msg);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// Latest pose per peer, newest by sequence number.
#[derive(Debug, Clone, Default)]
pub struct Inbox {
    latest: BTreeMap<u8, PoseMessage>,
    received: u64,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `msg` unless a newer sequence number from the same peer is held.
    pub fn deliver(&mut self, msg: PoseMessage) {
        self.received += 1;
        match self.latest.get(&msg.vehicle_id) {
            Some(held) if held.seq >= msg.seq => {}
            _ => {
                self.latest.insert(msg.vehicle_id, msg);
            }
        }
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    /// Newest message from `vehicle_id` and its age `now - t_sent`.
    pub fn receive_latest(&self, vehicle_id: u8, now: f64) -> Result<(PoseMessage, f64)> {
        self.latest
            .get(&vehicle_id)
            .map(|m| (*m, now - m.t_sent))
            .ok_or(Error::EmptyInbox(vehicle_id))
    }
}
