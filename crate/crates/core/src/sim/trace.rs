//! Trace rows, events, outcome summaries and input scripts.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{ControlInput, VehicleState};

/// Version of the JSONL trace and replay layout.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Two vehicles came closer than the inner radius.
    Collision { vehicles: [u8; 2], distance: f64 },
    /// A vehicle entered the inner radius of a static obstacle.
    ObstacleCollision { vehicle: u8, obstacle: usize },
    /// `vehicle` moved from behind `other` to ahead of it.
    GainedLead { vehicle: u8, other: u8 },
    /// Mirror of `GainedLead` from the passed vehicle's side.
    LostLead { vehicle: u8, other: u8 },
    OffTrack { vehicle: u8, lateral: f64 },
    Lap { vehicle: u8, laps: i64 },
    /// The opponent pose was too old; the previous prediction was reused.
    StalePrediction { vehicle: u8, opponent: u8, age: f64 },
    PlannerError { vehicle: u8, message: String },
    /// The replan missed its budget and the incumbent plan was kept.
    Overrun { vehicle: u8 },
    Fault { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRow {
    pub id: u8,
    pub state: VehicleState,
    /// Control applied during this step.
    pub control: ControlInput,
    pub progress: f64,
    pub laps: i64,
    /// Running cost of `state`.
    pub cost: f64,
    /// Lowest sample cost of the replan made at the start of this step, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plan_cost: Option<f64>,
}

/// One physics step: controls applied from `t - dt` to `t`, states at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub schema_version: u32,
    pub step: u64,
    pub t: f64,
    pub vehicles: Vec<VehicleRow>,
    pub events: Vec<Event>,
    /// Input held for the human-driven vehicle during this step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub human_input: Option<ControlInput>,
    /// Vehicles whose replan at this step overran its budget.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub overruns: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleOutcome {
    pub id: u8,
    pub driver: String,
    pub laps: i64,
    pub gained_lead: u32,
    pub lost_lead: u32,
    pub collisions: u32,
    pub off_track: u32,
    pub mean_speed: f64,
    pub max_speed: f64,
    /// Path length integrated from the positions (m).
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Duration,
    LapTarget,
    Collision,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceOutcome {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: u64,
    /// `steps * dt` (s).
    pub duration: f64,
    pub stop_reason: StopReason,
    pub fault: Option<String>,
    pub vehicles: Vec<VehicleOutcome>,
    pub pass_events: u32,
    pub collisions: u32,
    pub off_track: u32,
    pub replans: u64,
    pub overruns: u64,
    pub planner_errors: u64,
    pub stale_predictions: u64,
}

impl RaceOutcome {
    pub fn vehicle(&self, id: u8) -> Option<&VehicleOutcome> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn is_faulted(&self) -> bool {
        self.fault.is_some()
    }
}

/// Human inputs and forced overruns, both keyed by physics step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScript {
    #[serde(default)]
    pub inputs: Vec<ScriptedInput>,
    #[serde(default)]
    pub overruns: Vec<ForcedOverrun>,
}

/// Held from `step` until the next entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedInput {
    pub step: u64,
    pub steering: f64,
    pub throttle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedOverrun {
    pub step: u64,
    pub vehicle: u8,
}

impl InputScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: InputScript = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        script.validate().map_err(|e| Error::parse(path, e))?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.inputs.windows(2).enumerate() {
            if w[1].step <= w[0].step {
                return Err(Error::invalid(
                    format!("inputs[{}]", i + 1),
                    "steps must be strictly increasing",
                ));
            }
        }
        for (i, u) in self.inputs.iter().enumerate() {
            if !(u.steering.is_finite() && u.throttle.is_finite()) {
                return Err(Error::NonFinite(format!("inputs[{i}]")));
            }
        }
        Ok(())
    }

    /// Rebuilds the script that reproduces a recorded trace: every recorded
    /// human input and every overrun.
    pub fn from_trace(rows: &[TraceRow]) -> Self {
        let mut script = InputScript::default();
        let mut last: Option<ControlInput> = None;
        for row in rows {
            if let Some(u) = row.human_input {
                if last != Some(u) {
                    script.inputs.push(ScriptedInput {
                        step: row.step,
                        steering: u.steering,
                        throttle: u.throttle,
                    });
                    last = Some(u);
                }
            }
            for &v in &row.overruns {
                script.overruns.push(ForcedOverrun {
                    step: row.step,
                    vehicle: v,
                });
            }
        }
        script
    }
}

/// Streams rows to a JSONL file.
pub struct TraceWriter {
    out: BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &TraceRow) -> Result<()> {
        serde_json::to_writer(&mut self.out, row).map_err(|e| Error::io(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a JSONL trace. Blank lines are skipped; a malformed line is
/// reported with its 1-based row number.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}
