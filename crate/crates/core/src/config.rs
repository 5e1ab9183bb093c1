//! Run configuration: one TOML file with `[mppi]`, `[costs]`, `[track]`,
//! `[channel]` and `[race]` sections. Every section and key is optional and
//! falls back to its default.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostParams;
use crate::dynamics::{BasisModel, DynamicsModel, NeuralNetModel};
use crate::error::{Error, Result};
use crate::mppi::MppiParams;
use crate::track::TrackMap;
use crate::v2v::ChannelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// JSON track file; when set, the stadium parameters are ignored.
    pub file: Option<PathBuf>,
    pub straight: f64,
    pub radius: f64,
    pub half_width: f64,
    pub spacing: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            file: None,
            straight: 30.0,
            radius: 10.0,
            half_width: 1.5,
            spacing: 0.5,
        }
    }
}

impl TrackConfig {
    pub fn build(&self, base_dir: &Path) -> Result<TrackMap> {
        match &self.file {
            Some(f) => TrackMap::load(&resolve(base_dir, f)),
            None => TrackMap::stadium(self.straight, self.radius, self.half_width, self.spacing),
        }
    }
}

/// How a vehicle is driven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Driver {
    /// Planned by best-response MPPI.
    Autonomous,
    /// Driven by the external input stream (live client or replay script).
    Human,
    /// Never moves.
    Parked,
    /// Pure-pursuit tracking of the centerline shifted by `lateral` metres,
    /// at `speed` m/s.
    LineFollower { speed: f64, lateral: f64 },
}

impl Driver {
    pub fn name(&self) -> &'static str {
        match self {
            Driver::Autonomous => "autonomous",
            Driver::Human => "human",
            Driver::Parked => "parked",
            Driver::LineFollower { .. } => "line_follower",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: u8,
    pub driver: Driver,
    /// Start position as a fraction of the lap.
    #[serde(default)]
    pub start_progress: f64,
    /// Start offset from the centerline, left positive (m).
    #[serde(default)]
    pub start_lateral: f64,
    /// Initial forward speed (m/s).
    #[serde(default)]
    pub start_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaceParams {
    pub seed: u64,
    /// Simulated seconds to run.
    pub duration: f64,
    /// Physics step (s).
    pub dt: f64,
    /// Physics steps per replan; `replan_every * dt` must equal `mppi.dt`.
    pub replan_every: usize,
    /// Stop once every autonomous vehicle has completed this many laps.
    pub lap_target: Option<u32>,
    /// Stop at the first collision instead of logging it and continuing.
    pub stop_on_collision: bool,
    /// Wall-clock budget per replan (ms). Unset for offline runs, which must
    /// not depend on host speed.
    pub replan_budget_ms: Option<f64>,
    /// Worker threads for sampling; `None` uses all cores.
    pub threads: Option<usize>,
    /// Basis (`basis_version`) or network (`nn_version`) JSON model used by
    /// the planners. Defaults to the reference basis model.
    pub controller_model: Option<PathBuf>,
    /// Model file for the simulated vehicles themselves. Defaults to the
    /// reference bicycle.
    pub plant_model: Option<PathBuf>,
    pub vehicles: Vec<VehicleSpec>,
}

impl Default for RaceParams {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            dt: 0.005,
            replan_every: 5,
            lap_target: None,
            stop_on_collision: false,
            replan_budget_ms: None,
            threads: None,
            controller_model: None,
            plant_model: None,
            vehicles: vec![
                VehicleSpec {
                    id: 0,
                    driver: Driver::Autonomous,
                    start_progress: 0.0,
                    start_lateral: -0.75,
                    start_speed: 0.0,
                },
                VehicleSpec {
                    id: 1,
                    driver: Driver::Human,
                    start_progress: 0.0,
                    start_lateral: 0.75,
                    start_speed: 0.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub mppi: MppiParams,
    pub costs: CostParams,
    pub track: TrackConfig,
    pub channel: ChannelParams,
    pub race: RaceParams,
    /// Directory relative paths are resolved against; not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(Path::new("<config>"), e.to_string().trim()))
    }

    /// Parses and validates a config file; relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::parse(path, e.to_string().trim()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.mppi.validate()?;
        self.costs.validate()?;
        self.channel.validate()?;
        let r = &self.race;
        if !(r.duration >= 0.0 && r.duration.is_finite()) {
            return Err(Error::invalid("race.duration", "must be >= 0"));
        }
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(Error::invalid("race.dt", "must be > 0"));
        }
        if r.replan_every == 0 {
            return Err(Error::invalid("race.replan_every", "must be >= 1"));
        }
        let period = r.replan_every as f64 * r.dt;
        if (period - self.mppi.dt).abs() > 1e-9 {
            return Err(Error::invalid(
                "race.replan_every",
                format!(
                    "replan period {period} s must equal the planning step mppi.dt = {} s",
                    self.mppi.dt
                ),
            ));
        }
        if let Some(b) = r.replan_budget_ms {
            if !(b > 0.0) {
                return Err(Error::invalid("race.replan_budget_ms", "must be > 0"));
            }
        }
        if r.threads == Some(0) {
            return Err(Error::invalid("race.threads", "must be >= 1"));
        }
        if r.vehicles.is_empty() {
            return Err(Error::invalid("race.vehicles", "at least one vehicle is required"));
        }
        let mut ids: Vec<u8> = r.vehicles.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != r.vehicles.len() {
            return Err(Error::invalid("race.vehicles", "vehicle ids must be unique"));
        }
        if r.vehicles.iter().filter(|v| v.driver == Driver::Human).count() > 1 {
            return Err(Error::invalid("race.vehicles", "at most one human-driven vehicle"));
        }
        for (i, v) in r.vehicles.iter().enumerate() {
            if !(v.start_progress.is_finite() && v.start_lateral.is_finite() && v.start_speed.is_finite()) {
                return Err(Error::invalid(format!("race.vehicles[{i}]"), "start pose must be finite"));
            }
            if let Driver::LineFollower { speed, lateral } = v.driver {
                if !(speed >= 0.0 && speed.is_finite() && lateral.is_finite()) {
                    return Err(Error::invalid(
                        format!("race.vehicles[{i}].driver"),
                        "line follower needs a finite speed >= 0 and lateral offset",
                    ));
                }
            }
        }
        let t = &self.track;
        if t.file.is_none() && !(t.straight >= 0.0 && t.radius > 0.0 && t.half_width > 0.0 && t.spacing > 0.0) {
            return Err(Error::invalid(
                "track",
                "need straight >= 0 and radius, half_width, spacing > 0",
            ));
        }
        Ok(())
    }

    pub fn build_track(&self) -> Result<TrackMap> {
        self.track.build(&self.base_dir)
    }

    /// The model that moves the simulated vehicles.
    pub fn build_plant_model(&self) -> Result<Arc<dyn DynamicsModel>> {
        match &self.race.plant_model {
            None => Ok(Arc::new(BasisModel::reference())),
            Some(p) => load_model(&resolve(&self.base_dir, p)),
        }
    }

    /// The planners' forward model.
    pub fn build_controller_model(&self) -> Result<Arc<dyn DynamicsModel>> {
        match &self.race.controller_model {
            None => Ok(Arc::new(BasisModel::reference())),
            Some(p) => load_model(&resolve(&self.base_dir, p)),
        }
    }
}

/// Loads a basis or network model file, telling them apart by their version key.
pub fn load_model(path: &Path) -> Result<Arc<dyn DynamicsModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let reparse = |e: Error| match e {
        Error::Parse { reason, .. } => Error::parse(path, reason),
        other => other,
    };
    if value.get("basis_version").is_some() {
        Ok(Arc::new(BasisModel::from_json(&text).map_err(reparse)?))
    } else if value.get("nn_version").is_some() {
        Ok(Arc::new(NeuralNetModel::from_json(&text).map_err(reparse)?))
    } else {
        Err(Error::parse(path, "neither `basis_version` nor `nn_version` present"))
    }
}
