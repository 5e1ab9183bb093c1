//! The bundled closed-loop scenarios and their pass conditions.

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::sim::RaceOutcome;

/// Id of the autonomous vehicle in every bundled scenario.
pub const EGO: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Solo lap on the default oval.
    S1,
    /// Parked car on the centerline.
    S2,
    /// Slower scripted car ahead on the same line.
    S3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::S1, Scenario::S2, Scenario::S3];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid("scenario", format!("unknown scenario `{name}` (expected s1, s2 or s3)")))
    }

    pub fn toml(self) -> &'static str {
        match self {
            Scenario::S1 => include_str!("../scenarios/s1.toml"),
            Scenario::S2 => include_str!("../scenarios/s2.toml"),
            Scenario::S3 => include_str!("../scenarios/s3.toml"),
        }
    }

    pub fn config(self) -> Config {
        Config::from_toml(self.toml()).expect("bundled scenario parses")
    }

    /// Seeds the scenario is judged over.
    pub fn seeds(self) -> Vec<u64> {
        match self {
            Scenario::S1 => vec![1],
            Scenario::S2 | Scenario::S3 => (1..=20).collect(),
        }
    }

    /// Runs that must succeed out of `seeds().len()`.
    pub fn required(self) -> usize {
        match self {
            Scenario::S1 | Scenario::S2 => self.seeds().len(),
            Scenario::S3 => 18,
        }
    }

    /// Whether a single run meets the scenario's per-run condition.
    pub fn run_passes(self, outcome: &RaceOutcome) -> bool {
        let Some(ego) = outcome.vehicle(EGO) else {
            return false;
        };
        if outcome.is_faulted() {
            return false;
        }
        match self {
            Scenario::S1 => ego.laps >= 2 && outcome.off_track == 0 && ego.mean_speed >= 4.0,
            Scenario::S2 => outcome.collisions == 0 && ego.laps >= 1,
            Scenario::S3 => outcome.collisions == 0 && ego.gained_lead >= 1,
        }
    }

    /// One-line summary of a run for reports.
    pub fn describe(self, outcome: &RaceOutcome) -> String {
        match outcome.vehicle(EGO) {
            Some(ego) => format!(
                "seed {}: laps {} passes {} collisions {} off-track {} mean speed {:.2} m/s",
                outcome.seed, ego.laps, ego.gained_lead, outcome.collisions, outcome.off_track, ego.mean_speed
            ),
            None => format!("seed {}: no ego vehicle", outcome.seed),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
