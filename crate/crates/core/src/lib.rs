//! Sampling-based model predictive control for two-vehicle racing.
//!
//! The crate holds the vehicle models, the cost design, the MPPI optimizer and
//! its best-response extension, a simulated pose radio, and the deterministic
//! world stepper that ties them together.

pub mod brmppi;
pub mod config;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod mppi;
pub mod scenarios;
pub mod sim;
pub mod state;
pub mod track;
pub mod v2v;

pub use error::{Error, Result};
pub use state::{ControlInput, Derivative, VehicleState};
pub use track::TrackMap;
