//! Scripted drivers for non-planning vehicles.

use crate::dynamics::{BicycleParams, FRONT_AXLE_DISTANCE, MAX_STEER_ANGLE, REAR_AXLE_DISTANCE};
use crate::state::{ControlInput, VehicleState};
use crate::track::TrackMap;

const MIN_LOOKAHEAD: f64 = 1.5;
const LOOKAHEAD_TIME: f64 = 0.6;
const SPEED_GAIN: f64 = 0.5;

/// Pure pursuit on the centerline shifted `lateral` metres to the left, with
/// feed-forward plus proportional speed control towards `speed`.
pub fn line_follower_control(
    track: &TrackMap,
    state: &VehicleState,
    speed: f64,
    lateral: f64,
) -> ControlInput {
    let lookahead = (LOOKAHEAD_TIME * state.v_x.abs()).max(MIN_LOOKAHEAD);
    let progress = track.progress(state.x, state.y);
    let (tx, ty, _) = track.pose_at(progress + lookahead / track.length(), lateral);
    let (sin_yaw, cos_yaw) = state.yaw.sin_cos();
    let (dx, dy) = (tx - state.x, ty - state.y);
    let ahead = cos_yaw * dx + sin_yaw * dy;
    let left = -sin_yaw * dx + cos_yaw * dy;
    let curvature = 2.0 * left / (ahead * ahead + left * left).max(1e-9);
    let wheelbase = FRONT_AXLE_DISTANCE + REAR_AXLE_DISTANCE;
    let delta = (wheelbase * curvature).atan();

    let plant = BicycleParams::default();
    let feed_forward = plant.drag * speed / plant.drive_accel;
    let throttle = feed_forward + SPEED_GAIN * (speed - state.v_x);
    ControlInput::new(delta / MAX_STEER_ANGLE, throttle).clamped()
}
