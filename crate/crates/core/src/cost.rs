//! State costs: track map, obstacle rings, the base running cost and the
//! racing (passing / trailing-collision) terms.

use serde::{Deserialize, Serialize};

use crate::dynamics::VELOCITY_FLOOR;
use crate::error::{Error, Result};
use crate::state::VehicleState;
use crate::track::TrackMap;

/// Quadratic ring between `r1` and `r2`, flat `beta` inside `r1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleCostParams {
    pub r1: f64,
    pub r2: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ObstacleCostParams {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 2.0,
            alpha: 250.0,
            beta: 100_000.0,
        }
    }
}

impl ObstacleCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r1 < self.r2) {
            return Err(Error::invalid(
                "costs.obstacle.r1",
                format!("need 0 < r1 < r2, got r1 = {}, r2 = {}", self.r1, self.r2),
            ));
        }
        if !(self.alpha >= 0.0 && self.beta > self.alpha) {
            return Err(Error::invalid(
                "costs.obstacle.beta",
                format!("need beta > alpha >= 0, got alpha = {}, beta = {}", self.alpha, self.beta),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunningCostParams {
    pub w_track: f64,
    pub w_speed: f64,
    pub w_crash: f64,
    pub w_slip: f64,
    pub v_desired: f64,
    pub crash_decay: f64,
    pub roll_crash_threshold: f64,
}

impl Default for RunningCostParams {
    fn default() -> Self {
        Self {
            w_track: 100.0,
            w_speed: 4.0,
            w_crash: 10_000.0,
            w_slip: 50.0,
            v_desired: 6.0,
            crash_decay: 0.9,
            roll_crash_threshold: 0.5,
        }
    }
}

impl RunningCostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_track", self.w_track),
            ("w_speed", self.w_speed),
            ("w_crash", self.w_crash),
            ("w_slip", self.w_slip),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("costs.running.{name}"), "must be >= 0"));
            }
        }
        if !(self.v_desired > 0.0) {
            return Err(Error::invalid("costs.running.v_desired", "must be > 0"));
        }
        if !(self.crash_decay > 0.0 && self.crash_decay <= 1.0) {
            return Err(Error::invalid("costs.running.crash_decay", "must lie in (0, 1]"));
        }
        if !(self.roll_crash_threshold > 0.0) {
            return Err(Error::invalid("costs.running.roll_crash_threshold", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacingCostParams {
    pub pass_reward: f64,
    pub overtaken_penalty: f64,
    pub trail_collision_penalty: f64,
    pub collision_radius: f64,
    /// Longitudinal band around zero in which the previous ahead/behind sign is held (m).
    pub sign_dead_band: f64,
    /// Beyond this separation the ahead/behind sign is forgotten and no racing
    /// term fires (m).
    pub pass_gate: f64,
}

impl Default for RacingCostParams {
    fn default() -> Self {
        Self {
            pass_reward: -5000.0,
            overtaken_penalty: 5000.0,
            trail_collision_penalty: 10_000.0,
            collision_radius: 1.0,
            sign_dead_band: 0.05,
            pass_gate: 5.0,
        }
    }
}

impl RacingCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pass_reward < 0.0
            && self.overtaken_penalty > 0.0
            && self.overtaken_penalty < self.trail_collision_penalty)
        {
            return Err(Error::invalid(
                "costs.racing",
                "need pass_reward < 0 < overtaken_penalty < trail_collision_penalty",
            ));
        }
        if !(self.collision_radius > 0.0) {
            return Err(Error::invalid("costs.racing.collision_radius", "must be > 0"));
        }
        if !(self.sign_dead_band >= 0.0 && self.pass_gate > 0.0) {
            return Err(Error::invalid(
                "costs.racing",
                "sign_dead_band must be >= 0 and pass_gate > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticObstacle {
    pub x: f64,
    pub y: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Every state-cost parameter an agent needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub obstacle: ObstacleCostParams,
    pub running: RunningCostParams,
    pub racing: RacingCostParams,
    /// Multiplier on every obstacle-ring term (opponents and static obstacles).
    pub w_obstacle: f64,
    /// Multiplier on the passing and trailing-collision terms.
    pub w_racing: f64,
    pub static_obstacles: Vec<StaticObstacle>,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            obstacle: ObstacleCostParams::default(),
            running: RunningCostParams::default(),
            racing: RacingCostParams::default(),
            w_obstacle: 1.0,
            w_racing: 1.0,
            static_obstacles: Vec::new(),
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        self.obstacle.validate()?;
        self.running.validate()?;
        self.racing.validate()?;
        if !(self.w_obstacle >= 0.0 && self.w_racing >= 0.0) {
            return Err(Error::invalid("costs", "w_obstacle and w_racing must be >= 0"));
        }
        for (i, o) in self.static_obstacles.iter().enumerate() {
            ObstacleCostParams {
                r1: o.r1,
                r2: o.r2,
                ..self.obstacle
            }
            .validate()
            .map_err(|_| {
                Error::invalid(
                    format!("costs.static_obstacles[{i}]"),
                    "need 0 < r1 < r2",
                )
            })?;
        }
        Ok(())
    }
}

/// 0 on the centerline, rising quadratically to 1 at the track edge and
/// saturating at 1 beyond it.
pub fn track_cost(map: &TrackMap, x: f64, y: f64) -> f64 {
    track_cost_from_offset(map.lateral_offset(x, y), map.half_width())
}

#[inline]
fn track_cost_from_offset(lateral: f64, half_width: f64) -> f64 {
    let r = lateral / half_width;
    (r * r).min(1.0)
}

/// Obstacle ring cost at distance `d`. The inner disc is closed (`d = r1`
/// costs `beta`) and the outer boundary costs nothing (`d = r2` gives 0).
#[inline]
pub fn obstacle_cost(d: f64, p: &ObstacleCostParams) -> f64 {
    if d > p.r2 {
        0.0
    } else if d > p.r1 {
        let gap = p.r2 - d;
        p.alpha * gap * gap
    } else {
        p.beta
    }
}

#[inline]
fn crash_from(state: &VehicleState, lateral: f64, half_width: f64, p: &RunningCostParams) -> f64 {
    if state.roll.abs() > p.roll_crash_threshold || lateral.abs() > 2.0 * half_width {
        1.0
    } else {
        0.0
    }
}

/// 1 when the vehicle has rolled past the threshold or left the track by
/// more than a full track width, else 0.
pub fn crash_indicator(state: &VehicleState, map: &TrackMap, p: &RunningCostParams) -> f64 {
    crash_from(state, map.lateral_offset(state.x, state.y), map.half_width(), p)
}

#[inline]
fn running_from(
    state: &VehicleState,
    t: usize,
    lateral: f64,
    half_width: f64,
    p: &RunningCostParams,
) -> f64 {
    let speed_err = state.v_x - p.v_desired;
    let slip = state.v_y / state.v_x.abs().max(VELOCITY_FLOOR);
    let crash = crash_from(state, lateral, half_width, p);
    let crash_term = if crash > 0.0 {
        p.w_crash * p.crash_decay.powi(t as i32) * crash
    } else {
        0.0
    };
    p.w_track * track_cost_from_offset(lateral, half_width)
        + p.w_speed * speed_err * speed_err
        + crash_term
        + p.w_slip * slip * slip
}

/// Base running cost `w . (C_M, (v_x - v_d)^2, decay^t I_crash, (v_y / v_x)^2)`.
pub fn running_cost(state: &VehicleState, t: usize, map: &TrackMap, p: &RunningCostParams) -> f64 {
    let lateral = map.lateral_offset(state.x, state.y);
    running_from(state, t, lateral, map.half_width(), p)
}

/// Forward coordinate of `opponent` in the ego body frame; positive when the
/// opponent is ahead.
#[inline]
pub fn relative_longitudinal(ego: &VehicleState, opponent: [f64; 2]) -> f64 {
    let (s, c) = ego.yaw.sin_cos();
    (opponent[0] - ego.x) * c + (opponent[1] - ego.y) * s
}

/// Lateral coordinate of `opponent` in the ego body frame; positive to the left.
#[inline]
pub fn relative_lateral(ego: &VehicleState, opponent: [f64; 2]) -> f64 {
    let (s, c) = ego.yaw.sin_cos();
    -(opponent[0] - ego.x) * s + (opponent[1] - ego.y) * c
}

/// Ahead/behind sign with a dead band that holds the previous value.
#[inline]
pub fn longitudinal_sign(prev_sign: i8, rel: f64, dead_band: f64) -> i8 {
    if rel > dead_band {
        1
    } else if rel < -dead_band {
        -1
    } else {
        prev_sign
    }
}

/// One step of the passing-term stream. `prev_sign` / the returned sign are
/// +1 when the opponent is ahead of the ego (ego trailing), -1 when behind.
pub fn passing_cost(
    prev_sign: i8,
    curr_rel: f64,
    in_collision: bool,
    p: &RacingCostParams,
) -> (f64, i8) {
    let sign = longitudinal_sign(prev_sign, curr_rel, p.sign_dead_band);
    let mut cost = 0.0;
    match (prev_sign, sign) {
        (1, -1) => cost += p.pass_reward,
        (-1, 1) => cost += p.overtaken_penalty,
        _ => {}
    }
    if in_collision && sign == 1 {
        cost += p.trail_collision_penalty;
    }
    (cost, sign)
}

/// Borrowed view of everything needed to score one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub map: &'a TrackMap,
    pub params: &'a CostParams,
    /// Predicted opponent positions, each time-aligned with the ego trajectory.
    pub opponents: &'a [Vec<[f64; 2]>],
}

impl CostContext<'_> {
    /// Sum over `t = 1..=T` of running, obstacle and racing terms. Terminal cost is zero.
    ///
    /// The running cost at trajectory index `t` uses decay exponent `t - 1`.
    pub fn evaluate(&self, traj: &[VehicleState]) -> f64 {
        let p = self.params;
        let hw = self.map.half_width();
        let mut total = 0.0;
        let mut signs = [0i8; 8];
        let mut signs_vec;
        let signs: &mut [i8] = if self.opponents.len() <= signs.len() {
            &mut signs[..self.opponents.len()]
        } else {
            signs_vec = vec![0i8; self.opponents.len()];
            &mut signs_vec
        };
        let gate2 = p.racing.pass_gate * p.racing.pass_gate;
        if let Some(start) = traj.first() {
            for (sign, opp) in signs.iter_mut().zip(self.opponents) {
                let o = opp[0];
                let d2 = (o[0] - start.x).powi(2) + (o[1] - start.y).powi(2);
                if d2 <= gate2 {
                    *sign = longitudinal_sign(
                        0,
                        relative_longitudinal(start, o),
                        p.racing.sign_dead_band,
                    );
                }
            }
        }
        for (t, s) in traj.iter().enumerate().skip(1) {
            let lateral = self.map.lateral_offset(s.x, s.y);
            total += running_from(s, t - 1, lateral, hw, &p.running);
            for (sign, opp) in signs.iter_mut().zip(self.opponents) {
                let o = opp[t];
                let (dx, dy) = (o[0] - s.x, o[1] - s.y);
                let d = (dx * dx + dy * dy).sqrt();
                if p.w_obstacle != 0.0 {
                    total += p.w_obstacle * obstacle_cost(d, &p.obstacle);
                }
                if d <= p.racing.pass_gate {
                    let in_collision = d < p.racing.collision_radius;
                    let (c, next) =
                        passing_cost(*sign, relative_longitudinal(s, o), in_collision, &p.racing);
                    *sign = next;
                    if p.w_racing != 0.0 {
                        total += p.w_racing * c;
                    }
                } else {
                    *sign = 0;
                }
            }
            if p.w_obstacle != 0.0 {
                for o in &p.static_obstacles {
                    let (dx, dy) = (o.x - s.x, o.y - s.y);
                    let d = (dx * dx + dy * dy).sqrt();
                    let ring = ObstacleCostParams {
                        r1: o.r1,
                        r2: o.r2,
                        ..p.obstacle
                    };
                    total += p.w_obstacle * obstacle_cost(d, &ring);
                }
            }
        }
        total
    }
}

/// State-dependent cost `S` of `trajectory` against time-aligned opponent tracks.
pub fn trajectory_cost(
    trajectory: &[VehicleState],
    opponents: &[Vec<[f64; 2]>],
    map: &TrackMap,
    params: &CostParams,
) -> Result<f64> {
    for (i, o) in opponents.iter().enumerate() {
        if o.len() != trajectory.len() {
            return Err(Error::Dimension(format!(
                "opponent {i} track has {} points, ego trajectory has {}",
                o.len(),
                trajectory.len()
            )));
        }
    }
    Ok(CostContext {
        map,
        params,
        opponents,
    }
    .evaluate(trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn oval() -> TrackMap {
        TrackMap::default_oval()
    }

    fn on_line(track: &TrackMap, v_x: f64) -> VehicleState {
        let (x, y, yaw) = track.pose_at(0.1, 0.0);
        VehicleState {
            x,
            y,
            yaw,
            v_x,
            ..Default::default()
        }
    }

    #[test]
    fn track_cost_examples() {
        let t = oval();
        assert_eq!(track_cost(&t, 0.0, -10.0), 0.0);
        assert_eq!(track_cost(&t, 0.0, -13.0), 1.0);
        assert!((track_cost(&t, 0.0, -10.75) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn obstacle_cost_examples() {
        let p = ObstacleCostParams::default();
        assert_eq!(obstacle_cost(3.0, &p), 0.0);
        assert_eq!(obstacle_cost(0.5, &p), 100_000.0);
        assert_eq!(obstacle_cost(1.5, &p), 62.5);
        assert_eq!(obstacle_cost(2.0, &p), 0.0);
        assert_eq!(obstacle_cost(1.0, &p), 100_000.0);
    }

    #[test]
    fn obstacle_params_validation() {
        let mut p = ObstacleCostParams::default();
        assert!(p.validate().is_ok());
        p.r1 = 2.0;
        assert!(p.validate().is_err());
        p = ObstacleCostParams {
            beta: 100.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn crash_indicator_examples() {
        let t = oval();
        let p = RunningCostParams::default();
        let s = on_line(&t, 5.0);
        assert_eq!(crash_indicator(&s, &t, &p), 0.0);
        let rolled = VehicleState {
            roll: p.roll_crash_threshold + 0.01,
            ..s
        };
        assert_eq!(crash_indicator(&rolled, &t, &p), 1.0);
        let off = VehicleState {
            x: 0.0,
            y: -10.0 - (2.0 * 1.5 + 0.1),
            ..s
        };
        assert_eq!(crash_indicator(&off, &t, &p), 1.0);
    }

    #[test]
    fn running_cost_examples() {
        let t = oval();
        let p = RunningCostParams::default();
        let ideal = on_line(&t, p.v_desired);
        assert_eq!(running_cost(&ideal, 0, &t, &p), 0.0);

        let rolled = VehicleState {
            roll: 1.0,
            ..ideal
        };
        let c0 = running_cost(&rolled, 0, &t, &p);
        let c10 = running_cost(&rolled, 10, &t, &p);
        assert!((c10 / c0 - 0.9f64.powi(10)).abs() < 1e-12);
        assert!((0.9f64.powi(10) - 0.3487).abs() < 1e-4);

        let only_speed = RunningCostParams {
            w_track: 0.0,
            w_crash: 0.0,
            w_slip: 0.0,
            w_speed: 4.0,
            ..p
        };
        let slow = on_line(&t, p.v_desired - 1.0);
        assert_eq!(running_cost(&slow, 3, &t, &only_speed), 4.0);
    }

    #[test]
    fn relative_longitudinal_examples() {
        let ego = VehicleState::default();
        assert_eq!(relative_longitudinal(&ego, [2.0, 0.0]), 2.0);
        assert_eq!(relative_longitudinal(&ego, [-2.0, 0.0]), -2.0);
        let ego = VehicleState {
            x: 1.0,
            y: 2.0,
            yaw: PI / 2.0,
            ..Default::default()
        };
        assert!((relative_longitudinal(&ego, [1.0, 5.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn body_frame_inverse_recovers_world_position() {
        let ego = VehicleState {
            x: -3.2,
            y: 7.1,
            yaw: 2.3,
            ..Default::default()
        };
        let opp = [4.4, -1.9];
        let lon = relative_longitudinal(&ego, opp);
        let lat = relative_lateral(&ego, opp);
        let (s, c) = ego.yaw.sin_cos();
        let back = [ego.x + lon * c - lat * s, ego.y + lon * s + lat * c];
        assert!((back[0] - opp[0]).abs() < 1e-12);
        assert!((back[1] - opp[1]).abs() < 1e-12);
    }

    #[test]
    fn passing_cost_examples() {
        let p = RacingCostParams::default();
        assert_eq!(passing_cost(1, -1.0, false, &p), (-5000.0, -1));
        assert_eq!(passing_cost(-1, 1.0, false, &p), (5000.0, 1));
        assert_eq!(passing_cost(1, 1.0, true, &p), (10_000.0, 1));
        // Leading-vehicle collisions are free.
        assert_eq!(passing_cost(-1, -1.0, true, &p), (0.0, -1));
        // Dead band holds the previous sign.
        assert_eq!(passing_cost(1, -0.04, false, &p), (0.0, 1));
    }

    #[test]
    fn trajectory_cost_with_far_opponent_is_zero_for_ideal_driving() {
        let t = oval();
        let p = CostParams::default();
        let s = on_line(&t, p.running.v_desired);
        let traj = vec![s; 4];
        let far = vec![vec![[1e6, 1e6]; 4]];
        assert_eq!(trajectory_cost(&traj, &far, &t, &p).unwrap(), 0.0);
    }

    #[test]
    fn trajectory_cost_single_step_with_opponent_in_ring() {
        let t = oval();
        let p = CostParams::default();
        let s0 = on_line(&t, 5.0);
        let s1 = VehicleState {
            v_y: 0.2,
            ..on_line(&t, 5.5)
        };
        // Opponent 1.5 m to the left of the ego at t = 1: inside the ring, and
        // with zero longitudinal offset no sign is established.
        let (sn, cs) = s1.yaw.sin_cos();
        let opp = [s1.x - 1.5 * sn, s1.y + 1.5 * cs];
        let traj = vec![s0, s1];
        let got = trajectory_cost(&traj, &[vec![opp, opp]], &t, &p).unwrap();
        let want = running_cost(&s1, 0, &t, &p.running) + 62.5;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn trajectory_cost_is_additive_in_per_step_cost() {
        let t = oval();
        let p = CostParams::default();
        let base: Vec<VehicleState> = (0..6).map(|i| on_line(&t, 5.0 + 0.1 * i as f64)).collect();
        let c_base = trajectory_cost(&base, &[], &t, &p).unwrap();
        // Lowering speed by 1 m/s below a speed already at v_desired - 1 adds
        // a fixed amount per step only if the speed error changes uniformly;
        // instead add a static obstacle whose ring contribution is constant.
        let mut with = p.clone();
        let s_ref = base[0];
        with.static_obstacles.push(StaticObstacle {
            x: s_ref.x,
            y: s_ref.y,
            r1: 100.0,
            r2: 200.0,
        });
        let c_with = trajectory_cost(&base, &[], &t, &with).unwrap();
        assert!((c_with - c_base - 5.0 * with.obstacle.beta).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let t = oval();
        let traj = vec![VehicleState::default(); 3];
        assert!(trajectory_cost(&traj, &[vec![[0.0, 0.0]; 2]], &t, &CostParams::default()).is_err());
    }

    #[test]
    fn pass_along_horizon_earns_reward() {
        let t = TrackMap::default_oval();
        let p = CostParams {
            w_obstacle: 0.0,
            ..Default::default()
        };
        // Ego drives +x along the lower straight, opponent parked at x = 0 on
        // the inside of the lane; ego goes from behind to ahead of it.
        let traj: Vec<VehicleState> = (0..5)
            .map(|i| VehicleState {
                x: -2.0 + i as f64,
                y: -10.5,
                v_x: p.running.v_desired,
                ..Default::default()
            })
            .collect();
        let opp = vec![[0.0, -9.0]; 5];
        let with = trajectory_cost(&traj, &[opp], &t, &p).unwrap();
        let without = trajectory_cost(&traj, &[], &t, &p).unwrap();
        assert!((with - without - p.racing.pass_reward).abs() < 1e-9);
    }
}
