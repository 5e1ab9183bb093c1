//! Vehicle state, control input and model derivative value types.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned untouched.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Full planar pose and velocity state of one vehicle.
///
/// `x`, `y` and `yaw` live in the world frame; `v_x`, `v_y` are body-frame
/// velocities (+x forward, +y left).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub roll: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            ..Self::default()
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn speed(&self) -> f64 {
        self.v_x.hypot(self.v_y)
    }

    /// Body-frame velocity rotated into the world frame.
    pub fn world_velocity(&self) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.v_x * c - self.v_y * s,
            self.v_x * s + self.v_y * c,
        ]
    }

    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("x", self.x),
            ("y", self.y),
            ("yaw", self.yaw),
            ("roll", self.roll),
            ("v_x", self.v_x),
            ("v_y", self.v_y),
            ("yaw_rate", self.yaw_rate),
        ]
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(field) => Err(Error::NonFinite(format!("vehicle state field `{field}`"))),
            None => Ok(()),
        }
    }
}

/// Normalized actuator command. Both channels live in `[-1, 1]`; positive
/// steering turns left, positive throttle accelerates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub steering: f64,
    pub throttle: f64,
}

pub const CONTROL_MIN: f64 = -1.0;
pub const CONTROL_MAX: f64 = 1.0;

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        steering: 0.0,
        throttle: 0.0,
    };

    pub fn new(steering: f64, throttle: f64) -> Self {
        Self { steering, throttle }
    }

    pub fn clamped(self) -> Self {
        Self {
            steering: self.steering.clamp(CONTROL_MIN, CONTROL_MAX),
            throttle: self.throttle.clamp(CONTROL_MIN, CONTROL_MAX),
        }
    }

    pub fn is_within_limits(&self) -> bool {
        (CONTROL_MIN..=CONTROL_MAX).contains(&self.steering)
            && (CONTROL_MIN..=CONTROL_MAX).contains(&self.throttle)
    }

    pub fn is_finite(&self) -> bool {
        self.steering.is_finite() && self.throttle.is_finite()
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.steering, self.throttle]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self {
            steering: a[0],
            throttle: a[1],
        }
    }
}

/// Time derivative of the dynamic sub-state produced by a learned model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Derivative {
    pub dv_x: f64,
    pub dv_y: f64,
    pub dyaw_rate: f64,
    pub droll: f64,
}

impl Derivative {
    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dv_x: a[0],
            dv_y: a[1],
            dyaw_rate: a[2],
            droll: a[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dv_x, self.dv_y, self.dyaw_rate, self.droll]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_in_range_values_bit_exact() {
        for a in [0.0, 1.0, -3.0, PI, PI / 2.0, -PI + 1e-12] {
            assert_eq!(wrap_angle(a).to_bits(), a.to_bits());
        }
    }

    #[test]
    fn wrap_maps_into_half_open_interval() {
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(TAU + 0.5) - 0.5).abs() < 1e-12);
        assert!((wrap_angle(-TAU - 0.5) + 0.5).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn clamp_limits_both_channels() {
        let c = ControlInput::new(1.5, -3.0).clamped();
        assert_eq!(c, ControlInput::new(1.0, -1.0));
        assert!(c.is_within_limits());
    }

    #[test]
    fn world_velocity_rotates_body_frame() {
        let s = VehicleState {
            yaw: PI / 2.0,
            v_x: 2.0,
            ..Default::default()
        };
        let v = s.world_velocity();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - 2.0).abs() < 1e-12);
    }
}
