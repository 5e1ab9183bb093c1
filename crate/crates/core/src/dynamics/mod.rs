//! Vehicle dynamics: learned forward models and the integrator that rolls
//! them out.
//!
//! Every model predicts the time derivative of the dynamic sub-state
//! `(v_x, v_y, yaw_rate, roll)` from `(v_x, v_y, yaw_rate, roll, steering,
//! throttle)`. The kinematic sub-state `(x, y, yaw)` is advanced directly from
//! the body-frame velocities by [`step`].

mod basis;
mod nn;

use std::fmt::Debug;

pub use basis::{
    eval_basis, basis_predict, fit_basis, load_dataset_csv, BasisModel, BicycleParams, FitReport,
    SysIdSample, BASIS_COUNT, BASIS_NAMES, FRONT_AXLE_DISTANCE, LATERAL_VELOCITY_CAP,
    MAX_STEER_ANGLE, REAR_AXLE_DISTANCE, TIRE_SHAPE, VELOCITY_FLOOR, write_dataset_csv,
};
pub use nn::{nn_predict, NeuralNetModel, NN_INPUT_DIM, NN_OUTPUT_DIM};

use crate::error::{Error, Result};
use crate::state::{wrap_angle, ControlInput, Derivative, VehicleState};

/// Largest explicit-Euler substep; longer `dt` values are subdivided evenly.
pub const MAX_SUBSTEP: f64 = 0.01;

/// A forward model of the dynamic sub-state.
///
/// Implementations are immutable values and must be callable from many
/// threads at once.
pub trait DynamicsModel: Send + Sync + Debug {
    fn derivative(&self, state: &VehicleState, control: &ControlInput) -> Derivative;

    /// `substeps` explicit-Euler substeps of `dt / substeps` under a fixed
    /// control. Overrides must match the default bit for bit.
    fn advance(
        &self,
        state: &VehicleState,
        control: &ControlInput,
        dt: f64,
        substeps: usize,
    ) -> VehicleState {
        let h = dt / substeps as f64;
        let mut s = *state;
        for _ in 0..substeps {
            let d = self.derivative(&s, control);
            s = euler_update(&s, &d, h);
        }
        s
    }
}

/// Model that never accelerates. Vehicles keep their body-frame velocities.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl DynamicsModel for ZeroModel {
    fn derivative(&self, _state: &VehicleState, _control: &ControlInput) -> Derivative {
        Derivative::default()
    }
}

/// Number of Euler substeps used for a step of length `dt`.
pub fn substeps_for(dt: f64) -> usize {
    ((dt / MAX_SUBSTEP) - 1e-9).ceil().max(1.0) as usize
}

/// One Euler substep of length `h`: kinematics from the current body
/// velocities, dynamics from `d`.
#[inline]
pub(crate) fn euler_update(s: &VehicleState, d: &Derivative, h: f64) -> VehicleState {
    let (sin_yaw, cos_yaw) = s.yaw.sin_cos();
    VehicleState {
        x: s.x + (s.v_x * cos_yaw - s.v_y * sin_yaw) * h,
        y: s.y + (s.v_x * sin_yaw + s.v_y * cos_yaw) * h,
        yaw: wrap_angle(s.yaw + s.yaw_rate * h),
        roll: s.roll + d.droll * h,
        v_x: s.v_x + d.dv_x * h,
        v_y: s.v_y + d.dv_y * h,
        yaw_rate: s.yaw_rate + d.dyaw_rate * h,
    }
}

#[inline]
fn integrate(
    model: &dyn DynamicsModel,
    state: &VehicleState,
    control: &ControlInput,
    dt: f64,
    substeps: usize,
) -> VehicleState {
    model.advance(state, control, dt, substeps)
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("dt", format!("must be positive and finite, got {dt}")))
    }
}

/// Advances `state` by `dt` seconds under `control` (clamped to the actuator limits).
pub fn step(
    model: &dyn DynamicsModel,
    state: &VehicleState,
    control: &ControlInput,
    dt: f64,
) -> Result<VehicleState> {
    check_dt(dt)?;
    let next = integrate(model, state, &control.clamped(), dt, substeps_for(dt));
    match next.first_non_finite() {
        Some(field) => Err(Error::DynamicsBlowup { step: 0, field }),
        None => Ok(next),
    }
}

/// Rolls `start` forward through `controls`, returning `controls.len() + 1` states.
pub fn rollout(
    model: &dyn DynamicsModel,
    start: &VehicleState,
    controls: &[ControlInput],
    dt: f64,
) -> Result<Vec<VehicleState>> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    rollout_into(model, start, controls.len(), dt, |t| controls[t], &mut out)?;
    Ok(out)
}

/// Allocation-free rollout used by the samplers. `control_at(t)` yields the
/// (unclamped) control for step `t`; `out` is cleared and refilled.
pub fn rollout_into(
    model: &dyn DynamicsModel,
    start: &VehicleState,
    horizon: usize,
    dt: f64,
    mut control_at: impl FnMut(usize) -> ControlInput,
    out: &mut Vec<VehicleState>,
) -> Result<()> {
    if horizon == 0 {
        return Err(Error::invalid("controls", "horizon must be at least one step"));
    }
    check_dt(dt)?;
    let substeps = substeps_for(dt);
    out.clear();
    out.push(*start);
    let mut s = *start;
    for t in 0..horizon {
        s = integrate(model, &s, &control_at(t).clamped(), dt, substeps);
        if let Some(field) = s.first_non_finite() {
            return Err(Error::DynamicsBlowup { step: t + 1, field });
        }
        out.push(s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// dv_x = -k v_x^2, everything else zero. Smooth, nonlinear.
    #[derive(Debug)]
    struct Quadratic(f64);

    impl DynamicsModel for Quadratic {
        fn derivative(&self, s: &VehicleState, _u: &ControlInput) -> Derivative {
            Derivative {
                dv_x: -self.0 * s.v_x * s.v_x,
                ..Default::default()
            }
        }
    }

    #[derive(Debug)]
    struct Explodes;

    impl DynamicsModel for Explodes {
        fn derivative(&self, s: &VehicleState, _u: &ControlInput) -> Derivative {
            Derivative {
                dv_y: if s.v_y == 0.0 { f64::INFINITY } else { 0.0 },
                ..Default::default()
            }
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let s = VehicleState::at_rest(1.0, -2.0, 0.3);
        let n = step(&ZeroModel, &s, &ControlInput::new(0.5, 0.5), 0.025).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn pure_translation_along_heading() {
        let s = VehicleState {
            v_x: 1.0,
            ..Default::default()
        };
        let n = step(&ZeroModel, &s, &ControlInput::ZERO, 0.1).unwrap();
        assert!((n.x - 0.1).abs() < 1e-12);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.yaw, 0.0);
        assert_eq!(n.v_x, 1.0);
    }

    #[test]
    fn body_velocity_is_rotated_into_world_frame() {
        let s = VehicleState {
            v_x: 1.0,
            yaw: PI / 2.0,
            ..Default::default()
        };
        let n = step(&ZeroModel, &s, &ControlInput::ZERO, 0.1).unwrap();
        assert!((n.y - 0.1).abs() < 1e-12);
        assert!(n.x.abs() < 1e-12);
        assert_eq!(n.yaw, PI / 2.0);
    }

    #[test]
    fn yaw_stays_wrapped() {
        let s = VehicleState {
            yaw: PI - 0.01,
            yaw_rate: 1.0,
            ..Default::default()
        };
        let n = step(&ZeroModel, &s, &ControlInput::ZERO, 0.05).unwrap();
        assert!(n.yaw > -PI && n.yaw <= PI);
        assert!((n.yaw - (-PI + 0.04)).abs() < 1e-9);
    }

    #[test]
    fn non_positive_dt_is_rejected() {
        let s = VehicleState::default();
        assert!(step(&ZeroModel, &s, &ControlInput::ZERO, 0.0).is_err());
        assert!(step(&ZeroModel, &s, &ControlInput::ZERO, -0.1).is_err());
    }

    #[test]
    fn blowup_names_field_and_step() {
        let s = VehicleState::default();
        match step(&Explodes, &s, &ControlInput::ZERO, 0.01) {
            Err(Error::DynamicsBlowup { field, .. }) => assert_eq!(field, "v_y"),
            other => panic!("expected blowup, got {other:?}"),
        }
        let controls = vec![ControlInput::ZERO; 4];
        match rollout(&Explodes, &s, &controls, 0.01) {
            Err(Error::DynamicsBlowup { step, field }) => {
                assert_eq!(step, 1);
                assert_eq!(field, "v_y");
            }
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn substep_count_rounds_up() {
        assert_eq!(substeps_for(0.005), 1);
        assert_eq!(substeps_for(0.01), 1);
        assert_eq!(substeps_for(0.025), 3);
        assert_eq!(substeps_for(0.1), 10);
    }

    #[test]
    fn rollout_single_step_matches_step() {
        let s = VehicleState {
            v_x: 3.0,
            v_y: 0.2,
            yaw_rate: 0.4,
            ..Default::default()
        };
        let u = ControlInput::new(0.2, 0.7);
        let traj = rollout(&Quadratic(0.3), &s, &[u], 0.025).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[0], s);
        assert_eq!(traj[1], step(&Quadratic(0.3), &s, &u, 0.025).unwrap());
    }

    #[test]
    fn constant_speed_rollout_is_evenly_spaced_line() {
        let s = VehicleState {
            v_x: 2.0,
            ..Default::default()
        };
        let controls = vec![ControlInput::ZERO; 10];
        let traj = rollout(&ZeroModel, &s, &controls, 0.05).unwrap();
        assert_eq!(traj.len(), 11);
        for (i, p) in traj.iter().enumerate() {
            assert!((p.x - 0.1 * i as f64).abs() < 1e-12);
            assert_eq!(p.y, 0.0);
        }
        let again = rollout(&ZeroModel, &s, &controls, 0.05).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn empty_control_sequence_is_rejected() {
        assert!(rollout(&ZeroModel, &VehicleState::default(), &[], 0.05).is_err());
    }

    #[test]
    fn step_splitting_error_is_second_order() {
        // One step of dt versus two steps of dt/2; the gap must shrink as dt^2.
        let model = Quadratic(0.8);
        let s = VehicleState {
            v_x: 2.0,
            ..Default::default()
        };
        let gap = |dt: f64| {
            let full = step(&model, &s, &ControlInput::ZERO, dt).unwrap();
            let half = step(&model, &s, &ControlInput::ZERO, dt / 2.0).unwrap();
            let two = step(&model, &half, &ControlInput::ZERO, dt / 2.0).unwrap();
            (full.v_x - two.v_x).abs()
        };
        let dts = [0.008, 0.004, 0.002, 0.001];
        for w in dts.windows(2) {
            let order = (gap(w[0]) / gap(w[1])).log2();
            assert!(order >= 1.9, "observed order {order}");
        }
    }
}
