//! Linear-in-parameters dynamics model over a fixed set of nonlinear
//! bicycle-model features, and its closed-form least-squares fit.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{euler_update, DynamicsModel};
use crate::error::{Error, Result};
use crate::state::{ControlInput, Derivative, VehicleState};

pub const BASIS_COUNT: usize = 25;

/// Replaces `|v_x|` in denominators and arctangents below this speed (m/s).
pub const VELOCITY_FLOOR: f64 = 0.3;
/// Center of mass to front axle (m).
pub const FRONT_AXLE_DISTANCE: f64 = 0.45;
/// Center of mass to rear axle (m).
pub const REAR_AXLE_DISTANCE: f64 = 0.45;
/// Road-wheel angle at full steering command (rad).
pub const MAX_STEER_ANGLE: f64 = 0.45;
/// Shape factor inside the arctangent tire-force saturation.
pub const TIRE_SHAPE: f64 = 4.0;
/// Saturation of the clipped lateral-velocity feature (m/s).
pub const LATERAL_VELOCITY_CAP: f64 = 0.5;

/// Feature names in evaluation order. `delta = MAX_STEER_ANGLE * steering`,
/// `vxf = max(|v_x|, VELOCITY_FLOOR)`,
/// `alpha_f = atan2(v_y + a*yaw_rate, vxf) - delta`,
/// `alpha_r = atan2(v_y - b*yaw_rate, vxf)`.
pub const BASIS_NAMES: [&str; BASIS_COUNT] = [
    "1",
    "v_x",
    "v_y",
    "yaw_rate",
    "roll",
    "throttle",
    "steering",
    "sin(steering)",
    "cos(steering)",
    "alpha_f",
    "alpha_r",
    "tan(alpha_f)",
    "tan(alpha_r)",
    "atan(B*alpha_f)",
    "atan(B*alpha_r)",
    "atan(B*alpha_f)*cos(delta)",
    "v_x*yaw_rate",
    "v_y*yaw_rate",
    "v_x*steering",
    "throttle^2",
    "throttle^3",
    "throttle*v_x",
    "roll*v_x",
    "v_y/vxf",
    "clamp(v_y, -cap, cap)",
];

const F_ALPHA_F: usize = 9;
const F_ALPHA_R: usize = 10;
const F_TAN_F: usize = 11;
const F_TAN_R: usize = 12;
const F_SAT_F: usize = 13;
const F_SAT_R: usize = 14;
const F_SAT_F_COS: usize = 15;
const F_SIN_STEER: usize = 7;
const F_COS_STEER: usize = 8;

/// Which expensive feature groups a model actually consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FeatureNeeds {
    steer_trig: bool,
    slip: bool,
    tan: bool,
    saturation: bool,
}

impl FeatureNeeds {
    const ALL: FeatureNeeds = FeatureNeeds {
        steer_trig: true,
        slip: true,
        tan: true,
        saturation: true,
    };

    fn from_active(active: &[bool; BASIS_COUNT]) -> Self {
        let tan = active[F_TAN_F] || active[F_TAN_R];
        let saturation = active[F_SAT_F] || active[F_SAT_R] || active[F_SAT_F_COS];
        FeatureNeeds {
            steer_trig: active[F_SIN_STEER] || active[F_COS_STEER] || active[F_SAT_F_COS],
            slip: tan || saturation || active[F_ALPHA_F] || active[F_ALPHA_R],
            tan,
            saturation,
        }
    }
}

/// Control-only terms, constant across the substeps of one step.
#[derive(Debug, Clone, Copy)]
struct ControlTerms {
    steer: f64,
    thr: f64,
    delta: f64,
    sin_steer: f64,
    cos_steer: f64,
    cos_delta: f64,
}

impl ControlTerms {
    #[inline]
    fn new(u: &ControlInput, needs: FeatureNeeds) -> Self {
        let delta = MAX_STEER_ANGLE * u.steering;
        // The trig features act on the normalised command; only the tyre
        // term uses the physical wheel angle.
        let (sin_steer, cos_steer, cos_delta) = if needs.steer_trig {
            let (s, c) = u.steering.sin_cos();
            (s, c, delta.cos())
        } else {
            (0.0, 0.0, 0.0)
        };
        Self {
            steer: u.steering,
            thr: u.throttle,
            delta,
            sin_steer,
            cos_steer,
            cos_delta,
        }
    }
}

#[inline]
fn features(s: &VehicleState, u: &ControlInput, needs: FeatureNeeds) -> [f64; BASIS_COUNT] {
    features_with(s, &ControlTerms::new(u, needs), needs)
}

#[inline]
fn features_with(s: &VehicleState, c: &ControlTerms, needs: FeatureNeeds) -> [f64; BASIS_COUNT] {
    let mut phi = [0.0; BASIS_COUNT];
    let (vx, vy, r, roll) = (s.v_x, s.v_y, s.yaw_rate, s.roll);
    let (steer, thr) = (c.steer, c.thr);
    let vxf = vx.abs().max(VELOCITY_FLOOR);

    phi[0] = 1.0;
    phi[1] = vx;
    phi[2] = vy;
    phi[3] = r;
    phi[4] = roll;
    phi[5] = thr;
    phi[6] = steer;
    phi[F_SIN_STEER] = c.sin_steer;
    phi[F_COS_STEER] = c.cos_steer;
    if needs.slip {
        let alpha_f = (vy + FRONT_AXLE_DISTANCE * r).atan2(vxf) - c.delta;
        let alpha_r = (vy - REAR_AXLE_DISTANCE * r).atan2(vxf);
        phi[F_ALPHA_F] = alpha_f;
        phi[F_ALPHA_R] = alpha_r;
        if needs.tan {
            phi[F_TAN_F] = alpha_f.tan();
            phi[F_TAN_R] = alpha_r.tan();
        }
        if needs.saturation {
            let sat_f = (TIRE_SHAPE * alpha_f).atan();
            phi[F_SAT_F] = sat_f;
            phi[F_SAT_R] = (TIRE_SHAPE * alpha_r).atan();
            phi[F_SAT_F_COS] = sat_f * c.cos_delta;
        }
    }
    phi[16] = vx * r;
    phi[17] = vy * r;
    phi[18] = vx * steer;
    phi[19] = thr * thr;
    phi[20] = thr * thr * thr;
    phi[21] = thr * vx;
    phi[22] = roll * vx;
    phi[23] = vy / vxf;
    phi[24] = vy.clamp(-LATERAL_VELOCITY_CAP, LATERAL_VELOCITY_CAP);
    phi
}

fn check_inputs(state: &VehicleState, control: &ControlInput) -> Result<()> {
    state.check_finite()?;
    if !control.is_finite() {
        return Err(Error::NonFinite("control input".into()));
    }
    Ok(())
}

/// Evaluates the full 25-element feature vector.
pub fn eval_basis(state: &VehicleState, control: &ControlInput) -> Result<[f64; BASIS_COUNT]> {
    check_inputs(state, control)?;
    Ok(features(state, control, FeatureNeeds::ALL))
}

/// Coefficient matrix `theta` (25 x 4) mapping features to
/// `(dv_x, dv_y, dyaw_rate, droll)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisModel {
    theta: [[f64; 4]; BASIS_COUNT],
    active: Vec<usize>,
    needs: FeatureNeeds,
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    basis_version: u32,
    theta: Vec<Vec<f64>>,
}

impl BasisModel {
    pub fn zeros() -> Self {
        Self::from_theta([[0.0; 4]; BASIS_COUNT])
    }

    pub fn from_theta(theta: [[f64; 4]; BASIS_COUNT]) -> Self {
        let mut flags = [false; BASIS_COUNT];
        for (flag, row) in flags.iter_mut().zip(theta.iter()) {
            *flag = row.iter().any(|&c| c != 0.0);
        }
        let active = (0..BASIS_COUNT).filter(|&j| flags[j]).collect();
        Self {
            theta,
            active,
            needs: FeatureNeeds::from_active(&flags),
        }
    }

    /// Builds a model from `b x 4` rows, validating shape and finiteness.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != BASIS_COUNT {
            return Err(Error::Dimension(format!(
                "theta has {} rows, expected {BASIS_COUNT}",
                rows.len()
            )));
        }
        let mut theta = [[0.0; 4]; BASIS_COUNT];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != 4 {
                return Err(Error::Dimension(format!(
                    "theta row {i} has {} columns, expected 4",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("theta[{i}][{j}]")));
                }
                theta[i][j] = v;
            }
        }
        Ok(Self::from_theta(theta))
    }

    /// The reference vehicle: a nonlinear bicycle model expressed exactly in
    /// the feature basis.
    pub fn reference() -> Self {
        BicycleParams::default().to_basis_model()
    }

    pub fn theta(&self) -> &[[f64; 4]; BASIS_COUNT] {
        &self.theta
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.theta.iter().map(|r| r.to_vec()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::parse(path, reason),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BasisFile =
            serde_json::from_str(text).map_err(|e| Error::parse(Path::new("<basis>"), e))?;
        if file.basis_version != 1 {
            return Err(Error::invalid(
                "basis_version",
                format!("unsupported version {}", file.basis_version),
            ));
        }
        Self::from_rows(&file.theta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&BasisFile {
            basis_version: 1,
            theta: self.rows(),
        })
        .expect("basis model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    #[inline]
    fn predict_unchecked(&self, state: &VehicleState, control: &ControlInput) -> Derivative {
        self.predict_with(state, &ControlTerms::new(control, self.needs))
    }

    #[inline]
    fn predict_with(&self, state: &VehicleState, terms: &ControlTerms) -> Derivative {
        let phi = features_with(state, terms, self.needs);
        let mut out = [0.0; 4];
        for &j in &self.active {
            let row = &self.theta[j];
            let p = phi[j];
            out[0] += row[0] * p;
            out[1] += row[1] * p;
            out[2] += row[2] * p;
            out[3] += row[3] * p;
        }
        Derivative::from_array(out)
    }
}

impl DynamicsModel for BasisModel {
    fn derivative(&self, state: &VehicleState, control: &ControlInput) -> Derivative {
        self.predict_unchecked(state, control)
    }

    fn advance(
        &self,
        state: &VehicleState,
        control: &ControlInput,
        dt: f64,
        substeps: usize,
    ) -> VehicleState {
        let terms = ControlTerms::new(control, self.needs);
        let h = dt / substeps as f64;
        let mut s = *state;
        for _ in 0..substeps {
            let d = self.predict_with(&s, &terms);
            s = euler_update(&s, &d, h);
        }
        s
    }
}

/// `theta^T phi(state, control)`.
pub fn basis_predict(
    model: &BasisModel,
    state: &VehicleState,
    control: &ControlInput,
) -> Result<Derivative> {
    check_inputs(state, control)?;
    Ok(model.predict_unchecked(state, control))
}

/// Physical constants of the reference bicycle model.
///
/// Longitudinal: `dv_x = drive_accel*throttle - drag*v_x + v_y*yaw_rate`, so
/// full throttle settles at `drive_accel / drag` m/s.
/// Lateral: axle forces `F = -tire_peak * atan(B * alpha)`.
/// Roll: first-order lag driven by lateral acceleration `v_x * yaw_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub tire_peak: f64,
    pub drive_accel: f64,
    pub drag: f64,
    pub roll_stiffness: f64,
    pub roll_gain: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            mass: 22.0,
            yaw_inertia: 1.8,
            tire_peak: 60.0,
            drive_accel: 5.0,
            drag: 0.5,
            roll_stiffness: 5.0,
            roll_gain: 0.07,
        }
    }
}

impl BicycleParams {
    pub fn top_speed(&self) -> f64 {
        self.drive_accel / self.drag
    }

    pub fn to_basis_model(&self) -> BasisModel {
        let mut theta = [[0.0; 4]; BASIS_COUNT];
        let (a, b) = (FRONT_AXLE_DISTANCE, REAR_AXLE_DISTANCE);
        theta[5][0] = self.drive_accel;
        theta[1][0] = -self.drag;
        theta[17][0] = 1.0;

        theta[F_SAT_F_COS][1] = -self.tire_peak / self.mass;
        theta[F_SAT_R][1] = -self.tire_peak / self.mass;
        theta[16][1] = -1.0;

        theta[F_SAT_F_COS][2] = -a * self.tire_peak / self.yaw_inertia;
        theta[F_SAT_R][2] = b * self.tire_peak / self.yaw_inertia;

        theta[4][3] = -self.roll_stiffness;
        theta[16][3] = self.roll_gain;
        BasisModel::from_theta(theta)
    }
}

/// One system-identification row: dynamic sub-state, control, observed derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SysIdSample {
    pub v_x: f64,
    pub v_y: f64,
    pub yaw_rate: f64,
    pub roll: f64,
    pub steering: f64,
    pub throttle: f64,
    pub dvx: f64,
    pub dvy: f64,
    pub dyaw_rate: f64,
    pub droll: f64,
}

impl SysIdSample {
    pub fn new(state: &VehicleState, control: &ControlInput, d: &Derivative) -> Self {
        Self {
            v_x: state.v_x,
            v_y: state.v_y,
            yaw_rate: state.yaw_rate,
            roll: state.roll,
            steering: control.steering,
            throttle: control.throttle,
            dvx: d.dv_x,
            dvy: d.dv_y,
            dyaw_rate: d.dyaw_rate,
            droll: d.droll,
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState {
            v_x: self.v_x,
            v_y: self.v_y,
            yaw_rate: self.yaw_rate,
            roll: self.roll,
            ..Default::default()
        }
    }

    pub fn control(&self) -> ControlInput {
        ControlInput::new(self.steering, self.throttle)
    }

    pub fn derivative(&self) -> Derivative {
        Derivative {
            dv_x: self.dvx,
            dv_y: self.dvy,
            dyaw_rate: self.dyaw_rate,
            droll: self.droll,
        }
    }
}

pub fn load_dataset_csv(path: &Path) -> Result<Vec<SysIdSample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<SysIdSample>().enumerate() {
        let row = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_dataset_csv(path: &Path, rows: &[SysIdSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: BasisModel,
    /// Root-mean-square residual per output channel.
    pub rms_residual: [f64; 4],
    /// Ratio of the largest to smallest |R_ii| of the design-matrix QR.
    pub condition: f64,
    pub rows: usize,
}

/// Relative pivot size below which the design matrix counts as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Closed-form least-squares fit of `theta` via Householder QR.
pub fn fit_basis(dataset: &[SysIdSample]) -> Result<FitReport> {
    let n = dataset.len();
    if n < BASIS_COUNT {
        return Err(Error::SingularFit {
            condition: f64::INFINITY,
            rows: n,
            cols: BASIS_COUNT,
        });
    }
    let mut design = DMatrix::<f64>::zeros(n, BASIS_COUNT);
    let mut target = DMatrix::<f64>::zeros(n, 4);
    for (i, sample) in dataset.iter().enumerate() {
        let phi = eval_basis(&sample.state(), &sample.control())
            .map_err(|e| Error::NonFinite(format!("dataset row {}: {e}", i + 1)))?;
        for (j, p) in phi.iter().enumerate() {
            design[(i, j)] = *p;
        }
        for (j, d) in sample.derivative().as_array().iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("dataset row {} derivative", i + 1)));
            }
            target[(i, j)] = *d;
        }
    }

    let qr = design.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..BASIS_COUNT).map(|i| r[(i, i)].abs()).collect();
    let max_pivot = diag.iter().cloned().fold(0.0, f64::max);
    let min_pivot = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min_pivot > 0.0 {
        max_pivot / min_pivot
    } else {
        f64::INFINITY
    };
    if max_pivot == 0.0 || min_pivot <= RANK_TOLERANCE * max_pivot {
        return Err(Error::SingularFit {
            condition,
            rows: n,
            cols: BASIS_COUNT,
        });
    }
    let qt_y = qr.q().transpose() * &target;
    let solution = r.solve_upper_triangular(&qt_y).ok_or(Error::SingularFit {
        condition,
        rows: n,
        cols: BASIS_COUNT,
    })?;

    let mut theta = [[0.0; 4]; BASIS_COUNT];
    for (i, row) in theta.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = solution[(i, j)];
        }
    }
    let residual = &design * &solution - &target;
    let mut rms = [0.0; 4];
    for (j, v) in rms.iter_mut().enumerate() {
        *v = (residual.column(j).norm_squared() / n as f64).sqrt();
    }
    Ok(FitReport {
        model: BasisModel::from_theta(theta),
        rms_residual: rms,
        condition,
        rows: n,
    })
}
