//! Model Predictive Path Integral control.
//!
//! One call to [`mppi_plan`] is one iteration of the receding-horizon loop:
//! perturb the incumbent control sequence `K` times, roll every perturbed
//! sequence out through the dynamics model, score the trajectories, and move
//! the plan towards the exponentially weighted average of the perturbations.

mod sgolay;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sgolay::{sg_smooth, SavitzkyGolay};

use crate::cost::CostContext;
use crate::dynamics::{rollout_into, DynamicsModel};
use crate::error::{Error, Result};
use crate::state::{ControlInput, VehicleState};

/// Scores a state trajectory (length `T + 1`, index 0 is the current state).
pub trait TrajectoryCost: Sync {
    fn cost(&self, trajectory: &[VehicleState]) -> f64;
}

impl TrajectoryCost for CostContext<'_> {
    fn cost(&self, trajectory: &[VehicleState]) -> f64 {
        self.evaluate(trajectory)
    }
}

impl<F> TrajectoryCost for F
where
    F: Fn(&[VehicleState]) -> f64 + Sync,
{
    fn cost(&self, trajectory: &[VehicleState]) -> f64 {
        self(trajectory)
    }
}

/// Open-loop plan `(u_0, ..., u_{T-1})`, every element inside the actuator box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlSequence {
    controls: Vec<ControlInput>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            controls: vec![ControlInput::ZERO; horizon],
        }
    }

    /// Rejects empty, non-finite or out-of-range sequences.
    pub fn new(controls: Vec<ControlInput>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::invalid("controls", "sequence must not be empty"));
        }
        for (t, u) in controls.iter().enumerate() {
            if !u.is_finite() {
                return Err(Error::NonFinite(format!("control {t}")));
            }
            if !u.is_within_limits() {
                return Err(Error::invalid(
                    format!("controls[{t}]"),
                    "outside the actuator limits [-1, 1]",
                ));
            }
        }
        Ok(Self { controls })
    }

    /// Clamps every element into the actuator box.
    pub fn clamped(controls: Vec<ControlInput>) -> Result<Self> {
        Self::new(controls.into_iter().map(ControlInput::clamped).collect())
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn as_slice(&self) -> &[ControlInput] {
        &self.controls
    }

    pub fn first(&self) -> ControlInput {
        self.controls[0]
    }

    /// Element `t`, or zero control past the end.
    pub fn get_or_zero(&self, t: usize) -> ControlInput {
        self.controls.get(t).copied().unwrap_or(ControlInput::ZERO)
    }

    /// Drops `u_0`, shifts left and appends a zero control.
    pub fn shift_receding(&self) -> Self {
        let mut controls = Vec::with_capacity(self.controls.len());
        controls.extend_from_slice(&self.controls[1..]);
        controls.push(ControlInput::ZERO);
        Self { controls }
    }
}

/// Free-function form of [`ControlSequence::shift_receding`].
pub fn shift_receding(plan: &ControlSequence) -> ControlSequence {
    plan.shift_receding()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiParams {
    /// Number of sampled sequences `K`.
    pub samples: usize,
    /// Horizon length `T` in steps.
    pub horizon: usize,
    /// Planning step (s).
    pub dt: f64,
    /// Diagonal of the sampling covariance, `(steering, throttle)` variances.
    pub sigma: [f64; 2],
    /// Temperature of the exponential weighting.
    pub lambda: f64,
    /// Weight of the control-coupling term `u^T Sigma^-1 eps`.
    pub gamma: f64,
    pub sg_window: usize,
    pub sg_order: usize,
    /// Fraction of samples drawn with zero noise. `None` means `1 / K`.
    /// At least one such sample exists whenever `K >= 2`.
    pub zero_noise_fraction: Option<f64>,
}

impl Default for MppiParams {
    fn default() -> Self {
        Self {
            samples: 1200,
            horizon: 96,
            dt: 0.025,
            sigma: [0.09, 0.04],
            lambda: 10.0,
            gamma: 10.0,
            sg_window: 9,
            sg_order: 3,
            zero_noise_fraction: None,
        }
    }
}

impl MppiParams {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::invalid("mppi.samples", "K must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::invalid("mppi.horizon", "T must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("mppi.dt", "must be positive"));
        }
        if !self.sigma.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("mppi.sigma", "diagonal entries must be > 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("mppi.lambda", "must be > 0"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("mppi.gamma", "must be >= 0"));
        }
        SavitzkyGolay::new(self.sg_window, self.sg_order)?;
        if self.sg_window > self.horizon {
            return Err(Error::invalid(
                "mppi.sg_window",
                format!("window {} exceeds the horizon {}", self.sg_window, self.horizon),
            ));
        }
        if let Some(f) = self.zero_noise_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("mppi.zero_noise_fraction", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Number of leading samples forced to zero noise.
    pub fn zero_noise_samples(&self) -> usize {
        if self.samples < 2 {
            return 0;
        }
        let frac = self.zero_noise_fraction.unwrap_or(1.0 / self.samples as f64);
        ((frac * self.samples as f64).round() as usize).clamp(1, self.samples)
    }
}

/// SplitMix64 finaliser; spreads consecutive integers over the seed space.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent stream `stream` derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix_seed(base ^ mix_seed(stream))
}

/// `K x T` perturbations, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbations {
    samples: usize,
    horizon: usize,
    data: Vec<[f64; 2]>,
}

impl Perturbations {
    pub fn from_rows(rows: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        let samples = rows.len();
        let horizon = rows.first().map_or(0, Vec::len);
        if samples == 0 || horizon == 0 {
            return Err(Error::Dimension("perturbations must be at least 1 x 1".into()));
        }
        if rows.iter().any(|r| r.len() != horizon) {
            return Err(Error::Dimension("perturbation rows have differing lengths".into()));
        }
        Ok(Self {
            samples,
            horizon,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sample(&self, k: usize) -> &[[f64; 2]] {
        &self.data[k * self.horizon..(k + 1) * self.horizon]
    }
}

fn fill_noise(eps: &mut [[f64; 2]], k: usize, zero_noise: usize, std: [f64; 2], seed: u64) {
    if k < zero_noise {
        eps.fill([0.0, 0.0]);
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
    for e in eps.iter_mut() {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        *e = [a * std[0], b * std[1]];
    }
}

/// Draws `E^k ~ N(0, Sigma)` for every sample. Sample `k` has its own random
/// stream, so the result does not depend on how the work is scheduled.
pub fn sample_perturbations(params: &MppiParams, seed: u64) -> Result<Perturbations> {
    params.validate()?;
    let (k, t) = (params.samples, params.horizon);
    let std = [params.sigma[0].sqrt(), params.sigma[1].sqrt()];
    let zero = params.zero_noise_samples();
    let mut data = vec![[0.0; 2]; k * t];
    data.par_chunks_mut(t)
        .enumerate()
        .for_each(|(i, eps)| fill_noise(eps, i, zero, std, seed));
    Ok(Perturbations {
        samples: k,
        horizon: t,
        data,
    })
}

#[inline]
fn control_coupling(plan: &[ControlInput], eps: &[[f64; 2]], sigma: [f64; 2]) -> f64 {
    let mut acc = 0.0;
    for (u, e) in plan.iter().zip(eps) {
        acc += u.steering * e[0] / sigma[0] + u.throttle * e[1] / sigma[1];
    }
    acc
}

/// State cost `S` plus `gamma * sum_t u_t^T Sigma^-1 eps_t`.
pub fn sample_cost(
    state_cost: f64,
    plan: &ControlSequence,
    perturbation: &[[f64; 2]],
    params: &MppiParams,
) -> Result<f64> {
    if perturbation.len() != plan.len() {
        return Err(Error::Dimension(format!(
            "perturbation has {} steps, plan has {}",
            perturbation.len(),
            plan.len()
        )));
    }
    if params.gamma == 0.0 {
        return Ok(state_cost);
    }
    Ok(state_cost + params.gamma * control_coupling(plan.as_slice(), perturbation, params.sigma))
}

fn cost_summary(costs: &[f64]) -> (f64, f64, usize) {
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    let mut n = 0;
    for &c in costs {
        if c.is_finite() {
            min = min.min(c);
            sum += c;
            n += 1;
        }
    }
    let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
    (min, mean, n)
}

/// `w_k = exp(-(S_k - beta) / lambda) / eta` with `beta = min_k S_k`.
///
/// Samples with infinite or NaN cost receive zero weight. A batch with no
/// finite cost is degenerate.
pub fn compute_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::DegenerateBatch {
            reason: "empty batch".into(),
            min_cost: f64::NAN,
            mean_cost: f64::NAN,
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("mppi.lambda", "must be > 0"));
    }
    let (beta, mean, finite) = cost_summary(costs);
    if finite == 0 {
        return Err(Error::DegenerateBatch {
            reason: "every sample cost is infinite or NaN".into(),
            min_cost: beta,
            mean_cost: mean,
        });
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|&c| {
            if c.is_finite() {
                (-(c - beta) / lambda).exp()
            } else {
                0.0
            }
        })
        .collect();
    // The argmin sample contributes exp(0) = 1, so eta >= 1.
    let eta: f64 = w.iter().sum();
    for v in &mut w {
        *v /= eta;
    }
    Ok(w)
}

/// `1 / sum_k w_k^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

fn weighted_update(
    plan: &ControlSequence,
    weights: &[f64],
    noise: &Perturbations,
    filter: &SavitzkyGolay,
) -> Result<ControlSequence> {
    if weights.len() != noise.samples() || noise.horizon() != plan.len() {
        return Err(Error::Dimension(format!(
            "{} weights and {}x{} perturbations for a plan of {} steps",
            weights.len(),
            noise.samples(),
            noise.horizon(),
            plan.len()
        )));
    }
    let t_len = plan.len();
    let mut avg = [vec![0.0; t_len], vec![0.0; t_len]];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (t, e) in noise.sample(k).iter().enumerate() {
            avg[0][t] += w * e[0];
            avg[1][t] += w * e[1];
        }
    }
    let steer = filter.smooth(&avg[0])?;
    let throttle = filter.smooth(&avg[1])?;
    let controls = plan
        .as_slice()
        .iter()
        .enumerate()
        .map(|(t, u)| ControlInput::new(u.steering + steer[t], u.throttle + throttle[t]).clamped())
        .collect();
    ControlSequence::new(controls)
}

/// `U <- clamp(U + SGF(sum_k w_k E_k))`.
pub fn update_controls(
    plan: &ControlSequence,
    weights: &[f64],
    noise: &Perturbations,
    params: &MppiParams,
) -> Result<ControlSequence> {
    let filter = SavitzkyGolay::new(params.sg_window, params.sg_order)?;
    weighted_update(plan, weights, noise, &filter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub seed: u64,
    pub min_cost: f64,
    pub mean_cost: f64,
    pub ess: f64,
    pub finite_samples: usize,
    /// Wall-clock time of the replan; not reproducible, never part of a trace.
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    /// The optimised plan, aligned with the current state.
    pub plan: ControlSequence,
    /// `plan` shifted by one step, the incumbent for the next replan.
    pub next: ControlSequence,
    /// `plan[0]`, the control to actuate now.
    pub control: ControlInput,
    pub diagnostics: Diagnostics,
}

/// One MPPI iteration from `state` around the incumbent `plan`.
///
/// Sample rollouts run on the current rayon pool. Each sample's noise and
/// cost depend only on `(seed, k)`, and every reduction runs in index order,
/// so the result is identical for any thread count.
pub fn mppi_plan(
    state: &VehicleState,
    plan: &ControlSequence,
    model: &dyn DynamicsModel,
    cost: &dyn TrajectoryCost,
    params: &MppiParams,
    seed: u64,
) -> Result<PlanOutput> {
    let started = Instant::now();
    params.validate()?;
    state.check_finite()?;
    if plan.len() != params.horizon {
        return Err(Error::Dimension(format!(
            "plan has {} steps, horizon is {}",
            plan.len(),
            params.horizon
        )));
    }
    let filter = SavitzkyGolay::new(params.sg_window, params.sg_order)?;
    let (k_count, t_len) = (params.samples, params.horizon);
    let std = [params.sigma[0].sqrt(), params.sigma[1].sqrt()];
    let zero = params.zero_noise_samples();
    let nominal = plan.as_slice();

    let mut data = vec![[0.0; 2]; k_count * t_len];
    let mut costs = vec![0.0; k_count];
    data.par_chunks_mut(t_len)
        .zip(costs.par_iter_mut())
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(t_len + 1),
            |traj, (k, (eps, out))| {
                fill_noise(eps, k, zero, std, seed);
                let eps: &[[f64; 2]] = eps;
                let rolled = rollout_into(
                    model,
                    state,
                    t_len,
                    params.dt,
                    |t| ControlInput::new(nominal[t].steering + eps[t][0], nominal[t].throttle + eps[t][1]),
                    traj,
                );
                *out = match rolled {
                    Ok(()) => {
                        let mut s = cost.cost(traj);
                        if params.gamma != 0.0 {
                            s += params.gamma * control_coupling(nominal, eps, params.sigma);
                        }
                        if s.is_nan() {
                            f64::INFINITY
                        } else {
                            s
                        }
                    }
                    Err(_) => f64::INFINITY,
                };
            },
        );
    let noise = Perturbations {
        samples: k_count,
        horizon: t_len,
        data,
    };

    let (min_cost, mean_cost, finite_samples) = cost_summary(&costs);
    let weights = compute_weights(&costs, params.lambda)?;
    let updated = weighted_update(plan, &weights, &noise, &filter)?;
    let next = updated.shift_receding();
    Ok(PlanOutput {
        control: updated.first(),
        next,
        plan: updated,
        diagnostics: Diagnostics {
            seed,
            min_cost,
            mean_cost,
            ess: effective_sample_size(&weights),
            finite_samples,
            micros: started.elapsed().as_micros() as u64,
        },
    })
}
