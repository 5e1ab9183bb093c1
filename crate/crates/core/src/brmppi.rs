//! Best-response MPPI: every controlled agent plans against the noise-free
//! predictions of all other agents, one sequential sweep per control cycle.

use serde::{Deserialize, Serialize};

use crate::cost::{CostContext, CostParams};
use crate::dynamics::{rollout, DynamicsModel};
use crate::error::{Error, Result};
use crate::mppi::{derive_seed, mppi_plan, ControlSequence, MppiParams, PlanOutput};
use crate::state::VehicleState;
use crate::track::TrackMap;
use crate::v2v::PoseMessage;

/// What is known about an opponent's intended motion.
#[derive(Debug, Clone, Copy)]
pub enum OpponentPlan<'a> {
    /// Shared nominal plan, rolled out without noise through `model`.
    Nominal {
        state: VehicleState,
        plan: &'a ControlSequence,
        model: &'a dyn DynamicsModel,
    },
    /// Only the latest broadcast pose; extrapolated at constant world velocity.
    Pose {
        msg: PoseMessage,
        /// Current time on the simulation clock (s).
        now: f64,
        staleness_limit: f64,
    },
}

/// Predicts `horizon + 1` opponent states on the ego planning grid
/// `now + t * dt`.
///
/// A pose is first carried forward by its age so index 0 lines up with the
/// ego's current state.
pub fn predict_opponent(plan: &OpponentPlan<'_>, horizon: usize, dt: f64) -> Result<Vec<VehicleState>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    match plan {
        OpponentPlan::Nominal { state, plan, model } => {
            if plan.len() < horizon {
                return Err(Error::Dimension(format!(
                    "opponent plan has {} steps, horizon is {horizon}",
                    plan.len()
                )));
            }
            rollout(*model, state, &plan.as_slice()[..horizon], dt)
        }
        OpponentPlan::Pose {
            msg,
            now,
            staleness_limit,
        } => {
            let age = now - msg.t_sent;
            if age > *staleness_limit {
                return Err(Error::StaleOpponent {
                    vehicle_id: msg.vehicle_id,
                    age,
                    limit: *staleness_limit,
                });
            }
            let base = msg.state();
            base.check_finite()?;
            let [vx, vy] = msg.world_velocity();
            Ok((0..=horizon)
                .map(|t| {
                    let tau = age.max(0.0) + t as f64 * dt;
                    VehicleState {
                        x: base.x + vx * tau,
                        y: base.y + vy * tau,
                        ..base
                    }
                })
                .collect())
        }
    }
}

/// Positions of a predicted trajectory.
pub fn positions(traj: &[VehicleState]) -> Vec<[f64; 2]> {
    traj.iter().map(VehicleState::position).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    /// Planned by this cycle.
    Controlled,
    /// Human or scripted: contributes a prediction, receives no plan.
    Predicted,
}

/// One participant in a cycle.
#[derive(Debug, Clone)]
pub struct BrAgent<'a> {
    pub role: AgentRole,
    pub state: VehicleState,
    /// Incumbent plan of a controlled agent, aligned with `state`.
    pub plan: Option<ControlSequence>,
    /// Model used for the agent's own sampled rollouts.
    pub model: &'a dyn DynamicsModel,
    pub costs: &'a CostParams,
    /// Ready-made prediction for predicted agents (`T + 1` states).
    pub prediction: Option<Vec<VehicleState>>,
}

/// Seed used for agent `index` within a cycle seeded with `seed`.
pub fn agent_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// One best-response sweep.
///
/// Controlled agents are planned in index order. Each sees every other
/// agent's noise-free prediction: controlled peers roll their nominal plan
/// through `peer_model`, using the plan already updated earlier in this
/// sweep where there is one. Predicted agents contribute `prediction`
/// unchanged.
///
/// The result has one entry per agent: `None` for predicted agents, and the
/// planner's own result otherwise. A failing agent keeps its incumbent plan
/// for the peers that follow it.
pub fn br_mppi_cycle(
    agents: &[BrAgent<'_>],
    peer_model: &dyn DynamicsModel,
    track: &TrackMap,
    params: &MppiParams,
    seed: u64,
) -> Vec<Option<Result<PlanOutput>>> {
    let horizon = params.horizon;
    let mut current: Vec<Option<ControlSequence>> = agents.iter().map(|a| a.plan.clone()).collect();
    let mut results: Vec<Option<Result<PlanOutput>>> = Vec::with_capacity(agents.len());

    for (i, agent) in agents.iter().enumerate() {
        if agent.role == AgentRole::Predicted {
            results.push(None);
            continue;
        }
        let outcome = (|| {
            let plan = current[i].as_ref().ok_or_else(|| {
                Error::invalid(format!("agents[{i}].plan"), "controlled agent has no plan")
            })?;
            let mut opponents = Vec::with_capacity(agents.len().saturating_sub(1));
            for (j, peer) in agents.iter().enumerate() {
                if j == i {
                    continue;
                }
                let traj = match peer.role {
                    AgentRole::Controlled => {
                        let peer_plan = current[j].as_ref().ok_or_else(|| {
                            Error::invalid(format!("agents[{j}].plan"), "controlled agent has no plan")
                        })?;
                        predict_opponent(
                            &OpponentPlan::Nominal {
                                state: peer.state,
                                plan: peer_plan,
                                model: peer_model,
                            },
                            horizon,
                            params.dt,
                        )?
                    }
                    AgentRole::Predicted => match &peer.prediction {
                        Some(p) if p.len() == horizon + 1 => p.clone(),
                        Some(p) => {
                            return Err(Error::Dimension(format!(
                                "prediction for agent {j} has {} states, expected {}",
                                p.len(),
                                horizon + 1
                            )))
                        }
                        None => continue,
                    },
                };
                opponents.push(positions(&traj));
            }
            let ctx = CostContext {
                map: track,
                params: agent.costs,
                opponents: &opponents,
            };
            mppi_plan(&agent.state, plan, agent.model, &ctx, params, agent_seed(seed, i))
        })();
        if let Ok(out) = &outcome {
            current[i] = Some(out.plan.clone());
        }
        results.push(Some(outcome));
    }
    results
}
