use brrace_core::brmppi::{agent_seed, br_mppi_cycle, AgentRole, BrAgent};
use brrace_core::config::{Config, Driver, VehicleSpec};
use brrace_core::cost::{CostContext, CostParams};
use brrace_core::dynamics::{rollout, step, BasisModel, DynamicsModel};
use brrace_core::mppi::{mppi_plan, ControlSequence, MppiParams};
use brrace_core::sim::{read_trace, run_race, EventKind};
use brrace_core::{ControlInput, Derivative, TrackMap, VehicleState};

/// Straight-line point mass: throttle is acceleration in m/s^2 * 4.
#[derive(Debug)]
struct Throttle1d;

impl DynamicsModel for Throttle1d {
    fn derivative(&self, _state: &VehicleState, control: &ControlInput) -> Derivative {
        Derivative::from_array([4.0 * control.throttle, 0.0, 0.0, 0.0])
    }
}

#[test]
fn receding_horizon_mppi_tracks_a_target_speed() {
    let params = MppiParams {
        samples: 256,
        horizon: 30,
        dt: 0.05,
        sigma: [0.01, 0.25],
        lambda: 1.0,
        gamma: 0.0,
        ..Default::default()
    };
    let target = 3.0;
    let cost = |traj: &[VehicleState]| traj.iter().skip(1).map(|s| (s.v_x - target).powi(2)).sum::<f64>();
    let mut state = VehicleState::default();
    let mut plan = ControlSequence::zeros(params.horizon);
    for i in 0..80 {
        let out = mppi_plan(&state, &plan, &Throttle1d, &cost, &params, i).unwrap();
        state = step(&Throttle1d, &state, &out.control, params.dt).unwrap();
        plan = out.next;
    }
    assert!((state.v_x - target).abs() < 0.2, "v_x = {}", state.v_x);
    assert!(state.x > 0.0);
}

fn start_state(track: &TrackMap, progress: f64, speed: f64) -> VehicleState {
    let (x, y, yaw) = track.pose_at(progress, 0.0);
    VehicleState {
        x,
        y,
        yaw,
        v_x: speed,
        ..Default::default()
    }
}

fn min_distance(traj: &[VehicleState], other: &[VehicleState]) -> f64 {
    traj.iter()
        .zip(other)
        .map(|(a, b)| (a.x - b.x).hypot(a.y - b.y))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn best_response_steers_away_from_a_stopped_car() {
    let track = TrackMap::default_oval();
    let model = BasisModel::reference();
    let params = MppiParams {
        samples: 2000,
        ..Default::default()
    };
    let ego = start_state(&track, 0.0, 5.0);
    let parked = start_state(&track, 8.0 / track.length(), 0.0);
    let prediction = vec![parked; params.horizon + 1];
    // Straight at the parked car.
    let incumbent =
        ControlSequence::new(vec![ControlInput::new(0.0, 0.6); params.horizon]).unwrap();
    let costs = CostParams::default();
    let agents = [
        BrAgent {
            role: AgentRole::Controlled,
            state: ego,
            plan: Some(incumbent.clone()),
            model: &model,
            costs: &costs,
            prediction: None,
        },
        BrAgent {
            role: AgentRole::Predicted,
            state: parked,
            plan: None,
            model: &model,
            costs: &costs,
            prediction: Some(prediction.clone()),
        },
    ];
    let out = br_mppi_cycle(&agents, &model, &track, &params, 42);
    let updated = out[0].as_ref().unwrap().as_ref().unwrap();
    assert!(out[1].is_none());

    let before = rollout(&model, &ego, incumbent.as_slice(), params.dt).unwrap();
    let after = rollout(&model, &ego, updated.plan.as_slice(), params.dt).unwrap();
    let (d0, d1) = (min_distance(&before, &prediction), min_distance(&after, &prediction));
    assert!(d0 < 1.0, "incumbent should hit the car, closest {d0}");
    assert!(d1 > d0, "closest approach {d1} did not improve on {d0}");
}

/// With the interaction weights at zero, each agent's update is its solo
/// MPPI update, bit for bit.
#[test]
fn zero_interaction_weights_reduce_to_solo_mppi() {
    let track = TrackMap::default_oval();
    let model = BasisModel::reference();
    let params = MppiParams {
        samples: 64,
        horizon: 24,
        ..Default::default()
    };
    let mut costs = CostParams::default();
    costs.w_obstacle = 0.0;
    costs.w_racing = 0.0;
    let states = [start_state(&track, 0.0, 4.0), start_state(&track, 0.5, 4.0)];
    let plans = [
        ControlSequence::new(vec![ControlInput::new(0.1, 0.4); params.horizon]).unwrap(),
        ControlSequence::new(vec![ControlInput::new(-0.2, 0.7); params.horizon]).unwrap(),
    ];
    let agents: Vec<BrAgent> = states
        .iter()
        .zip(&plans)
        .map(|(s, p)| BrAgent {
            role: AgentRole::Controlled,
            state: *s,
            plan: Some(p.clone()),
            model: &model,
            costs: &costs,
            prediction: None,
        })
        .collect();
    let seed = 99;
    let out = br_mppi_cycle(&agents, &model, &track, &params, seed);
    for (i, (s, p)) in states.iter().zip(&plans).enumerate() {
        let ctx = CostContext {
            map: &track,
            params: &costs,
            opponents: &[],
        };
        let solo = mppi_plan(s, p, &model, &ctx, &params, agent_seed(seed, i)).unwrap();
        let br = out[i].as_ref().unwrap().as_ref().unwrap();
        assert_eq!(br.plan, solo.plan, "agent {i}");
        assert_eq!(br.control, solo.control);
    }
}

/// A fast line follower overtakes a slow one in the other lane; every pass
/// is logged from both sides at the same step.
#[test]
fn pass_events_are_mirrored() {
    let mut cfg = Config::default();
    cfg.race.duration = 30.0;
    cfg.race.vehicles = vec![
        VehicleSpec {
            id: 0,
            driver: Driver::LineFollower { speed: 7.0, lateral: 0.9 },
            start_progress: 0.0,
            start_lateral: 0.9,
            start_speed: 7.0,
        },
        VehicleSpec {
            id: 1,
            driver: Driver::LineFollower { speed: 3.0, lateral: -0.9 },
            start_progress: 0.05,
            start_lateral: -0.9,
            start_speed: 3.0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = run_race(&cfg, None, Some(&trace)).unwrap();
    assert_eq!(out.collisions, 0);
    let events: Vec<_> = read_trace(&trace).unwrap().into_iter().flat_map(|r| r.events).collect();
    let gained: Vec<_> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::GainedLead { vehicle, other } => Some((e.step, e.t, vehicle, other)),
            _ => None,
        })
        .collect();
    let lost: Vec<_> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::LostLead { vehicle, other } => Some((e.step, e.t, other, vehicle)),
            _ => None,
        })
        .collect();
    assert!(gained.iter().any(|g| g.2 == 0), "the fast car never passed: {gained:?}");
    assert_eq!(gained, lost);
    let fast = out.vehicle(0).unwrap();
    let slow = out.vehicle(1).unwrap();
    assert_eq!(fast.gained_lead, slow.lost_lead);
    assert_eq!(fast.lost_lead, slow.gained_lead);
}
