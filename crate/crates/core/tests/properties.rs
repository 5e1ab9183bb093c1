use proptest::prelude::*;

use brrace_core::config::{Config, Driver, VehicleSpec};
use brrace_core::cost::{obstacle_cost, passing_cost, track_cost, ObstacleCostParams, RacingCostParams};
use brrace_core::dynamics::{basis_predict, BasisModel, BASIS_COUNT};
use brrace_core::game::{br_dynamics, br_step, is_nash, MatrixGame, UpdateMode};
use brrace_core::mppi::{compute_weights, sg_smooth, update_controls, ControlSequence, MppiParams, Perturbations};
use brrace_core::sim::{run_race, EventKind};
use brrace_core::v2v::{downsample, Inbox, PoseMessage};
use brrace_core::{ControlInput, TrackMap, VehicleState};

fn costs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 1..512)
}

fn state() -> impl Strategy<Value = VehicleState> {
    (-1.0f64..10.0, -2.0f64..2.0, -2.0f64..2.0, -0.3f64..0.3).prop_map(|(v_x, v_y, yaw_rate, roll)| VehicleState {
        v_x,
        v_y,
        yaw_rate,
        roll,
        ..Default::default()
    })
}

fn control() -> impl Strategy<Value = ControlInput> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(s, t)| ControlInput::new(s, t))
}

fn theta() -> impl Strategy<Value = [[f64; 4]; BASIS_COUNT]> {
    prop::array::uniform25(prop::array::uniform4(-5.0f64..5.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_are_normalised(c in costs(), lambda in 1e-3f64..1e3) {
        let w = compute_weights(&c, lambda).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Costs on a 1/1024 grid shifted by an integer stay exactly representable,
    /// so the min-subtraction cancels the shift bit for bit.
    #[test]
    fn weights_ignore_representable_shifts(
        grid in prop::collection::vec(-1_000_000i64..1_000_000, 1..512),
        shift in -1_000_000i64..1_000_000,
        lambda in 1e-3f64..1e3,
    ) {
        let c: Vec<f64> = grid.iter().map(|&g| g as f64 / 1024.0).collect();
        let shifted: Vec<f64> = c.iter().map(|v| v + shift as f64).collect();
        prop_assert_eq!(compute_weights(&c, lambda).unwrap(), compute_weights(&shifted, lambda).unwrap());
    }

    #[test]
    fn tiny_temperature_picks_the_argmin(mut c in costs(), pick in any::<prop::sample::Index>()) {
        // Separate the chosen minimum from everything else by at least 1e-3.
        let i = pick.index(c.len());
        let floor = c.iter().cloned().fold(f64::INFINITY, f64::min);
        c[i] = floor - 1e-3;
        let w = compute_weights(&c, 1e-6).unwrap();
        prop_assert!(w[i] > 1.0 - 1e-6, "w = {}", w[i]);
    }

    #[test]
    fn obstacle_cost_never_increases_with_distance(
        a in 0.0f64..5.0,
        b in 0.0f64..5.0,
        r1 in 0.1f64..2.0,
        gap in 0.1f64..2.0,
    ) {
        let p = ObstacleCostParams { r1, r2: r1 + gap, ..Default::default() };
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(obstacle_cost(near, &p) >= obstacle_cost(far, &p));
        prop_assert_eq!(obstacle_cost(p.r2, &p), 0.0);
        prop_assert_eq!(obstacle_cost(p.r1 * 0.5, &p), p.beta);
    }

    #[test]
    fn track_cost_is_bounded(x in -60.0f64..60.0, y in -40.0f64..40.0) {
        let map = TrackMap::default_oval();
        let c = track_cost(&map, x, y);
        prop_assert!((0.0..=1.0).contains(&c));
    }

    /// A monotone sweep of the opponent from ahead to behind pays the pass
    /// reward exactly once, whatever the sampling.
    #[test]
    fn one_pass_reward_per_monotone_crossing(
        mut rel in prop::collection::vec(-10.0f64..10.0, 2..80),
        start in 0.1f64..5.0,
        end in 0.1f64..5.0,
    ) {
        rel.push(start);
        rel.push(-end);
        rel.sort_by(|a, b| b.total_cmp(a));
        let p = RacingCostParams::default();
        let mut sign = 0i8;
        let mut rewards = 0;
        for (t, &r) in rel.iter().enumerate() {
            let (c, next) = passing_cost(sign, r, false, &p);
            if t > 0 && c != 0.0 {
                prop_assert_eq!(c, p.pass_reward);
                rewards += 1;
            }
            sign = next;
        }
        prop_assert_eq!(rewards, 1);
    }

    #[test]
    fn updated_controls_stay_within_limits(
        plan in prop::collection::vec(control(), 9..24),
        raw in prop::collection::vec(-1.0f64..1.0, 1..12),
        scale in 0.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let t = plan.len();
        let k = raw.len();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let rows: Vec<Vec<[f64; 2]>> = (0..k)
            .map(|_| (0..t).map(|_| [scale * rand::Rng::gen_range(&mut rng, -1.0..1.0), scale * rand::Rng::gen_range(&mut rng, -1.0..1.0)]).collect())
            .collect();
        let noise = Perturbations::from_rows(rows).unwrap();
        let weights = compute_weights(&raw, 1.0).unwrap();
        let params = MppiParams { horizon: t, samples: k, ..Default::default() };
        let out = update_controls(&ControlSequence::new(plan).unwrap(), &weights, &noise, &params).unwrap();
        prop_assert_eq!(out.len(), t);
        for u in out.as_slice() {
            prop_assert!((-1.0..=1.0).contains(&u.steering) && (-1.0..=1.0).contains(&u.throttle));
        }
    }

    #[test]
    fn cubic_sequences_survive_smoothing(c in prop::array::uniform4(-3.0f64..3.0), n in 9usize..60) {
        let xs: Vec<f64> = (0..n).map(|i| {
            let x = i as f64 * 0.1;
            c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x
        }).collect();
        let out = sg_smooth(&xs, 9, 3).unwrap();
        for i in 4..n - 4 {
            prop_assert!((out[i] - xs[i]).abs() < 1e-8, "i {i}: {} vs {}", out[i], xs[i]);
        }
    }

    #[test]
    fn basis_prediction_is_linear_in_theta(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        t1 in theta(),
        t2 in theta(),
        s in state(),
        u in control(),
    ) {
        let mut mix = [[0.0; 4]; BASIS_COUNT];
        for i in 0..BASIS_COUNT {
            for j in 0..4 {
                mix[i][j] = a * t1[i][j] + b * t2[i][j];
            }
        }
        let p = |th| basis_predict(&BasisModel::from_theta(th), &s, &u).unwrap().as_array();
        let (pm, p1, p2) = (p(mix), p(t1), p(t2));
        for j in 0..4 {
            let want = a * p1[j] + b * p2[j];
            let tol = 1e-12 * (1.0 + want.abs().max(a.abs() * p1[j].abs() + b.abs() * p2[j].abs()));
            prop_assert!((pm[j] - want).abs() <= tol, "channel {j}: {} vs {want}", pm[j]);
        }
    }

    /// The inbox only keeps the newest pose per peer, so delivery order does
    /// not matter.
    #[test]
    fn inbox_ignores_delivery_order(
        seqs in prop::collection::vec((0u8..4, 1u32..1000), 1..40),
        order in any::<u64>(),
    ) {
        let msgs: Vec<PoseMessage> = seqs
            .iter()
            .map(|&(id, seq)| PoseMessage::from_state(id, seq, seq as f64 * 0.1, &VehicleState { x: seq as f64, ..Default::default() }))
            .collect();
        let mut shuffled = msgs.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(order);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let (mut a, mut b) = (Inbox::new(), Inbox::new());
        msgs.iter().for_each(|m| a.deliver(*m));
        shuffled.iter().for_each(|m| b.deliver(*m));
        for id in 0..4u8 {
            let want = msgs.iter().filter(|m| m.vehicle_id == id).map(|m| m.seq).max();
            let got_a = a.receive_latest(id, 0.0).ok().map(|(m, _)| m.seq);
            let got_b = b.receive_latest(id, 0.0).ok().map(|(m, _)| m.seq);
            prop_assert_eq!(got_a, want);
            prop_assert_eq!(got_b, want);
        }
    }

    #[test]
    fn codec_round_trips_any_message(
        id in any::<u8>(),
        seq in any::<u32>(),
        fields in prop::array::uniform8(any::<f64>().prop_filter("finite", |v| v.is_finite())),
    ) {
        let m = PoseMessage {
            vehicle_id: id,
            seq,
            t_sent: fields[0],
            x: fields[1],
            y: fields[2],
            yaw: fields[3],
            roll: fields[4],
            v_x: fields[5],
            v_y: fields[6],
            yaw_rate: fields[7],
        };
        let back = PoseMessage::decode(&m.encode()).unwrap();
        prop_assert_eq!(back.encode(), m.encode());
    }

    #[test]
    fn downsampled_rate_never_exceeds_target(seconds in 1usize..30, start in 0.0f64..100.0) {
        let stream: Vec<(f64, VehicleState)> = (0..seconds * 200)
            .map(|i| (start + i as f64 / 200.0, VehicleState::default()))
            .collect();
        let out = downsample(&stream, 1, 10.0).unwrap();
        prop_assert_eq!(out.len(), seconds * 10);
        prop_assert!(out.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    }
}

fn game(rows: usize, cols: usize, values: &[u8]) -> MatrixGame {
    let n = rows * cols;
    let j1 = (0..rows).map(|r| (0..cols).map(|c| values[r * cols + c] as f64).collect()).collect();
    let j2 = (0..rows).map(|r| (0..cols).map(|c| values[n + r * cols + c] as f64).collect()).collect();
    MatrixGame::new(j1, j2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Pure Nash equilibria are exactly the fixed points of the best-response
    /// map, under both update orders.
    #[test]
    fn nash_iff_fixed_point(
        (rows, cols, values) in (1usize..=6, 1usize..=6)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(0u8..4, 2 * r * c))),
    ) {
        let g = game(rows, cols, &values);
        for r in 0..rows {
            for c in 0..cols {
                let nash = is_nash(&g, (r, c)).unwrap();
                for mode in [UpdateMode::Simultaneous, UpdateMode::Alternating] {
                    prop_assert_eq!(nash, br_step(&g, (r, c), mode).unwrap() == (r, c));
                    let converged_at_start = br_dynamics(&g, (r, c), 1, mode).unwrap().profiles.len() == 1
                        && br_step(&g, (r, c), mode).unwrap() == (r, c);
                    prop_assert_eq!(nash, converged_at_start);
                }
            }
        }
    }
}

/// Vehicles only ever cover a lap by driving it: completed laps times the
/// centerline length never exceed the integrated path, within 1%.
#[test]
fn laps_are_backed_by_distance() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(6));
    runner
        .run(&(3.0f64..9.0, 0.0f64..1.0, 0.0f64..1.0), |(speed, p0, p1)| {
            let mut cfg = Config::default();
            cfg.race.duration = 40.0;
            cfg.race.vehicles = [(0u8, p0), (1u8, p1)]
                .iter()
                .map(|&(id, start)| VehicleSpec {
                    id,
                    driver: Driver::LineFollower { speed, lateral: 0.0 },
                    start_progress: start,
                    start_lateral: 0.0,
                    start_speed: speed,
                })
                .collect();
            let out = run_race(&cfg, None, None).unwrap();
            let length = cfg.build_track().unwrap().length();
            for v in &out.vehicles {
                prop_assert!(v.laps >= 1, "{speed} m/s for 40 s should complete a lap");
                prop_assert!(
                    v.laps as f64 * length <= v.distance * 1.01,
                    "vehicle {}: {} laps, {} m driven",
                    v.id,
                    v.laps,
                    v.distance
                );
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn lap_events_match_outcome() {
    let mut cfg = Config::default();
    cfg.race.duration = 30.0;
    cfg.race.vehicles = vec![VehicleSpec {
        id: 4,
        driver: Driver::LineFollower { speed: 8.0, lateral: 0.0 },
        start_progress: 0.0,
        start_lateral: 0.0,
        start_speed: 8.0,
    }];
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = run_race(&cfg, None, Some(&trace)).unwrap();
    let rows = brrace_core::sim::read_trace(&trace).unwrap();
    let laps = rows
        .iter()
        .flat_map(|r| &r.events)
        .filter(|e| matches!(e.kind, EventKind::Lap { vehicle: 4, .. }))
        .count();
    assert_eq!(laps as i64, out.vehicles[0].laps);
    assert!(laps >= 1);
}
