//! Finite-difference, stop-gradient and gate-annihilation checks.

use drive_align::decision::consistency;
use drive_align::kinematics::{kinematic_map, DirectionClassCoarse, SpeedClass, Trajectory, DT};
use drive_align::losses::{
    decision_nll, efficiency_penalty, high_level_loss, imitation_loss, low_level_loss, safety_penalty,
    stage2_loss, stage3_loss, LogitGrad, LossValue, PenaltyGates,
};
use drive_align::pipeline::{run_stage2, Checkpoint, StageConfig};
use drive_align::policy::{DecisionPolicy, DecisionProbs, SceneFeatures, TrainingSample, PLAN_POINTS};
use drive_align::{Decision, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const ABS_TOL: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_TOL || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
    let v: f64 = rng.gen_range(0.0..25.0);
    let a: f64 = rng.gen_range(-3.0..3.0);
    let curv: f64 = rng.gen_range(-0.3..0.3);
    (0..n)
        .map(|i| {
            let t = i as f64 * DT;
            Vec2::new(v * t + 0.5 * a * t * t, 0.5 * curv * v * t * t)
                + Vec2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))
        })
        .collect()
}

/// Noise-free kinematic profile; these usually classify to a known class.
fn smooth_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
    let v: f64 = rng.gen_range(0.0..25.0);
    let a: f64 = rng.gen_range(-3.0..3.0);
    let curv: f64 = if rng.gen_bool(0.5) { rng.gen_range(-0.3..0.3) } else { 0.0 };
    (0..n)
        .map(|i| {
            let t = i as f64 * DT;
            let s = (v * t + 0.5 * a * t * t).max(0.0);
            Vec2::new(s, 0.5 * curv * s * s / v.max(1.0))
        })
        .collect()
}

fn traj(points: Vec<Vec2>) -> Trajectory {
    Trajectory::from_points(points).unwrap()
}

fn random_gates(rng: &mut ChaCha8Rng, terms: usize) -> PenaltyGates {
    PenaltyGates::new(
        (0..terms).map(|_| rng.gen_bool(0.5)).collect(),
        (0..terms).map(|_| rng.gen_bool(0.5)).collect(),
        3.0,
        5.0,
    )
    .unwrap()
}

/// Probabilities from raw logits through the policy's own softmax: with all
/// features zero the only active basis entry is the bias.
fn probs_from_logits(speed: [f64; 4], direction: [f64; 3], temperature: f64) -> DecisionProbs {
    let mut policy = DecisionPolicy { temperature, ..Default::default() };
    for k in 0..4 {
        policy.speed_weights[k][0] = speed[k];
    }
    for k in 0..3 {
        policy.direction_weights[k][0] = direction[k];
    }
    let f = SceneFeatures {
        ego_speed: 0.0,
        lead_gap: 0.0,
        lead_closing_speed: 0.0,
        left_lane_free: false,
        right_lane_free: false,
        navigation_command: DirectionClassCoarse::Straight,
        speed_limit: 0.0,
    };
    policy.probs(&f).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng) -> ([f64; 4], [f64; 3], f64) {
    (
        std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
        std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
        rng.gen_range(0.5..2.0),
    )
}

fn random_decision(rng: &mut ChaCha8Rng) -> Decision {
    Decision::coarse(
        SpeedClass::KNOWN[rng.gen_range(0..4)],
        DirectionClassCoarse::ALL[rng.gen_range(0..3)],
    )
    .unwrap()
}

/// Checks the point gradient of `loss` by perturbing each coordinate of each
/// point in turn.
fn check_point_grad(points: &[Vec2], grad: &[Vec2], mut loss: impl FnMut(&[Vec2], usize) -> f64, what: &str) {
    assert_eq!(grad.len(), points.len(), "{what}: gradient length");
    for i in 0..points.len() {
        for axis in 0..2 {
            let mut plus = points.to_vec();
            let mut minus = points.to_vec();
            if axis == 0 {
                plus[i].x += STEP;
                minus[i].x -= STEP;
            } else {
                plus[i].y += STEP;
                minus[i].y -= STEP;
            }
            let numeric = (loss(&plus, i) - loss(&minus, i)) / (2.0 * STEP);
            let analytic = if axis == 0 { grad[i].x } else { grad[i].y };
            assert!(close(analytic, numeric), "{what}: point {i} axis {axis}: analytic {analytic} numeric {numeric}");
        }
    }
}

fn check_logit_grad(
    speed: [f64; 4],
    direction: [f64; 3],
    grad: &LogitGrad,
    mut loss: impl FnMut([f64; 4], [f64; 3]) -> f64,
    what: &str,
) {
    for k in 0..7 {
        let (mut sp, mut sm, mut dp, mut dm) = (speed, speed, direction, direction);
        if k < 4 {
            sp[k] += STEP;
            sm[k] -= STEP;
        } else {
            dp[k - 4] += STEP;
            dm[k - 4] -= STEP;
        }
        let numeric = (loss(sp, dp) - loss(sm, dm)) / (2.0 * STEP);
        let analytic = if k < 4 { grad.speed[k] } else { grad.direction[k - 4] };
        assert!(close(analytic, numeric), "{what}: logit {k}: analytic {analytic} numeric {numeric}");
    }
}

/// Gates restricted to the terms in which point `i` is the free operand:
/// safety term `i-1` (free later point) and efficiency term `i` (free earlier
/// point). Differencing these isolates the non-stop-gradient dependence.
fn free_operand_gates(g: &PenaltyGates, i: usize) -> PenaltyGates {
    let n = g.safety.len();
    let safety = (0..n).map(|t| g.safety[t] && t + 1 == i).collect();
    let efficiency = (0..n).map(|t| g.efficiency[t] && t == i).collect();
    PenaltyGates::new(safety, efficiency, g.ttc_threshold, g.speed_threshold).unwrap()
}

pub fn imitation_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(15..=PLAN_POINTS);
        let expert = traj(random_points(&mut rng, n));
        let planned = random_points(&mut rng, n);
        let l = imitation_loss(&traj(planned.clone()), &expert).unwrap();
        check_point_grad(&planned, &l.point_grad, |p, _| {
            let planned = Trajectory::new(p.to_vec(), DT, expert.t0_speed()).unwrap();
            imitation_loss(&planned, &expert).unwrap().value
        }, "imitation_loss");
    }
}

pub fn decision_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let (s, d, temp) = random_logits(&mut rng);
        let label = random_decision(&mut rng);
        let l = decision_nll(&probs_from_logits(s, d, temp), &label);
        assert!(!l.clamped);
        check_logit_grad(s, d, &l.logit_grad.unwrap(), |s, d| {
            decision_nll(&probs_from_logits(s, d, temp), &label).value
        }, "decision_nll");
    }
}

pub fn safety_penalty_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=PLAN_POINTS);
        let points = random_points(&mut rng, n);
        let gates = random_gates(&mut rng, n - 1);
        let l = safety_penalty(&traj(points.clone()), &gates).unwrap();
        check_point_grad(&points, &l.point_grad, |p, i| {
            let t = Trajectory::new(p.to_vec(), DT, 1.0).unwrap();
            safety_penalty(&t, &free_operand_gates(&gates, i)).unwrap().value
        }, "safety_penalty");
    }
}

pub fn efficiency_penalty_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=PLAN_POINTS);
        let points = random_points(&mut rng, n);
        let gates = random_gates(&mut rng, n - 1);
        let l = efficiency_penalty(&traj(points.clone()), &gates).unwrap();
        check_point_grad(&points, &l.point_grad, |p, i| {
            let t = Trajectory::new(p.to_vec(), DT, 1.0).unwrap();
            efficiency_penalty(&t, &free_operand_gates(&gates, i)).unwrap().value
        }, "efficiency_penalty");
    }
}

pub fn stage2_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < INSTANCES {
        let points = random_points(&mut rng, PLAN_POINTS);
        let planned = traj(points.clone());
        let expert = traj(random_points(&mut rng, PLAN_POINTS));
        let d = random_decision(&mut rng);
        let record = consistency(&planned, &d).unwrap();
        if record.consistent || record.excluded {
            continue;
        }
        let (s, dl, temp) = random_logits(&mut rng);
        let label = random_decision(&mut rng);
        let gamma = rng.gen_range(0.0..2.0);
        let eval = |p: &[Vec2], s: [f64; 4], dl: [f64; 3]| -> LossValue {
            let t = Trajectory::new(p.to_vec(), DT, planned.t0_speed()).unwrap();
            let e2e = imitation_loss(&t, &expert).unwrap();
            let vlm = decision_nll(&probs_from_logits(s, dl, temp), &label);
            let (l, r) = stage2_loss(&t, &d, &e2e, &vlm, gamma).unwrap();
            assert!(!r.consistent && !r.excluded, "finite-difference step flipped the gate");
            l
        };
        let l = eval(&points, s, dl);
        check_point_grad(&points, &l.point_grad, |p, _| eval(p, s, dl).value, "stage2_loss points");
        check_logit_grad(s, dl, &l.logit_grad.unwrap(), |s2, d2| eval(&points, s2, d2).value, "stage2_loss logits");
        checked += 1;
    }
}

pub fn stage3_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < INSTANCES {
        let refined = traj(smooth_points(&mut rng, PLAN_POINTS));
        let (speed, dir) = kinematic_map(&refined).unwrap();
        if speed == SpeedClass::Unknown {
            continue;
        }
        let target = Decision::coarse(speed, dir).unwrap();
        let sampled = loop {
            let d = random_decision(&mut rng);
            if d != target {
                break d;
            }
        };
        let points = random_points(&mut rng, PLAN_POINTS);
        let gates = random_gates(&mut rng, PLAN_POINTS - 1);
        let (s, dl, temp) = random_logits(&mut rng);
        let beta = rng.gen_range(0.0..2.0);
        let eval = |p: &[Vec2], g: &PenaltyGates, s: [f64; 4], dl: [f64; 3]| -> LossValue {
            let high = high_level_loss(&probs_from_logits(s, dl, temp), &sampled, &refined).unwrap();
            let low = low_level_loss(&Trajectory::new(p.to_vec(), DT, 1.0).unwrap(), g).unwrap();
            stage3_loss(&high, &low, beta).unwrap()
        };
        let l = eval(&points, &gates, s, dl);
        // The floored log is flat in the logits; its gradient is the
        // unclamped softmax gradient, which differencing cannot see.
        if l.clamped {
            continue;
        }
        assert!(l.value > 0.0);
        check_point_grad(&points, &l.point_grad, |p, i| eval(p, &free_operand_gates(&gates, i), s, dl).value, "stage3_loss points");
        check_logit_grad(s, dl, &l.logit_grad.unwrap(), |s2, d2| eval(&points, &gates, s2, d2).value, "stage3_loss logits");
        checked += 1;
    }
}

pub fn stop_gradient_operands_receive_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=PLAN_POINTS);
        let t = traj(random_points(&mut rng, n));
        let terms = n - 1;
        for k in 0..terms {
            let only = |safety: bool| {
                let flags: Vec<bool> = (0..terms).map(|j| j == k).collect();
                let none = vec![false; terms];
                if safety {
                    PenaltyGates::new(flags, none, 3.0, 5.0).unwrap()
                } else {
                    PenaltyGates::new(none, flags, 3.0, 5.0).unwrap()
                }
            };
            // safety term k wraps point k in sg; efficiency term k wraps point k+1
            let s = safety_penalty(&t, &only(true)).unwrap();
            assert_eq!(s.point_grad[k].x.to_bits(), 0.0f64.to_bits());
            assert_eq!(s.point_grad[k].y.to_bits(), 0.0f64.to_bits());
            let e = efficiency_penalty(&t, &only(false)).unwrap();
            assert_eq!(e.point_grad[k + 1].x.to_bits(), 0.0f64.to_bits());
            assert_eq!(e.point_grad[k + 1].y.to_bits(), 0.0f64.to_bits());
            for (i, g) in s.point_grad.iter().enumerate().filter(|(i, _)| *i != k + 1) {
                assert_eq!((g.x, g.y), (0.0, 0.0), "safety term {k} leaked into point {i}");
            }
            for (i, g) in e.point_grad.iter().enumerate().filter(|(i, _)| *i != k) {
                assert_eq!((g.x, g.y), (0.0, 0.0), "efficiency term {k} leaked into point {i}");
            }
        }
        let all = PenaltyGates::new(vec![true; terms], vec![true; terms], 3.0, 5.0).unwrap();
        let s = safety_penalty(&t, &all).unwrap();
        assert_eq!((s.point_grad[0].x, s.point_grad[0].y), (0.0, 0.0));
        let e = efficiency_penalty(&t, &all).unwrap();
        assert_eq!((e.point_grad[n - 1].x, e.point_grad[n - 1].y), (0.0, 0.0));
    }
}

pub fn stage2_gate_annihilates_consistent_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut consistent = 0;
    for _ in 0..400 {
        let planned = traj(smooth_points(&mut rng, PLAN_POINTS));
        let (speed, dir) = kinematic_map(&planned).unwrap();
        if speed == SpeedClass::Unknown {
            continue;
        }
        let d = Decision::coarse(speed, dir).unwrap();
        let expert = traj(random_points(&mut rng, PLAN_POINTS));
        let (s, dl, temp) = random_logits(&mut rng);
        let e2e = imitation_loss(&planned, &expert).unwrap();
        let vlm = decision_nll(&probs_from_logits(s, dl, temp), &random_decision(&mut rng));
        let (l, r) = stage2_loss(&planned, &d, &e2e, &vlm, rng.gen_range(0.0..3.0)).unwrap();
        assert!(r.consistent);
        assert_eq!(l.value.to_bits(), 0.0f64.to_bits());
        assert!(l.point_grad.iter().all(|g| g.x == 0.0 && g.y == 0.0));
        let g = l.logit_grad.unwrap();
        assert!(g.speed.iter().chain(&g.direction).all(|x| *x == 0.0));
        consistent += 1;
    }
    assert!(consistent >= 100, "only {consistent} consistent samples drawn");
}

pub fn run_stage2_is_a_no_op_on_fully_consistent_data() {
    // Zero residuals plan constant velocity (KeepSpeed, Straight) and the
    // policy's bias makes that its argmax everywhere.
    let mut ckpt = Checkpoint::initial();
    ckpt.stage = 1;
    ckpt.policy.speed_weights[SpeedClass::KeepSpeed.index().unwrap()][0] = 5.0;
    ckpt.policy.direction_weights[DirectionClassCoarse::Straight.index()][0] = 5.0;
    for (row, k) in ckpt.policy.speed_weights.iter_mut().zip(0..) {
        row[1] = 0.01 * k as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dataset: Vec<TrainingSample> = (0..60)
        .map(|_| {
            let f = SceneFeatures {
                ego_speed: rng.gen_range(1.0..25.0),
                lead_gap: if rng.gen_bool(0.5) { f64::INFINITY } else { rng.gen_range(5.0..80.0) },
                lead_closing_speed: rng.gen_range(-3.0..3.0),
                left_lane_free: rng.gen_bool(0.5),
                right_lane_free: rng.gen_bool(0.5),
                navigation_command: DirectionClassCoarse::ALL[rng.gen_range(0..3)],
                speed_limit: rng.gen_range(10.0..30.0),
            };
            let expert = traj(random_points(&mut rng, PLAN_POINTS));
            TrainingSample { features: f, expert }
        })
        .collect();
    let cfg = StageConfig::default();
    let (out, reports) = run_stage2(&ckpt, &dataset, &cfg).unwrap();
    assert_eq!(out.stage, 2);
    assert_eq!(out.policy, ckpt.policy);
    assert_eq!(out.planner, ckpt.planner);
    let bits = |c: &Checkpoint| -> Vec<u64> {
        c.policy
            .speed_weights
            .iter()
            .chain(c.policy.direction_weights.iter())
            .flatten()
            .chain(c.planner.bank.iter().flatten())
            .map(|x| x.to_bits())
            .collect()
    };
    assert_eq!(bits(&out), bits(&ckpt));
    assert!(!reports.is_empty());
}
