//! Brute-force TTC oracle and expert replay check.

use drive_align::geometry::{OrientedRect, Pose};
use drive_align::scenario::AgentState;
use drive_align::sim::{replay_expert, ttc, SimConfig, EGO_LENGTH, EGO_WIDTH};
use drive_align::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bundled_corpus;

/// Separating-axis overlap of two rectangles, written from scratch.
fn rect_corners(c: Vec2, h: f64, l: f64, w: f64) -> [(f64, f64); 4] {
    let (ch, sh) = (h.cos(), h.sin());
    let mut out = [(0.0, 0.0); 4];
    for (i, (a, b)) in [(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)].iter().enumerate() {
        let (lx, ly) = (a * l, b * w);
        out[i] = (c.x + lx * ch - ly * sh, c.y + lx * sh + ly * ch);
    }
    out
}

fn boxes_touch(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % 4];
            let axis = (y0 - y1, x1 - x0);
            let proj = |p: &[(f64, f64); 4]| {
                let v: Vec<f64> = p.iter().map(|q| q.0 * axis.0 + q.1 * axis.1).collect();
                (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(f64::MIN, f64::max))
            };
            let (alo, ahi) = proj(a);
            let (blo, bhi) = proj(b);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

const ORACLE_DT: f64 = 1e-3;
const ORACLE_HORIZON: f64 = 30.0;

/// Forward-integrates both bodies at 1 ms until their footprints touch.
fn brute_force_ttc(ego: &OrientedRect, ev: Vec2, agent: &AgentState) -> f64 {
    let steps = (ORACLE_HORIZON / ORACLE_DT) as usize;
    for k in 0..=steps {
        let t = k as f64 * ORACLE_DT;
        let a = rect_corners(ego.center + ev * t, ego.heading, ego.length, ego.width);
        let b = rect_corners(agent.pose.position() + agent.velocity * t, agent.pose.heading, agent.length, agent.width);
        if boxes_touch(&a, &b) {
            return t;
        }
    }
    f64::INFINITY
}

pub fn ttc_matches_brute_force_oracle_on_200_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77c);
    let mut finite = 0;
    let mut done = 0;
    while done < 200 {
        let theta: f64 = rng.gen_range(-3.1..3.1);
        let fwd = Vec2::from_angle(theta);
        let left = fwd.perp();
        let origin = Vec2::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let ev = fwd * rng.gen_range(3.0..25.0);
        let ego = OrientedRect::new(origin, theta, EGO_LENGTH, EGO_WIDTH);
        let (lon, lat, rel_heading, speed) = if done % 2 == 0 {
            // following, possibly offset or slightly angled
            (rng.gen_range(6.0..60.0), rng.gen_range(-1.5..1.5), rng.gen_range(-0.15..0.15), rng.gen_range(0.0..20.0))
        } else {
            // crossing toward the ego's path
            let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (
                rng.gen_range(8.0..45.0),
                side * rng.gen_range(4.0..25.0),
                -side * std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.3..0.3),
                rng.gen_range(3.0..15.0),
            )
        };
        let heading = theta + rel_heading;
        let agent = AgentState {
            pose: Pose::new((origin + fwd * lon + left * lat).x, (origin + fwd * lon + left * lat).y, heading),
            velocity: Vec2::from_angle(heading) * speed,
            length: rng.gen_range(3.5..6.0),
            width: rng.gen_range(1.6..2.4),
        };
        if boxes_touch(&rect_corners(ego.center, theta, ego.length, ego.width), &rect_corners(agent.pose.position(), heading, agent.length, agent.width)) {
            continue;
        }
        let analytic = ttc(&ego, ev, &[agent], EGO_WIDTH);
        let oracle = brute_force_ttc(&ego, ev, &agent);
        if oracle.is_infinite() {
            assert!(analytic >= ORACLE_HORIZON - 0.1, "case {done}: analytic {analytic}, oracle never touches");
        } else {
            finite += 1;
            assert!((analytic - oracle).abs() <= 0.1, "case {done}: analytic {analytic} oracle {oracle}");
        }
        done += 1;
    }
    assert!(finite >= 60, "only {finite} configurations with a finite TTC");
}

pub fn expert_replay_is_collision_free_on_the_bundled_corpus() {
    let corpus = bundled_corpus();
    assert!(!corpus.scenarios.is_empty());
    for scn in &corpus.scenarios {
        let log = replay_expert(scn, &SimConfig::default()).unwrap();
        assert!(log.collisions.is_empty(), "{} collides under expert replay", scn.id);
    }
}

