//! Predicate-by-predicate re-implementation of the kinematic classifier.

use std::time::Instant;

use drive_align::kinematics::{classify_direction, classify_speed, DirectionClassCoarse, SpeedClass, Trajectory};
use drive_align::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 15;
const H: f64 = 0.1;

fn smooth(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..x.len() {
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for j in 0..x.len() {
            if (j as i64 - i as i64).abs() <= 2 {
                sum += x[j];
                cnt += 1.0;
            }
        }
        out.push(sum / cnt);
    }
    out
}

fn longest(x: &[f64], pred: impl Fn(f64) -> bool) -> usize {
    let (mut best, mut run) = (0, 0);
    for &v in x {
        run = if pred(v) { run + 1 } else { 0 };
        if run > best {
            best = run;
        }
    }
    best
}

fn oracle_speed(p: &[(f64, f64)]) -> SpeedClass {
    let p = &p[..N];
    let mut v = Vec::new();
    for i in 1..N {
        v.push(((p[i].0 - p[i - 1].0).powi(2) + (p[i].1 - p[i - 1].1).powi(2)).sqrt() / H);
    }
    let mut a = Vec::new();
    for i in 1..v.len() {
        a.push((v[i] - v[i - 1]) / H);
    }
    let v = smooth(&v);
    let a = smooth(&a);
    let rms = (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
    let amax = a.iter().cloned().fold(f64::MIN, f64::max);
    let amin = a.iter().cloned().fold(f64::MAX, f64::min);
    if a[0] > 0.0 && longest(&a, |x| x > 0.3) >= 8 && amax > 0.6 && rms > 0.4 {
        return SpeedClass::Accelerate;
    }
    if a[0] < 0.0 && longest(&a, |x| x < -0.3) >= 8 && amin < -0.6 && rms > 0.4 {
        return SpeedClass::Decelerate;
    }
    let vbar = v.iter().sum::<f64>() / v.len() as f64;
    if vbar < 0.5 {
        return SpeedClass::Stop;
    }
    let s = match vbar {
        x if x > 25.0 => 2.5,
        x if x > 20.0 => 2.0,
        x if x > 10.0 => 1.5,
        x if x > 5.0 => 1.25,
        _ => 1.0,
    };
    let abar = a.iter().sum::<f64>() / a.len() as f64;
    let aabs = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if abar.abs() < 0.3 * s && aabs < 0.6 * s {
        SpeedClass::KeepSpeed
    } else {
        SpeedClass::Unknown
    }
}

fn oracle_direction(p: &[(f64, f64)]) -> DirectionClassCoarse {
    let p = &p[..N];
    let mut heading = Vec::new();
    let mut last = 0.0;
    let mut vsum = 0.0;
    for i in 1..N {
        let (dx, dy) = (p[i].0 - p[i - 1].0, p[i].1 - p[i - 1].1);
        let len = (dx * dx + dy * dy).sqrt();
        vsum += len / H;
        if len >= 1e-6 {
            last = dy.atan2(dx);
        }
        heading.push(last);
    }
    let vbar = vsum / (N - 1) as f64;
    let h0 = heading[0];
    let dpsi = heading
        .iter()
        .map(|h| {
            let mut d = h - h0;
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            d.abs()
        })
        .fold(0.0, f64::max);
    let (c, s) = (h0.cos(), h0.sin());
    let lat: Vec<f64> = p.iter().map(|q| -(q.0 - p[0].0) * s + (q.1 - p[0].1) * c).collect();
    let ymax = lat.iter().cloned().fold(f64::MIN, f64::max);
    let ymin = lat.iter().cloned().fold(f64::MAX, f64::min);
    let sy = match vbar {
        x if x > 15.0 => 3.0,
        x if x > 10.0 => 2.4,
        x if x > 5.0 => 1.5,
        x if x > 3.0 => 0.9,
        _ => 0.45,
    };
    let sp = std::f64::consts::PI / 36.0;
    if dpsi > sp && ymax > sy {
        DirectionClassCoarse::Left
    } else if dpsi > sp && ymin < -sy {
        DirectionClassCoarse::Right
    } else {
        DirectionClassCoarse::Straight
    }
}

/// Speed and yaw-rate profiles that land in every class with useful frequency.
fn random_trajectory(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let family = rng.gen_range(0..6);
    let v0: f64 = match family {
        0 => 0.0,
        1 => rng.gen_range(0.0..1.0),
        _ => rng.gen_range(0.0..32.0),
    };
    let accel: f64 = match family {
        2 => rng.gen_range(-0.2..0.2),
        3 => rng.gen_range(0.5..3.0),
        4 => rng.gen_range(-4.0..-0.5),
        _ => rng.gen_range(-2.0..2.0),
    };
    let jitter: f64 = if rng.gen_bool(0.3) { rng.gen_range(0.0..0.05) } else { 0.0 };
    let yaw_rate: f64 = if rng.gen_bool(0.5) { rng.gen_range(-0.8..0.8) } else { 0.0 };
    let lateral_drift: f64 = if rng.gen_bool(0.3) { rng.gen_range(-4.0..4.0) } else { 0.0 };
    let h0: f64 = rng.gen_range(-3.1..3.1);
    let (mut x, mut y, mut psi, mut v) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), h0, v0);
    let mut out = vec![(x, y)];
    for i in 1..N {
        v = (v + accel * H).max(0.0);
        psi += yaw_rate * H;
        let u = i as f64 / (N - 1) as f64;
        let side = lateral_drift * (2.0 * u - 1.0) / (N - 1) as f64;
        x += v * H * psi.cos() - side * h0.sin() + rng.gen_range(-jitter..=jitter);
        y += v * H * psi.sin() + side * h0.cos() + rng.gen_range(-jitter..=jitter);
        out.push((x, y));
    }
    out
}

pub fn classifier_matches_predicate_oracle_on_500_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b_6d_66);
    let cases: Vec<Vec<(f64, f64)>> = (0..500).map(|_| random_trajectory(&mut rng)).collect();
    let start = Instant::now();
    let mut seen_speed = std::collections::BTreeSet::new();
    let mut seen_dir = std::collections::BTreeSet::new();
    for (i, p) in cases.iter().enumerate() {
        let traj = Trajectory::from_points(p.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).unwrap();
        let speed = classify_speed(&traj).unwrap();
        let dir = classify_direction(&traj).unwrap();
        assert_eq!(speed, oracle_speed(p), "speed class of case {i}: {p:?}");
        assert_eq!(dir, oracle_direction(p), "direction class of case {i}: {p:?}");
        seen_speed.insert(speed);
        seen_dir.insert(dir);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
    assert_eq!(seen_speed.len(), 5, "speed classes exercised: {seen_speed:?}");
    assert_eq!(seen_dir.len(), 3, "direction classes exercised: {seen_dir:?}");
}
