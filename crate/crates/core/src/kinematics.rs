//! Trajectories and the kinematic mapping from a planned or recorded
//! trajectory to a (speed, direction) meta-action.
//!
//! Classification looks only at the first 1.5 s (15 points at 0.1 s). Speeds
//! and accelerations come from first differences and are smoothed with a
//! centered 5-tap average truncated at the boundaries. Units are m, m/s and
//! m/s^2 throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};

/// Fixed sampling step of every trajectory in the crate.
pub const DT: f64 = 0.1;
/// Number of points inspected by the classifiers (t = 0..14).
pub const CLASSIFY_POINTS: usize = 15;
pub const SMOOTHING_WINDOW: usize = 5;
/// Yaw threshold for a turn-like direction label.
pub const YAW_THRESHOLD: f64 = std::f64::consts::PI / 36.0;

const DEGENERATE_SEGMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<Vec2>,
    dt: f64,
    t0_speed: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>, dt: f64, t0_speed: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("trajectory dt must be positive, got {dt}")));
        }
        if !t0_speed.is_finite() {
            return Err(Error::invalid("trajectory initial speed is not finite"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("trajectory point {i} is not finite")));
        }
        Ok(Trajectory {
            points,
            dt,
            t0_speed,
        })
    }

    /// Builds a trajectory at the standard 0.1 s step, taking the initial
    /// speed from the first segment.
    pub fn from_points(points: Vec<Vec2>) -> Result<Self> {
        let t0 = match points.as_slice() {
            [a, b, ..] => (*b - *a).norm() / DT,
            _ => 0.0,
        };
        Self::new(points, DT, t0)
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0_speed(&self) -> f64 {
        self.t0_speed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.dt
    }

    /// Leading sub-trajectory with `n` points.
    pub fn prefix(&self, n: usize) -> Result<Trajectory> {
        if n > self.points.len() {
            return Err(Error::invalid(format!(
                "prefix of {n} points requested from a {}-point trajectory",
                self.points.len()
            )));
        }
        Trajectory::new(self.points[..n].to_vec(), self.dt, self.t0_speed)
    }

    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> Trajectory {
        Trajectory {
            points: self.points.iter().map(|p| f(*p)).collect(),
            dt: self.dt,
            t0_speed: self.t0_speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedClass {
    Accelerate,
    Decelerate,
    KeepSpeed,
    Stop,
    Unknown,
}

impl SpeedClass {
    /// The four trainable classes, in canonical (index) order.
    pub const KNOWN: [SpeedClass; 4] = [
        SpeedClass::Accelerate,
        SpeedClass::Decelerate,
        SpeedClass::KeepSpeed,
        SpeedClass::Stop,
    ];

    pub fn index(self) -> Option<usize> {
        SpeedClass::KNOWN.iter().position(|c| *c == self)
    }

    pub fn label(self) -> &'static str {
        match self {
            SpeedClass::Accelerate => "accelerate",
            SpeedClass::Decelerate => "decelerate",
            SpeedClass::KeepSpeed => "keep",
            SpeedClass::Stop => "stop",
            SpeedClass::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<SpeedClass> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accelerate" | "acc" => Some(SpeedClass::Accelerate),
            "decelerate" | "dec" => Some(SpeedClass::Decelerate),
            "keep" | "keep_speed" | "keepspeed" => Some(SpeedClass::KeepSpeed),
            "stop" => Some(SpeedClass::Stop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionClassCoarse {
    Left,
    Right,
    Straight,
}

impl DirectionClassCoarse {
    pub const ALL: [DirectionClassCoarse; 3] = [
        DirectionClassCoarse::Left,
        DirectionClassCoarse::Right,
        DirectionClassCoarse::Straight,
    ];

    pub fn index(self) -> usize {
        match self {
            DirectionClassCoarse::Left => 0,
            DirectionClassCoarse::Right => 1,
            DirectionClassCoarse::Straight => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DirectionClassCoarse::Left => "left",
            DirectionClassCoarse::Right => "right",
            DirectionClassCoarse::Straight => "straight",
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            DirectionClassCoarse::Left => DirectionClassCoarse::Right,
            DirectionClassCoarse::Right => DirectionClassCoarse::Left,
            DirectionClassCoarse::Straight => DirectionClassCoarse::Straight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesUnit {
    MetersPerSecond,
    MetersPerSecondSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarSeries {
    pub values: Vec<f64>,
    pub unit: SeriesUnit,
    pub dt: f64,
}

impl ScalarSeries {
    pub fn new(values: Vec<f64>, unit: SeriesUnit, dt: f64) -> Self {
        ScalarSeries { values, unit, dt }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `v_t = |p_t - p_{t-1}| / dt` for t >= 1.
pub fn speeds(traj: &Trajectory) -> Result<ScalarSeries> {
    if traj.len() < 2 {
        return Err(Error::invalid("speeds need at least 2 points"));
    }
    let dt = traj.dt();
    let values = traj
        .points()
        .windows(2)
        .map(|w| (w[1] - w[0]).norm() / dt)
        .collect();
    Ok(ScalarSeries::new(values, SeriesUnit::MetersPerSecond, dt))
}

/// Forward differences of a speed series divided by its step.
pub fn accelerations(v: &ScalarSeries) -> Result<ScalarSeries> {
    if v.len() < 2 {
        return Err(Error::invalid("accelerations need at least 2 speed samples"));
    }
    let values = v.values.windows(2).map(|w| (w[1] - w[0]) / v.dt).collect();
    Ok(ScalarSeries::new(
        values,
        SeriesUnit::MetersPerSecondSquared,
        v.dt,
    ))
}

/// Centered moving average; windows are truncated at the ends so the output
/// keeps the input length and averages only samples that exist.
pub fn moving_average(s: &ScalarSeries, window: usize) -> Result<ScalarSeries> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "moving average window must be odd and positive, got {window}"
        )));
    }
    if s.is_empty() {
        return Err(Error::invalid("moving average of an empty series"));
    }
    let half = window / 2;
    let n = s.len();
    let values = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let slice = &s.values[lo..=hi];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect();
    Ok(ScalarSeries::new(values, s.unit, s.dt))
}

/// Length of the longest run of consecutive `true` values.
pub fn longest_true_run(flags: &[bool]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for &f in flags {
        if f {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmsMode {
    /// sqrt(mean(x^2))
    #[default]
    RootMeanSquare,
    /// mean(x^2), the alternative reading of the acceleration-energy gate.
    MeanSquare,
}

pub fn rms(s: &ScalarSeries) -> Result<f64> {
    rms_with(s, RmsMode::RootMeanSquare)
}

pub fn rms_with(s: &ScalarSeries, mode: RmsMode) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::invalid("rms of an empty series"));
    }
    let ms = s.values.iter().map(|x| x * x).sum::<f64>() / s.len() as f64;
    Ok(match mode {
        RmsMode::RootMeanSquare => ms.sqrt(),
        RmsMode::MeanSquare => ms,
    })
}

/// Speed-dependent scale applied to the keep-speed thresholds.
pub fn keep_speed_scale(mean_speed: f64) -> f64 {
    if mean_speed > 25.0 {
        2.5
    } else if mean_speed > 20.0 {
        2.0
    } else if mean_speed > 10.0 {
        1.5
    } else if mean_speed > 5.0 {
        1.25
    } else {
        1.0
    }
}

/// Speed-dependent lateral displacement threshold for turn/lane-change labels.
pub fn lateral_threshold(mean_speed: f64) -> f64 {
    if mean_speed > 15.0 {
        3.0
    } else if mean_speed > 10.0 {
        2.4
    } else if mean_speed > 5.0 {
        1.5
    } else if mean_speed > 3.0 {
        0.9
    } else {
        0.45
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KinematicConfig {
    pub rms_mode: RmsMode,
}

fn classification_window(traj: &Trajectory) -> Result<Trajectory> {
    if traj.len() < CLASSIFY_POINTS {
        return Err(Error::invalid(format!(
            "classification needs {CLASSIFY_POINTS} points, got {}",
            traj.len()
        )));
    }
    traj.prefix(CLASSIFY_POINTS)
}

pub fn classify_speed(traj: &Trajectory) -> Result<SpeedClass> {
    classify_speed_with(traj, &KinematicConfig::default())
}

pub fn classify_speed_with(traj: &Trajectory, cfg: &KinematicConfig) -> Result<SpeedClass> {
    let window = classification_window(traj)?;
    let v = speeds(&window)?;
    let a = accelerations(&v)?;
    let v = moving_average(&v, SMOOTHING_WINDOW)?;
    let a = moving_average(&a, SMOOTHING_WINDOW)?;
    let energy = rms_with(&a, cfg.rms_mode)?;

    let first = a.values[0];
    let a_max = a.max();
    let a_min = a.min();
    let rising: Vec<bool> = a.values.iter().map(|x| *x > 0.3).collect();
    let falling: Vec<bool> = a.values.iter().map(|x| *x < -0.3).collect();

    if first > 0.0 && longest_true_run(&rising) >= 8 && a_max > 0.6 && energy > 0.4 {
        return Ok(SpeedClass::Accelerate);
    }
    if first < 0.0 && longest_true_run(&falling) >= 8 && a_min < -0.6 && energy > 0.4 {
        return Ok(SpeedClass::Decelerate);
    }

    let v_mean = v.mean();
    // A standing vehicle trivially satisfies the keep-speed bounds, so the
    // stop test has to run first.
    if v_mean < 0.5 {
        return Ok(SpeedClass::Stop);
    }
    let scale = keep_speed_scale(v_mean);
    let a_abs_max = a.values.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if a.mean().abs() < 0.3 * scale && a_abs_max < 0.6 * scale {
        return Ok(SpeedClass::KeepSpeed);
    }
    Ok(SpeedClass::Unknown)
}

/// Heading of every segment, degenerate segments inheriting the previous one.
pub(crate) fn segment_headings(points: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len().saturating_sub(1));
    let mut prev = 0.0;
    for w in points.windows(2) {
        let d = w[1] - w[0];
        if d.norm() >= DEGENERATE_SEGMENT {
            prev = d.angle();
        }
        out.push(prev);
    }
    out
}

/// Geometry summary used by the direction classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionFeatures {
    pub mean_speed: f64,
    pub lateral_max: f64,
    pub lateral_min: f64,
    pub yaw_change_max: f64,
}

pub fn direction_features(traj: &Trajectory) -> Result<DirectionFeatures> {
    let window = classification_window(traj)?;
    let pts = window.points();
    let headings = segment_headings(pts);
    let initial = headings[0];
    let origin = pts[0];
    let left = Vec2::from_angle(initial).perp();

    let lateral: Vec<f64> = pts.iter().map(|p| (*p - origin).dot(left)).collect();
    let yaw_change_max = headings
        .iter()
        .map(|h| wrap_angle(h - initial).abs())
        .fold(0.0, f64::max);
    Ok(DirectionFeatures {
        mean_speed: speeds(&window)?.mean(),
        lateral_max: lateral.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        lateral_min: lateral.iter().copied().fold(f64::INFINITY, f64::min),
        yaw_change_max,
    })
}

pub fn classify_direction(traj: &Trajectory) -> Result<DirectionClassCoarse> {
    let f = direction_features(traj)?;
    let lateral = lateral_threshold(f.mean_speed);
    if f.yaw_change_max > YAW_THRESHOLD {
        if f.lateral_max > lateral {
            return Ok(DirectionClassCoarse::Left);
        }
        if f.lateral_min < -lateral {
            return Ok(DirectionClassCoarse::Right);
        }
    }
    Ok(DirectionClassCoarse::Straight)
}

pub fn kinematic_map(traj: &Trajectory) -> Result<(SpeedClass, DirectionClassCoarse)> {
    Ok((classify_speed(traj)?, classify_direction(traj)?))
}
