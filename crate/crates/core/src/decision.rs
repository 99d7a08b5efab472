//! Meta-action decisions, the binary decision/plan consistency indicator,
//! per-class F1 scoring and the relative speed ratio statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::kinematics::{kinematic_map, DirectionClassCoarse, SpeedClass, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionClassFine {
    GoStraight,
    TurnLeft,
    TurnRight,
    ChangeLaneLeft,
    ChangeLaneRight,
}

impl DirectionClassFine {
    pub const ALL: [DirectionClassFine; 5] = [
        DirectionClassFine::GoStraight,
        DirectionClassFine::TurnLeft,
        DirectionClassFine::TurnRight,
        DirectionClassFine::ChangeLaneLeft,
        DirectionClassFine::ChangeLaneRight,
    ];
}

pub fn project_fine_to_coarse(d: DirectionClassFine) -> DirectionClassCoarse {
    match d {
        DirectionClassFine::TurnLeft | DirectionClassFine::ChangeLaneLeft => {
            DirectionClassCoarse::Left
        }
        DirectionClassFine::TurnRight | DirectionClassFine::ChangeLaneRight => {
            DirectionClassCoarse::Right
        }
        DirectionClassFine::GoStraight => DirectionClassCoarse::Straight,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Fine(DirectionClassFine),
    Coarse(DirectionClassCoarse),
}

impl Direction {
    pub fn coarse(self) -> DirectionClassCoarse {
        match self {
            Direction::Fine(f) => project_fine_to_coarse(f),
            Direction::Coarse(c) => c,
        }
    }
}

/// A (speed, direction) meta-action. The speed component is never
/// `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "DecisionRepr", into = "DecisionRepr")]
pub struct Decision {
    speed: SpeedClass,
    direction: Direction,
}

#[derive(Serialize, Deserialize)]
struct DecisionRepr {
    speed: SpeedClass,
    direction: Direction,
}

impl TryFrom<DecisionRepr> for Decision {
    type Error = Error;
    fn try_from(r: DecisionRepr) -> Result<Self> {
        Decision::new(r.speed, r.direction)
    }
}

impl From<Decision> for DecisionRepr {
    fn from(d: Decision) -> Self {
        DecisionRepr {
            speed: d.speed,
            direction: d.direction,
        }
    }
}

impl Decision {
    pub fn new(speed: SpeedClass, direction: Direction) -> Result<Self> {
        if speed == SpeedClass::Unknown {
            return Err(Error::invalid("a decision cannot carry an unknown speed class"));
        }
        Ok(Decision { speed, direction })
    }

    pub fn coarse(speed: SpeedClass, direction: DirectionClassCoarse) -> Result<Self> {
        Self::new(speed, Direction::Coarse(direction))
    }

    pub fn fine(speed: SpeedClass, direction: DirectionClassFine) -> Result<Self> {
        Self::new(speed, Direction::Fine(direction))
    }

    pub fn speed(&self) -> SpeedClass {
        self.speed
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn coarse_direction(&self) -> DirectionClassCoarse {
        self.direction.coarse()
    }

    /// The same decision with its direction projected to the coarse form.
    pub fn to_coarse(&self) -> Decision {
        Decision {
            speed: self.speed,
            direction: Direction::Coarse(self.coarse_direction()),
        }
    }

    /// Parses `speed[,direction]`, e.g. `keep,straight` or `decelerate`.
    pub fn parse(s: &str) -> Result<Decision> {
        let mut parts = s.split(',');
        let speed_txt = parts.next().unwrap_or_default();
        let speed = SpeedClass::parse(speed_txt)
            .ok_or_else(|| Error::invalid(format!("unknown speed decision '{speed_txt}'")))?;
        let direction = match parts.next().map(|d| d.trim().to_ascii_lowercase()) {
            None => Direction::Coarse(DirectionClassCoarse::Straight),
            Some(d) => match d.as_str() {
                "straight" => Direction::Coarse(DirectionClassCoarse::Straight),
                "left" => Direction::Coarse(DirectionClassCoarse::Left),
                "right" => Direction::Coarse(DirectionClassCoarse::Right),
                "go_straight" => Direction::Fine(DirectionClassFine::GoStraight),
                "turn_left" => Direction::Fine(DirectionClassFine::TurnLeft),
                "turn_right" => Direction::Fine(DirectionClassFine::TurnRight),
                "change_lane_left" => Direction::Fine(DirectionClassFine::ChangeLaneLeft),
                "change_lane_right" => Direction::Fine(DirectionClassFine::ChangeLaneRight),
                other => {
                    return Err(Error::invalid(format!("unknown direction decision '{other}'")))
                }
            },
        };
        if parts.next().is_some() {
            return Err(Error::invalid(format!("malformed decision '{s}'")));
        }
        Decision::new(speed, direction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub vlm_decision: Decision,
    pub planned_speed: SpeedClass,
    pub planned_direction: DirectionClassCoarse,
    pub consistent_speed: bool,
    pub consistent_direction: bool,
    pub consistent: bool,
    /// Planned speed could not be classified; the sample takes part in
    /// neither scoring nor gated training.
    pub excluded: bool,
}

/// Binary consistency between a decision and the meta-action implied by a
/// trajectory. Both components have to agree.
pub fn consistency(traj: &Trajectory, d: &Decision) -> Result<ConsistencyRecord> {
    let (speed, direction) = kinematic_map(traj)?;
    let vlm = d.to_coarse();
    let excluded = speed == SpeedClass::Unknown;
    let consistent_speed = !excluded && speed == vlm.speed();
    let consistent_direction = direction == vlm.coarse_direction();
    Ok(ConsistencyRecord {
        vlm_decision: vlm,
        planned_speed: speed,
        planned_direction: direction,
        consistent_speed,
        consistent_direction,
        consistent: consistent_speed && consistent_direction && !excluded,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report<T: Ord> {
    pub per_class: BTreeMap<T, f64>,
    /// Unweighted mean over reported classes; `None` for an empty input.
    pub macro_avg: Option<f64>,
}

/// One-vs-rest F1 per class for `(predicted, reference)` pairs. Classes that
/// occur in neither column are not reported.
pub fn f1_report<T: Ord + Copy>(pairs: &[(T, T)]) -> F1Report<T> {
    // (tp, fp, fn)
    let mut counts: BTreeMap<T, (usize, usize, usize)> = BTreeMap::new();
    for &(pred, truth) in pairs {
        if pred == truth {
            counts.entry(pred).or_default().0 += 1;
        } else {
            counts.entry(pred).or_default().1 += 1;
            counts.entry(truth).or_default().2 += 1;
        }
    }
    let per_class: BTreeMap<T, f64> = counts
        .into_iter()
        .map(|(c, (tp, fp, fn_))| (c, (2 * tp) as f64 / (2 * tp + fp + fn_) as f64))
        .collect();
    let macro_avg = (!per_class.is_empty())
        .then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    F1Report {
        per_class,
        macro_avg,
    }
}

/// Path and speed F1 side by side, in the seven-class layout
/// (Straight/Left/Right, Keep/Acc./Dec./Stop, Avg.).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTable {
    pub path: F1Report<DirectionClassCoarse>,
    pub speed: F1Report<SpeedClass>,
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "straight",
    "left",
    "right",
    "keep",
    "accelerate",
    "decelerate",
    "stop",
    "avg",
];

const PATH_ORDER: [DirectionClassCoarse; 3] = [
    DirectionClassCoarse::Straight,
    DirectionClassCoarse::Left,
    DirectionClassCoarse::Right,
];

const SPEED_ORDER: [SpeedClass; 4] = [
    SpeedClass::KeepSpeed,
    SpeedClass::Accelerate,
    SpeedClass::Decelerate,
    SpeedClass::Stop,
];

impl ConsistencyTable {
    /// Scores `(vlm decision, trajectory-derived meta-action)` pairs.
    /// Excluded records must already have been dropped.
    pub fn from_records(records: &[ConsistencyRecord]) -> Self {
        let path: Vec<_> = records
            .iter()
            .filter(|r| !r.excluded)
            .map(|r| (r.vlm_decision.coarse_direction(), r.planned_direction))
            .collect();
        let speed: Vec<_> = records
            .iter()
            .filter(|r| !r.excluded)
            .map(|r| (r.vlm_decision.speed(), r.planned_speed))
            .collect();
        ConsistencyTable {
            path: f1_report(&path),
            speed: f1_report(&speed),
        }
    }

    /// Builds a table from already-computed per-class scores in column order
    /// (used for published reference rows).
    pub fn from_scores(path: [f64; 3], speed: [f64; 4]) -> Self {
        let path_map: BTreeMap<_, _> = PATH_ORDER.iter().copied().zip(path).collect();
        let speed_map: BTreeMap<_, _> = SPEED_ORDER.iter().copied().zip(speed).collect();
        ConsistencyTable {
            path: F1Report {
                macro_avg: Some(path.iter().sum::<f64>() / 3.0),
                per_class: path_map,
            },
            speed: F1Report {
                macro_avg: Some(speed.iter().sum::<f64>() / 4.0),
                per_class: speed_map,
            },
        }
    }

    /// Mean over every reported class of both families.
    pub fn average(&self) -> Option<f64> {
        let all: Vec<f64> = self
            .path
            .per_class
            .values()
            .chain(self.speed.per_class.values())
            .copied()
            .collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    }

    /// Column values in display order; absent classes are `None`.
    pub fn columns(&self) -> [Option<f64>; 8] {
        let mut out = [None; 8];
        for (i, c) in PATH_ORDER.iter().enumerate() {
            out[i] = self.path.per_class.get(c).copied();
        }
        for (i, c) in SPEED_ORDER.iter().enumerate() {
            out[3 + i] = self.speed.per_class.get(c).copied();
        }
        out[7] = self.average();
        out
    }

    /// Flat `class -> F1` document, `avg` holding the macro score.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = TABLE_COLUMNS
            .iter()
            .zip(self.columns())
            .map(|(k, v)| (k.to_string(), v.map_or(serde_json::Value::Null, |x| x.into())))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Renders rows in the Path(F1) / Speed(F1) / Avg. layout.
pub fn render_consistency_table(rows: &[(&str, &ConsistencyTable)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8}",
        "Method", "Straight", "Left", "Right", "Keep", "Acc.", "Dec.", "Stop", "Avg."
    );
    for (name, table) in rows {
        let cols: Vec<String> = table
            .columns()
            .iter()
            .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}")))
            .collect();
        let _ = writeln!(
            out,
            "{:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8}",
            name, cols[0], cols[1], cols[2], cols[3], cols[4], cols[5], cols[6], cols[7]
        );
    }
    out
}

const MIN_INITIAL_SPEED: f64 = 0.1;
const RATIO_HORIZON: f64 = 3.0;

/// Planned speed at the 3 s mark divided by the initial speed.
///
/// The terminal speed uses a second-order backward difference, which is exact
/// for constant-acceleration motion. A plan that reverses direction (two
/// consecutive segments pointing more than 90 degrees apart) has come to rest,
/// so its terminal speed counts as zero.
pub fn relative_speed_ratio(traj: &Trajectory) -> Result<f64> {
    let steps = (RATIO_HORIZON / traj.dt()).round() as usize;
    if traj.len() < steps + 1 || steps < 2 {
        return Err(Error::invalid(format!(
            "relative speed ratio needs a {RATIO_HORIZON} s horizon, trajectory covers {:.2} s",
            traj.horizon()
        )));
    }
    let v0 = traj.t0_speed();
    if v0.abs() <= MIN_INITIAL_SPEED {
        return Err(Error::UndefinedRatio(format!(
            "initial speed {v0:.3} m/s is too small"
        )));
    }
    let p = &traj.points()[..=steps];
    let mut prev: Option<Vec2> = None;
    for w in p.windows(2) {
        let seg = w[1] - w[0];
        if seg.norm() < 1e-6 {
            continue;
        }
        if let Some(prev) = prev {
            if prev.dot(seg) < 0.0 {
                return Ok(0.0);
            }
        }
        prev = Some(seg);
    }
    let n = steps;
    let v_end = (p[n] * 3.0 - p[n - 1] * 4.0 + p[n - 2]) * (1.0 / (2.0 * traj.dt()));
    Ok(v_end.norm() / v0.abs())
}
