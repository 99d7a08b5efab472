//! Open-loop and closed-loop evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polygons_overlap, rects_overlap, Pose};
use crate::kinematics::Trajectory;
use crate::scenario::Scenario;
use crate::sim::{RolloutLog, SimConfig};

/// Final and average displacement error over all points.
pub fn fde_ade(planned: &Trajectory, expert: &Trajectory) -> Result<(f64, f64)> {
    if planned.len() != expert.len() {
        return Err(Error::invalid(format!(
            "displacement error between trajectories of length {} and {}",
            planned.len(),
            expert.len()
        )));
    }
    let d: Vec<f64> = planned
        .points()
        .iter()
        .zip(expert.points())
        .map(|(p, e)| (*p - *e).norm())
        .collect();
    Ok((*d.last().expect("nonempty"), d.iter().sum::<f64>() / d.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    None,
    Dynamic,
    Static,
    Both,
}

impl CollisionKind {
    fn from_flags(dynamic: bool, stat: bool) -> Self {
        match (dynamic, stat) {
            (false, false) => CollisionKind::None,
            (true, false) => CollisionKind::Dynamic,
            (false, true) => CollisionKind::Static,
            (true, true) => CollisionKind::Both,
        }
    }
}

/// Sweeps the ego footprint along a plan laid out in the frame of `origin`
/// (planned at frame `frame`) against time-aligned agents and static
/// obstacles. Point `i` of the plan is checked against frame `frame + i`.
pub fn open_loop_collisions(
    planned: &Trajectory,
    origin: &Pose,
    scn: &Scenario,
    frame: usize,
    cfg: &SimConfig,
) -> Result<CollisionKind> {
    let pts = planned.points();
    let mut heading = origin.heading;
    let mut dynamic = false;
    let mut stat = false;
    for i in 1..pts.len() {
        let step = pts[i] - pts[i - 1];
        if step.norm() > 1e-6 {
            heading = origin.heading + step.angle();
        }
        let pos = origin.to_world(pts[i]);
        let ego = cfg.ego_rect(&Pose::new(pos.x, pos.y, heading));
        for a in &scn.agents {
            let state = a.state(frame + i).ok_or_else(|| {
                Error::invalid(format!(
                    "agent {} of scenario {} is not scripted at frame {}",
                    a.id,
                    scn.id,
                    frame + i
                ))
            })?;
            dynamic |= rects_overlap(&ego, &state.rect());
        }
        let poly = ego.polygon();
        stat |= scn.static_obstacles.iter().any(|o| polygons_overlap(&poly, o));
    }
    Ok(CollisionKind::from_flags(dynamic, stat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopReport {
    pub fde: f64,
    pub ade: f64,
    /// Plans hitting anything.
    pub cr: f64,
    /// Plans hitting an agent (alone or together with a static obstacle).
    pub dcr: f64,
    /// Plans hitting a static obstacle (alone or together with an agent).
    pub scr: f64,
    /// Plans hitting both kinds.
    pub both: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct OpenLoopAccumulator {
    fde: f64,
    ade: f64,
    hits: [usize; 4],
    n: usize,
}

impl OpenLoopAccumulator {
    pub fn add(&mut self, fde: f64, ade: f64, kind: CollisionKind) {
        self.fde += fde;
        self.ade += ade;
        self.hits[kind as usize] += 1;
        self.n += 1;
    }

    pub fn report(&self) -> Result<OpenLoopReport> {
        if self.n == 0 {
            return Err(Error::invalid("open-loop report over zero samples"));
        }
        let n = self.n as f64;
        let [_, dynamic, stat, both] = self.hits.map(|h| h as f64 / n);
        Ok(OpenLoopReport {
            fde: self.fde / n,
            ade: self.ade / n,
            cr: dynamic + stat + both,
            dcr: dynamic + both,
            scr: stat + both,
            both,
            sample_count: self.n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub cr: f64,
    pub af_cr: f64,
    #[serde(rename = "safety@1")]
    pub safety1: f64,
    #[serde(rename = "safety@2")]
    pub safety2: f64,
    pub clip_count: usize,
}

/// Per-clip outcome used by [`closed_loop_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub collided: bool,
    pub at_fault: bool,
    pub min_ttc: f64,
}

impl From<&RolloutLog> for ClipOutcome {
    fn from(log: &RolloutLog) -> Self {
        ClipOutcome {
            collided: log.collided(),
            at_fault: log.at_fault(),
            min_ttc: log.min_ttc(),
        }
    }
}

pub fn closed_loop_report(logs: &[RolloutLog]) -> Result<ClosedLoopReport> {
    let outcomes: Vec<ClipOutcome> = logs.iter().map(ClipOutcome::from).collect();
    closed_loop_from_outcomes(&outcomes)
}

/// CR, AF-CR and Safety@k (strictly greater minimum TTC) over clips.
pub fn closed_loop_from_outcomes(clips: &[ClipOutcome]) -> Result<ClosedLoopReport> {
    if clips.is_empty() {
        return Err(Error::invalid("closed-loop report over zero clips"));
    }
    let n = clips.len() as f64;
    let frac = |f: &dyn Fn(&ClipOutcome) -> bool| clips.iter().filter(|c| f(c)).count() as f64 / n;
    Ok(ClosedLoopReport {
        cr: frac(&|c| c.collided),
        af_cr: frac(&|c| c.collided && c.at_fault),
        safety1: frac(&|c| c.min_ttc > 1.0),
        safety2: frac(&|c| c.min_ttc > 2.0),
        clip_count: clips.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::kinematics::DT;

    fn line(n: usize, dy: f64, last_dx: f64) -> Trajectory {
        let mut pts: Vec<Vec2> = (0..n).map(|i| Vec2::new(i as f64, dy)).collect();
        pts[n - 1].x += last_dx;
        Trajectory::new(pts, DT, 10.0).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let e = line(30, 0.0, 0.0);
        assert_eq!(fde_ade(&e, &e).unwrap(), (0.0, 0.0));
        let (f, a) = fde_ade(&line(30, 0.0, 1.0), &e).unwrap();
        assert_eq!(f, 1.0);
        assert!((a - 1.0 / 30.0).abs() < 1e-15);
        let (f, a) = fde_ade(&line(30, 0.5, 0.0), &e).unwrap();
        assert_eq!((f, a), (0.5, 0.5));
        assert!(fde_ade(&line(10, 0.0, 0.0), &e).is_err());
    }

    #[test]
    fn closed_loop_examples() {
        let clean = ClipOutcome { collided: false, at_fault: false, min_ttc: f64::INFINITY };
        let r = closed_loop_from_outcomes(&[clean; 3]).unwrap();
        assert_eq!((r.cr, r.af_cr, r.safety1, r.safety2), (0.0, 0.0, 1.0, 1.0));

        let clips = [
            clean,
            ClipOutcome { collided: true, at_fault: true, min_ttc: 0.0 },
            ClipOutcome { collided: true, at_fault: false, min_ttc: 1.5 },
            ClipOutcome { collided: false, at_fault: false, min_ttc: 2.5 },
        ];
        let r = closed_loop_from_outcomes(&clips).unwrap();
        assert_eq!((r.cr, r.af_cr, r.safety1, r.safety2), (0.5, 0.25, 0.75, 0.5));
        assert!(closed_loop_from_outcomes(&[]).is_err());
    }

    #[test]
    fn safety_threshold_is_strict() {
        let at = |t| ClipOutcome { collided: false, at_fault: false, min_ttc: t };
        let r = closed_loop_from_outcomes(&[at(1.0), at(2.0)]).unwrap();
        assert_eq!((r.safety1, r.safety2), (0.5, 0.0));
    }

    #[test]
    fn report_json_layout() {
        let r = ClosedLoopReport { cr: 0.269, af_cr: 0.077, safety1: 0.667, safety2: 0.565, clip_count: 256 };
        let v = serde_json::to_value(r).unwrap();
        for k in ["cr", "af_cr", "safety@1", "safety@2", "clip_count"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }
}
