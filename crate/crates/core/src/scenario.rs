//! Scenario schema: scripted agents, static obstacles, lanes and the expert
//! ego trajectory, all in world coordinates sampled every 0.1 s.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConvexPolygon, OrientedRect, Pose, Vec2};
use crate::io::{read_json, write_json_atomic};
use crate::kinematics::{Trajectory, DT};
use crate::policy::NavigationCommand;

pub const SCENARIO_VERSION: u32 = 1;

/// Number of 0.1 s frames in a clip of `duration` seconds.
pub fn frame_count(duration: f64) -> usize {
    (duration / DT).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoInit {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl EgoInit {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub id: String,
    pub length: f64,
    pub width: f64,
    /// World pose at t = 0, 0.1, 0.2, ... s.
    pub waypoints: Vec<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub pose: Pose,
    pub velocity: Vec2,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn rect(&self) -> OrientedRect {
        OrientedRect::from_pose(&self.pose, self.length, self.width)
    }
}

impl AgentScript {
    /// Pose and finite-difference velocity at frame `k`; `None` past the end
    /// of the script.
    pub fn state(&self, k: usize) -> Option<AgentState> {
        let pose = *self.waypoints.get(k)?;
        let velocity = match (self.waypoints.get(k + 1), k.checked_sub(1)) {
            (Some(next), _) => (next.position() - pose.position()) / DT,
            (None, Some(prev)) => (pose.position() - self.waypoints[prev].position()) / DT,
            (None, None) => Vec2::ZERO,
        };
        Some(AgentState {
            pose,
            velocity,
            length: self.length,
            width: self.width,
        })
    }

    pub fn mirrored(&self) -> AgentScript {
        AgentScript {
            waypoints: self
                .waypoints
                .iter()
                .map(|p| Pose::new(p.x, -p.y, -p.heading))
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub id: String,
    /// Generator family, e.g. `hard_brake`; informational.
    #[serde(default)]
    pub kind: String,
    pub duration_s: f64,
    pub ego_init: EgoInit,
    pub agents: Vec<AgentScript>,
    pub static_obstacles: Vec<ConvexPolygon>,
    #[serde(default)]
    pub lane_centerlines: Vec<Vec<Vec2>>,
    pub navigation_command: NavigationCommand,
    pub speed_limit_mps: f64,
    /// World-frame ego positions at 0.1 s, starting at the initial pose.
    pub expert_trajectory: Vec<Vec2>,
}

impl Scenario {
    pub fn frames(&self) -> usize {
        frame_count(self.duration_s)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = format!("scenario {}", self.id);
        let bad = |m: String| Err(Error::schema(ctx.clone(), m));
        if self.version != SCENARIO_VERSION {
            return Err(Error::Version {
                kind: "scenario",
                found: self.version,
                expected: SCENARIO_VERSION,
            });
        }
        if self.id.is_empty() {
            return bad("empty id".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s {} must be positive", self.duration_s));
        }
        let n = self.frames();
        if ((n as f64) * DT - self.duration_s).abs() > 1e-9 {
            return bad(format!("duration_s {} is not a multiple of 0.1 s", self.duration_s));
        }
        let e = &self.ego_init;
        if ![e.x, e.y, e.heading, e.speed].iter().all(|v| v.is_finite()) || e.speed < 0.0 {
            return bad("ego_init must be finite with nonnegative speed".into());
        }
        if !(self.speed_limit_mps > 0.0 && self.speed_limit_mps.is_finite()) {
            return bad(format!("speed_limit_mps {} must be positive", self.speed_limit_mps));
        }
        for a in &self.agents {
            if !(a.length > 0.0 && a.width > 0.0) {
                return bad(format!("agent {} has a degenerate footprint", a.id));
            }
            if a.waypoints.len() < n + 1 {
                return bad(format!(
                    "agent {} covers {} frames, the clip needs {}",
                    a.id,
                    a.waypoints.len(),
                    n + 1
                ));
            }
            if a.waypoints.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite())) {
                return bad(format!("agent {} has a non-finite pose", a.id));
            }
        }
        for (i, o) in self.static_obstacles.iter().enumerate() {
            if !o.is_valid_convex() {
                return bad(format!("static obstacle {i} is not a convex polygon"));
            }
        }
        if self.expert_trajectory.len() < n + 1 {
            return bad(format!(
                "expert trajectory has {} points, the clip needs {}",
                self.expert_trajectory.len(),
                n + 1
            ));
        }
        if self.expert_trajectory.iter().any(|p| !p.is_finite()) {
            return bad("expert trajectory has a non-finite point".into());
        }
        if (self.expert_trajectory[0] - e.pose().position()).norm() > 1e-6 {
            return bad("expert trajectory does not start at ego_init".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let scn: Scenario = read_json(path, "scenario")?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json_atomic(path, self)
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let scn: Scenario = serde_json::from_str(text).map_err(|e| Error::schema("scenario", e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    /// Heading of every expert segment; standing segments keep the previous
    /// heading, starting from the initial one.
    pub fn expert_headings(&self) -> Vec<f64> {
        let mut prev = self.ego_init.heading;
        self.expert_trajectory
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                if d.norm() >= 1e-6 {
                    prev = d.angle();
                }
                prev
            })
            .collect()
    }

    /// Expert pose at frame `k`.
    pub fn expert_pose(&self, k: usize) -> Option<Pose> {
        let p = *self.expert_trajectory.get(k)?;
        let h = self.expert_headings();
        let heading = *h.get(k).or(h.last())?;
        Some(Pose::new(p.x, p.y, heading))
    }

    /// Expert speed at frame `k`: the initial speed at frame 0, a central
    /// difference elsewhere.
    pub fn expert_speed(&self, k: usize) -> Option<f64> {
        let pts = &self.expert_trajectory;
        if k == 0 {
            return Some(self.ego_init.speed);
        }
        let next = pts.get(k + 1)?;
        Some((*next - pts[k - 1]).norm() / (2.0 * DT))
    }

    /// Expert future from frame `k` over `steps` steps, in the ego frame of
    /// the expert pose at `k`.
    pub fn expert_future(&self, k: usize, steps: usize) -> Result<Trajectory> {
        if k + steps >= self.expert_trajectory.len() {
            return Err(Error::invalid(format!(
                "expert of scenario {} ends before frame {}",
                self.id,
                k + steps
            )));
        }
        let pose = self.expert_pose(k).expect("frame within the expert");
        let speed = self.expert_speed(k).expect("frame within the expert");
        let pts = self.expert_trajectory[k..=k + steps]
            .iter()
            .map(|p| pose.to_local(*p))
            .collect();
        Trajectory::new(pts, DT, speed)
    }

    pub fn agent_states(&self, k: usize) -> Result<Vec<(usize, AgentState)>> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.state(k).map(|s| (i, s)).ok_or_else(|| {
                    Error::invalid(format!("agent {} is not scripted at frame {k}", a.id))
                })
            })
            .collect()
    }

    /// Reflection across the x axis (the ego's initial heading line when the
    /// ego starts on it heading +x).
    pub fn mirrored(&self) -> Scenario {
        let flip = |p: &Vec2| Vec2::new(p.x, -p.y);
        Scenario {
            ego_init: EgoInit {
                y: -self.ego_init.y,
                heading: -self.ego_init.heading,
                ..self.ego_init
            },
            agents: self.agents.iter().map(AgentScript::mirrored).collect(),
            static_obstacles: self
                .static_obstacles
                .iter()
                .map(|o| {
                    let mut v: Vec<Vec2> = o.vertices.iter().map(flip).collect();
                    v.reverse();
                    ConvexPolygon::new(v)
                })
                .collect(),
            lane_centerlines: self
                .lane_centerlines
                .iter()
                .map(|l| l.iter().map(flip).collect())
                .collect(),
            navigation_command: self.navigation_command.mirrored(),
            expert_trajectory: self.expert_trajectory.iter().map(flip).collect(),
            ..self.clone()
        }
    }
}
