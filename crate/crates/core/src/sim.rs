//! Deterministic 10 Hz closed-loop rollouts: scene features, time-to-collision,
//! collision detection and at-fault attribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::Decision;
use crate::error::{Error, Result};
use crate::geometry::{
    first_contact_time, intersection, polygons_overlap, rects_overlap, ConvexPolygon, OrientedRect,
    Pose, Vec2,
};
use crate::kinematics::{Trajectory, DT};
use crate::policy::{DecideMode, DecisionPolicy, DecisionProbs, ResidualPlanner, SceneFeatures};
use crate::scenario::{AgentState, Scenario};

pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 1.9;
pub const LANE_WIDTH: f64 = 3.5;

/// Below this speed the ego counts as standing.
const STANDING_SPEED: f64 = 0.1;
/// Approach speed toward the other body above which the ego is at fault.
const APPROACH_FAULT_SPEED: f64 = 0.5;
/// Executed steps shorter than this keep the previous heading.
const MIN_HEADING_STEP: f64 = 0.01;
/// Longitudinal window (behind, ahead) in which an adjacent-lane agent
/// blocks that lane.
const LANE_BLOCK_WINDOW: (f64, f64) = (-12.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
}

impl EgoState {
    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.pose.heading) * self.speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub ego_length: f64,
    pub ego_width: f64,
    pub corridor_width: f64,
    /// Replanning frequency; must divide 10.
    pub replan_hz: u32,
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ego_length: EGO_LENGTH,
            ego_width: EGO_WIDTH,
            corridor_width: EGO_WIDTH + 1.0,
            replan_hz: 10,
            max_steps: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ego_length > 0.0 && self.ego_width > 0.0 && self.corridor_width > 0.0) {
            return Err(Error::Config("ego footprint and corridor must be positive".into()));
        }
        if self.replan_hz == 0 || 10 % self.replan_hz != 0 {
            return Err(Error::Config(format!("replan_hz {} must divide 10", self.replan_hz)));
        }
        Ok(())
    }

    pub fn ego_rect(&self, pose: &Pose) -> OrientedRect {
        OrientedRect::from_pose(pose, self.ego_length, self.ego_width)
    }
}

/// Time until the ego footprint, widened to the corridor, first touches an
/// agent ahead of the ego centre when every body keeps its current velocity.
/// Zero when a real footprint already overlaps, infinite when no agent
/// qualifies.
pub fn ttc(ego: &OrientedRect, ego_velocity: Vec2, agents: &[AgentState], corridor_width: f64) -> f64 {
    let forward = Vec2::from_angle(ego.heading);
    let swept = OrientedRect {
        width: ego.width.max(corridor_width),
        ..*ego
    }
    .polygon();
    let mut best = f64::INFINITY;
    for a in agents {
        let rect = a.rect();
        if rects_overlap(ego, &rect) {
            return 0.0;
        }
        if (rect.center - ego.center).dot(forward) <= 0.0 {
            continue;
        }
        if let Some(t) = first_contact_time(&swept, ego_velocity, &rect.polygon(), a.velocity) {
            best = best.min(t);
        }
    }
    best
}

/// At-fault attribution for an overlapping pair.
///
/// A standing ego, or one struck from behind while not reversing, is never
/// at fault. Otherwise the ego is at fault when the contact lies on its front
/// half or it approaches the other body's centre faster than 0.5 m/s.
pub fn at_fault(ego: &OrientedRect, ego_velocity: Vec2, other: &ConvexPolygon, _other_velocity: Vec2) -> bool {
    let speed = ego_velocity.norm();
    if speed < STANDING_SPEED {
        return false;
    }
    let forward = Vec2::from_angle(ego.heading);
    let overlap = intersection(&ego.polygon(), other);
    let contact = if overlap.vertices.is_empty() {
        other.centroid()
    } else {
        overlap.centroid()
    };
    let contact_lon = (contact - ego.center).dot(forward);
    let other_lon = (other.centroid() - ego.center).dot(forward);
    let reversing = ego_velocity.dot(forward) < -STANDING_SPEED;
    if !reversing && contact_lon <= -ego.length / 4.0 && other_lon < 0.0 {
        return false;
    }
    if contact_lon > 0.0 {
        return true;
    }
    let to_other = other.centroid() - ego.center;
    let dist = to_other.norm();
    dist > 1e-9 && ego_velocity.dot(to_other) / dist > APPROACH_FAULT_SPEED
}

/// Signed lateral offset (left positive) of the closest point of a polyline.
fn lateral_offset(pose: &Pose, line: &[Vec2]) -> Option<f64> {
    let p = pose.position();
    let left = Vec2::from_angle(pose.heading).perp();
    let closest = |a: Vec2, b: Vec2| {
        let d = b - a;
        let len2 = d.norm_sq();
        let s = if len2 > 0.0 { ((p - a).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        a + d * s
    };
    let best = match line {
        [] => return None,
        [only] => *only,
        _ => line
            .windows(2)
            .map(|w| closest(w[0], w[1]))
            .min_by(|a, b| (*a - p).norm_sq().total_cmp(&(*b - p).norm_sq()))?,
    };
    Some((best - p).dot(left))
}

/// Observation of the world from the ego's point of view at frame `k`.
pub fn scene_features(scn: &Scenario, ego: &EgoState, agents: &[AgentState], cfg: &SimConfig) -> SceneFeatures {
    let forward = Vec2::from_angle(ego.pose.heading);
    let mut lead_gap = f64::INFINITY;
    let mut lead_closing_speed = 0.0;
    let mut lane_has_agent = [false, false];
    for a in agents {
        let local = ego.pose.to_local(a.pose.position());
        if local.x > 0.0 && local.y.abs() < (cfg.corridor_width + a.width) / 2.0 && local.x < lead_gap {
            lead_gap = local.x;
            lead_closing_speed = ego.speed - a.velocity.dot(forward);
        }
        if local.x > LANE_BLOCK_WINDOW.0 && local.x < LANE_BLOCK_WINDOW.1 {
            if local.y > 0.5 * LANE_WIDTH && local.y < 1.5 * LANE_WIDTH {
                lane_has_agent[0] = true;
            }
            if local.y < -0.5 * LANE_WIDTH && local.y > -1.5 * LANE_WIDTH {
                lane_has_agent[1] = true;
            }
        }
    }
    let mut lane_exists = [false, false];
    for line in &scn.lane_centerlines {
        if let Some(off) = lateral_offset(&ego.pose, line) {
            if off > 0.6 * LANE_WIDTH && off < 1.4 * LANE_WIDTH {
                lane_exists[0] = true;
            }
            if off < -0.6 * LANE_WIDTH && off > -1.4 * LANE_WIDTH {
                lane_exists[1] = true;
            }
        }
    }
    SceneFeatures {
        ego_speed: ego.speed.max(0.0),
        lead_gap,
        lead_closing_speed,
        left_lane_free: lane_exists[0] && !lane_has_agent[0],
        right_lane_free: lane_exists[1] && !lane_has_agent[1],
        navigation_command: scn.navigation_command,
        speed_limit: scn.speed_limit_mps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Agent { index: usize },
    Static { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub step: usize,
    pub t: f64,
    pub body: Body,
    pub at_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub step: usize,
    pub t: f64,
    pub pose: Pose,
    pub speed: f64,
    pub min_ttc: f64,
    pub collided: bool,
    pub at_fault: bool,
    pub features: SceneFeatures,
    pub decision: Option<Decision>,
    pub probs: Option<DecisionProbs>,
    /// Active plan in the frame of `plan_origin`.
    pub plan: Option<Trajectory>,
    pub plan_origin: Pose,
    pub replanned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub scenario_id: String,
    pub dt: f64,
    pub frames: Vec<FrameRecord>,
    pub collisions: Vec<CollisionEvent>,
    pub first_collision_step: Option<usize>,
    pub termination: Termination,
}

impl RolloutLog {
    pub fn min_ttc(&self) -> f64 {
        self.frames.iter().map(|f| f.min_ttc).fold(f64::INFINITY, f64::min)
    }

    pub fn collided(&self) -> bool {
        !self.collisions.is_empty()
    }

    pub fn at_fault(&self) -> bool {
        self.collisions.iter().any(|c| c.at_fault)
    }

    /// Frames strictly before the first collision.
    pub fn clean_frames(&self) -> &[FrameRecord] {
        &self.frames[..self.first_collision_step.unwrap_or(self.frames.len())]
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.speed).collect()
    }

    /// `t,x,y,heading,speed,min_ttc,collided,at_fault`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,heading,speed,min_ttc,collided,at_fault\n");
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{:.1},{},{},{},{},{},{},{}",
                f.t,
                f.pose.x,
                f.pose.y,
                f.pose.heading,
                f.speed,
                if f.min_ttc.is_finite() { f.min_ttc.to_string() } else { "inf".into() },
                u8::from(f.collided),
                u8::from(f.at_fault)
            );
        }
        out
    }
}

/// Where rollout decisions come from.
#[derive(Debug, Clone, Copy)]
pub enum DecisionSource<'a> {
    /// Policy argmax.
    Argmax(&'a DecisionPolicy),
    /// Policy samples drawn from a stream seeded by `SimConfig::seed`.
    Sample(&'a DecisionPolicy),
    /// The same decision for the whole rollout.
    Fixed(Decision),
}

struct Observer<'a> {
    scn: &'a Scenario,
    cfg: &'a SimConfig,
    ongoing: BTreeMap<Body, bool>,
    collisions: Vec<CollisionEvent>,
    first_collision_step: Option<usize>,
}

struct Observation {
    agents: Vec<AgentState>,
    min_ttc: f64,
    collided: bool,
    at_fault: bool,
}

impl<'a> Observer<'a> {
    fn new(scn: &'a Scenario, cfg: &'a SimConfig) -> Self {
        Observer {
            scn,
            cfg,
            ongoing: BTreeMap::new(),
            collisions: Vec::new(),
            first_collision_step: None,
        }
    }

    fn observe(&mut self, k: usize, ego: &EgoState) -> Result<Observation> {
        let agents: Vec<AgentState> = self.scn.agent_states(k)?.into_iter().map(|(_, a)| a).collect();
        let rect = self.cfg.ego_rect(&ego.pose);
        let vel = ego.velocity();
        let min_ttc = ttc(&rect, vel, &agents, self.cfg.corridor_width);

        let mut touching = BTreeMap::new();
        for (i, a) in agents.iter().enumerate() {
            if rects_overlap(&rect, &a.rect()) {
                let body = Body::Agent { index: i };
                let fault = self.ongoing.get(&body).copied().unwrap_or_else(|| {
                    at_fault(&rect, vel, &a.rect().polygon(), a.velocity)
                });
                touching.insert(body, fault);
            }
        }
        let ego_poly = rect.polygon();
        for (i, o) in self.scn.static_obstacles.iter().enumerate() {
            if polygons_overlap(&ego_poly, o) {
                let body = Body::Static { index: i };
                let fault = self
                    .ongoing
                    .get(&body)
                    .copied()
                    .unwrap_or_else(|| at_fault(&rect, vel, o, Vec2::ZERO));
                touching.insert(body, fault);
            }
        }
        for (body, fault) in &touching {
            if !self.ongoing.contains_key(body) {
                self.collisions.push(CollisionEvent {
                    step: k,
                    t: k as f64 * DT,
                    body: *body,
                    at_fault: *fault,
                });
                self.first_collision_step.get_or_insert(k);
            }
        }
        let collided = !touching.is_empty();
        let at_fault_now = touching.values().any(|f| *f);
        self.ongoing = touching;
        Ok(Observation {
            agents,
            min_ttc,
            collided,
            at_fault: at_fault_now,
        })
    }
}

/// Executes point `idx` of a plan laid out in the frame of `origin`.
///
/// The ego never moves backwards along its current heading; the speed is the
/// central difference of the plan around the executed point.
fn execute(plan: &Trajectory, origin: &Pose, idx: usize, current: &EgoState) -> EgoState {
    let p = plan.points();
    let local_heading = current.pose.heading - origin.heading;
    let forward = Vec2::from_angle(local_heading);
    let step = p[idx] - p[idx - 1];
    if step.dot(forward) <= 0.0 {
        return EgoState {
            pose: current.pose,
            speed: 0.0,
        };
    }
    let heading = if step.norm() >= MIN_HEADING_STEP {
        step.angle()
    } else {
        local_heading
    };
    let next = p.get(idx + 1).copied().unwrap_or(p[idx] + step);
    let speed = ((next - p[idx - 1]).dot(Vec2::from_angle(heading)) / (2.0 * DT)).max(0.0);
    let pos = origin.to_world(p[idx]);
    EgoState {
        pose: Pose::new(pos.x, pos.y, origin.heading + heading),
        speed,
    }
}

/// Closed-loop rollout of a decision source and planner on a scenario.
pub fn rollout(
    scn: &Scenario,
    source: DecisionSource<'_>,
    planner: &ResidualPlanner,
    cfg: &SimConfig,
) -> Result<RolloutLog> {
    scn.validate()?;
    cfg.validate()?;
    planner.validate()?;
    let replan_every = (10 / cfg.replan_hz) as usize;
    let n = scn.frames();
    let steps = cfg.max_steps.map_or(n, |m| m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut observer = Observer::new(scn, cfg);
    let mut ego = EgoState {
        pose: scn.ego_init.pose(),
        speed: scn.ego_init.speed,
    };
    let mut frames = Vec::with_capacity(steps);
    let mut active: Option<(Trajectory, Pose, Decision, Option<DecisionProbs>)> = None;
    for k in 0..steps {
        let obs = observer.observe(k, &ego)?;
        let features = scene_features(scn, &ego, &obs.agents, cfg);
        let replanned = k % replan_every == 0;
        if replanned {
            let (decision, probs) = match source {
                DecisionSource::Argmax(p) => {
                    let (d, pr) = p.decide(&features, DecideMode::Argmax)?;
                    (d, Some(pr))
                }
                DecisionSource::Sample(p) => {
                    let (d, pr) = p.sample(&features, &mut rng)?;
                    (d, Some(pr))
                }
                DecisionSource::Fixed(d) => (d.to_coarse(), None),
            };
            let plan = planner.plan(&features, &decision)?;
            active = Some((plan, ego.pose, decision, probs));
        }
        let (plan, origin, decision, probs) = active.clone().expect("planned on the first frame");
        frames.push(FrameRecord {
            step: k,
            t: k as f64 * DT,
            pose: ego.pose,
            speed: ego.speed,
            min_ttc: obs.min_ttc,
            collided: obs.collided,
            at_fault: obs.at_fault,
            features,
            decision: Some(decision),
            probs,
            plan: Some(plan.clone()),
            plan_origin: origin,
            replanned,
        });
        let idx = k % replan_every + 1;
        ego = execute(&plan, &origin, idx, &ego);
    }
    Ok(RolloutLog {
        scenario_id: scn.id.clone(),
        dt: DT,
        frames,
        collisions: observer.collisions,
        first_collision_step: observer.first_collision_step,
        termination: if steps < n { Termination::MaxSteps } else { Termination::Completed },
    })
}

/// Replays the scenario's expert trajectory verbatim.
pub fn replay_expert(scn: &Scenario, cfg: &SimConfig) -> Result<RolloutLog> {
    scn.validate()?;
    cfg.validate()?;
    let n = scn.frames();
    let mut observer = Observer::new(scn, cfg);
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let ego = EgoState {
            pose: scn.expert_pose(k).expect("validated expert length"),
            speed: scn.expert_speed(k).expect("validated expert length"),
        };
        let obs = observer.observe(k, &ego)?;
        frames.push(FrameRecord {
            step: k,
            t: k as f64 * DT,
            pose: ego.pose,
            speed: ego.speed,
            min_ttc: obs.min_ttc,
            collided: obs.collided,
            at_fault: obs.at_fault,
            features: scene_features(scn, &ego, &obs.agents, cfg),
            decision: None,
            probs: None,
            plan: None,
            plan_origin: ego.pose,
            replanned: false,
        });
    }
    Ok(RolloutLog {
        scenario_id: scn.id.clone(),
        dt: DT,
        frames,
        collisions: observer.collisions,
        first_collision_step: observer.first_collision_step,
        termination: Termination::Completed,
    })
}
