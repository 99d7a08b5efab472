//! Synthetic scenario corpus: seeded generation, manifest with a hash-based
//! train/eval split, and loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ConvexPolygon, OrientedRect, Pose, Vec2};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::kinematics::{kinematic_map, DirectionClassCoarse, SpeedClass, DT};
use crate::policy::PLAN_STEPS;
use crate::scenario::{frame_count, AgentScript, EgoInit, Scenario, SCENARIO_VERSION};
use crate::sim::{replay_expert, SimConfig, LANE_WIDTH};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_ATTEMPTS: usize = 20;
const CAR_LENGTH: f64 = 4.5;
const CAR_WIDTH: f64 = 1.9;
/// Integration sub-steps per 0.1 s frame for scripted motion.
const SUBSTEPS: usize = 100;
const FREE: (f64, f64) = (0.0, f64::INFINITY);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    EmptyRoad,
    SlowEgo,
    LeadFollow,
    HardBrake,
    CutIn,
    Crossing,
    LaneChangeLeft,
    LaneChangeRight,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::EmptyRoad,
        ScenarioKind::SlowEgo,
        ScenarioKind::LeadFollow,
        ScenarioKind::HardBrake,
        ScenarioKind::CutIn,
        ScenarioKind::Crossing,
        ScenarioKind::LaneChangeLeft,
        ScenarioKind::LaneChangeRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::EmptyRoad => "empty_road",
            ScenarioKind::SlowEgo => "slow_ego",
            ScenarioKind::LeadFollow => "lead_follow",
            ScenarioKind::HardBrake => "hard_brake",
            ScenarioKind::CutIn => "cut_in",
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::LaneChangeLeft => "lane_change_left",
            ScenarioKind::LaneChangeRight => "lane_change_right",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioKind> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub mix: BTreeMap<ScenarioKind, usize>,
    pub duration_s: f64,
    /// Probability of a background vehicle in each adjacent lane; 0 turns
    /// every scenario into an empty road.
    pub agent_density: f64,
    /// Probability of a parked vehicle on the shoulder.
    pub shoulder_obstacle_rate: f64,
    /// Percentage of ids assigned to the training split.
    pub train_percent: u8,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        let mix = [
            (ScenarioKind::EmptyRoad, 48),
            (ScenarioKind::SlowEgo, 12),
            (ScenarioKind::LeadFollow, 16),
            (ScenarioKind::HardBrake, 36),
            (ScenarioKind::CutIn, 36),
            (ScenarioKind::Crossing, 16),
            (ScenarioKind::LaneChangeLeft, 8),
            (ScenarioKind::LaneChangeRight, 8),
        ]
        .into_iter()
        .collect();
        GenerationParams {
            mix,
            duration_s: 15.0,
            agent_density: 0.35,
            shoulder_obstacle_rate: 0.3,
            train_percent: 80,
            seed: 7,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 1.0 && self.duration_s <= 120.0) {
            return Err(Error::invalid(format!("duration {} s outside [1, 120]", self.duration_s)));
        }
        if (frame_count(self.duration_s) as f64 * DT - self.duration_s).abs() > 1e-9 {
            return Err(Error::invalid("duration must be a multiple of 0.1 s"));
        }
        if !(0.0..=1.0).contains(&self.agent_density) {
            return Err(Error::invalid(format!("agent density {} outside [0, 1]", self.agent_density)));
        }
        if !(0.0..=1.0).contains(&self.shoulder_obstacle_rate) {
            return Err(Error::invalid("shoulder obstacle rate outside [0, 1]"));
        }
        if self.train_percent > 100 {
            return Err(Error::invalid("train percentage above 100"));
        }
        if self.mix.values().sum::<usize>() == 0 {
            return Err(Error::invalid("empty maneuver mix"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Stable split assignment from the SHA-256 of the id.
pub fn split_for(id: &str, train_percent: u8) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    if bucket < train_percent as u64 {
        Split::Train
    } else {
        Split::Eval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: ScenarioKind,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub generation: GenerationParams,
    pub scenarios: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                kind: "manifest",
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut seen = BTreeMap::new();
        for e in &self.scenarios {
            if seen.insert(e.id.as_str(), e.split).is_some() {
                return Err(Error::schema("manifest", format!("duplicate scenario id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let m: CorpusManifest = read_json(path, "manifest")?;
        m.validate()?;
        Ok(m)
    }
}

/// A manifest with its scenarios loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub scenarios: Vec<Scenario>,
}

impl Corpus {
    /// Loads `dir/manifest.json` and every scenario it references.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
        let mut scenarios = Vec::with_capacity(manifest.scenarios.len());
        for e in &manifest.scenarios {
            let scn = Scenario::load(&dir.join(&e.path))?;
            if scn.id != e.id {
                return Err(Error::schema(
                    e.path.clone(),
                    format!("file holds scenario {} but the manifest expects {}", scn.id, e.id),
                ));
            }
            scenarios.push(scn);
        }
        Ok(Corpus {
            root: dir.to_path_buf(),
            manifest,
            scenarios,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Scenario> {
        self.manifest
            .scenarios
            .iter()
            .zip(&self.scenarios)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn split_of_kinds(&self, split: Split, kinds: &[ScenarioKind]) -> Vec<&Scenario> {
        self.manifest
            .scenarios
            .iter()
            .zip(&self.scenarios)
            .filter(|(e, _)| e.split == split && kinds.contains(&e.kind))
            .map(|(_, s)| s)
            .collect()
    }
}

/// Generates every scenario of the mix in memory.
pub fn generate_scenarios(params: &GenerationParams) -> Result<Vec<(ScenarioKind, Scenario)>> {
    params.validate()?;
    let mut out = Vec::new();
    let mut index = 0u64;
    for (kind, count) in &params.mix {
        for _ in 0..*count {
            let kind = if params.agent_density == 0.0 { ScenarioKind::EmptyRoad } else { *kind };
            let id = format!("{}_{:03}", kind.name(), index);
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
            let mut last_reason = String::new();
            let mut made = None;
            for _ in 0..MAX_ATTEMPTS {
                match build(kind, &id, params, &mut rng).and_then(|s| verify(s)) {
                    Ok(s) => {
                        made = Some(s);
                        break;
                    }
                    Err(reason) => last_reason = reason,
                }
            }
            let scn = made.ok_or_else(|| Error::Generation {
                scenario: id.clone(),
                reason: format!("no valid sample in {MAX_ATTEMPTS} attempts: {last_reason}"),
            })?;
            out.push((kind, scn));
            index += 1;
        }
    }
    Ok(out)
}

/// Generates the corpus into `dir` (scenario files plus manifest).
pub fn generate_corpus(params: &GenerationParams, dir: &Path) -> Result<CorpusManifest> {
    let scenarios = generate_scenarios(params)?;
    let mut entries = Vec::with_capacity(scenarios.len());
    for (kind, scn) in &scenarios {
        let rel = format!("scenarios/{}.json", scn.id);
        let mut text = serde_json::to_string(scn).map_err(|e| Error::Json {
            context: scn.id.clone(),
            source: e,
        })?;
        text.push('\n');
        write_atomic(&dir.join(&rel), text.as_bytes())?;
        entries.push(ManifestEntry {
            id: scn.id.clone(),
            kind: *kind,
            path: rel,
            split: split_for(&scn.id, params.train_percent),
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        generation: params.clone(),
        scenarios: entries,
    };
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

type Build = std::result::Result<Scenario, String>;

fn verify(mut scn: Scenario) -> Build {
    quantize(&mut scn);
    scn.validate().map_err(|e| e.to_string())?;
    let log = replay_expert(&scn, &SimConfig::default()).map_err(|e| e.to_string())?;
    if let Some(c) = log.collisions.first() {
        return Err(format!("expert collides at t={:.1} s", c.t));
    }
    let future = scn.expert_future(0, PLAN_STEPS).map_err(|e| e.to_string())?;
    let (speed, _) = kinematic_map(&future).map_err(|e| e.to_string())?;
    if speed == SpeedClass::Unknown {
        return Err("expert is not classifiable at t=0".into());
    }
    Ok(scn)
}

fn q(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Rounds coordinates to 0.1 mm and headings to 1e-6 rad so files stay
/// compact and round-trip exactly.
fn quantize(scn: &mut Scenario) {
    const POS: f64 = 1e-4;
    const ANG: f64 = 1e-6;
    for p in scn.expert_trajectory.iter_mut() {
        *p = Vec2::new(q(p.x, POS), q(p.y, POS));
    }
    for a in scn.agents.iter_mut() {
        for w in a.waypoints.iter_mut() {
            *w = Pose::new(q(w.x, POS), q(w.y, POS), q(w.heading, ANG));
        }
    }
    for o in scn.static_obstacles.iter_mut() {
        for v in o.vertices.iter_mut() {
            *v = Vec2::new(q(v.x, POS), q(v.y, POS));
        }
    }
    scn.ego_init.speed = q(scn.ego_init.speed, POS);
    scn.speed_limit_mps = q(scn.speed_limit_mps, POS);
}

/// Longitudinal profile: piecewise-constant acceleration switched at the
/// given times, speed clamped to `[v_min, v_max]`. Returns the arclength at
/// every frame.
fn profile(v0: f64, switches: &[(f64, f64)], (v_min, v_max): (f64, f64), frames: usize) -> Vec<f64> {
    let h = DT / SUBSTEPS as f64;
    let mut s = 0.0;
    let mut v = v0;
    let mut out = vec![0.0];
    for i in 0..frames {
        for j in 0..SUBSTEPS {
            let t = (i * SUBSTEPS + j) as f64 * h;
            let a = switches
                .iter()
                .rev()
                .find(|(ts, _)| t + 1e-12 >= *ts)
                .map_or(0.0, |(_, a)| *a);
            let v_next = (v + a * h).clamp(v_min, v_max);
            s += 0.5 * (v + v_next) * h;
            v = v_next;
        }
        out.push(s);
    }
    out
}

/// `0 -> 1` with zero slope at both ends.
fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn poses_from_positions(points: &[Vec2], fallback_heading: f64) -> Vec<Pose> {
    let mut prev = fallback_heading;
    (0..points.len())
        .map(|i| {
            let d = if i + 1 < points.len() { points[i + 1] - points[i] } else { points[i] - points[i - 1] };
            if d.norm() > 1e-6 {
                prev = d.angle();
            }
            Pose::new(points[i].x, points[i].y, prev)
        })
        .collect()
}

fn agent(id: &str, points: Vec<Vec2>, heading: f64) -> AgentScript {
    AgentScript {
        id: id.into(),
        length: CAR_LENGTH,
        width: CAR_WIDTH,
        waypoints: poses_from_positions(&points, heading),
    }
}

fn lanes() -> Vec<Vec<Vec2>> {
    [-LANE_WIDTH, 0.0, LANE_WIDTH]
        .iter()
        .map(|y| vec![Vec2::new(-200.0, *y), Vec2::new(2000.0, *y)])
        .collect()
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn build(kind: ScenarioKind, id: &str, params: &GenerationParams, rng: &mut ChaCha8Rng) -> Build {
    let clip = frame_count(params.duration_s);
    let total = clip + PLAN_STEPS;
    let straight = |s: &[f64], y: f64| -> Vec<Vec2> { s.iter().map(|x| Vec2::new(*x, y)).collect() };
    let mut agents = Vec::new();
    let mut nav = DirectionClassCoarse::Straight;
    // lanes that must stay clear of background traffic (left, right)
    let mut reserved = [false, false];

    let (v0, limit, expert): (f64, f64, Vec<Vec2>) = match kind {
        ScenarioKind::EmptyRoad => {
            let v0 = u(rng, 8.0, 14.0);
            let s = profile(v0, &[], FREE, total);
            (v0, v0 + u(rng, 0.0, 2.0), straight(&s, 0.0))
        }
        ScenarioKind::SlowEgo => {
            let v0 = u(rng, 2.5, 5.0);
            let limit = u(rng, 12.0, 15.0);
            let a = u(rng, 1.2, 2.0);
            let s = profile(v0, &[(0.0, a)], (0.0, 0.9 * limit), total);
            (v0, limit, straight(&s, 0.0))
        }
        ScenarioKind::LeadFollow => {
            let v0 = u(rng, 10.0, 14.0);
            let vl = v0 - u(rng, 1.5, 3.0);
            let g0 = u(rng, 30.0, 45.0);
            let a = u(rng, 1.2, 2.0);
            let dv = v0 - vl;
            let d_des = CAR_LENGTH + (1.2 * vl).max(10.0);
            let ts = (g0 - d_des - dv * dv / (2.0 * a)) / dv;
            if ts < 0.5 {
                return Err(format!("braking would start at {ts:.2} s"));
            }
            let s = profile(v0, &[(ts, -a)], (vl, f64::INFINITY), total);
            let ls = profile(vl, &[], FREE, total);
            agents.push(agent("lead", straight(&ls.iter().map(|x| x + g0).collect::<Vec<_>>(), 0.0), 0.0));
            (v0, v0 + 1.0, straight(&s, 0.0))
        }
        ScenarioKind::HardBrake => {
            let v0 = u(rng, 10.0, 14.0);
            let g0 = u(rng, 20.0, 30.0);
            let tb = u(rng, 2.0, 5.0);
            let al = u(rng, 4.5, 6.5);
            let react = 0.4;
            let lead_stop = g0 + v0 * tb + v0 * v0 / (2.0 * al);
            let room = lead_stop - CAR_LENGTH - 2.5 - v0 * (tb + react);
            if room <= 0.0 {
                return Err("no room to stop behind the lead".into());
            }
            let ae = (v0 * v0 / (2.0 * room)).max(3.0);
            if ae > 7.5 {
                return Err(format!("expert would need {ae:.1} m/s^2"));
            }
            let s = profile(v0, &[(tb + react, -ae)], FREE, total);
            let ls = profile(v0, &[(tb, -al)], FREE, total);
            agents.push(agent("lead", straight(&ls.iter().map(|x| x + g0).collect::<Vec<_>>(), 0.0), 0.0));
            (v0, v0 + 1.0, straight(&s, 0.0))
        }
        ScenarioKind::CutIn => {
            let v0 = u(rng, 10.0, 13.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            reserved[if side > 0.0 { 0 } else { 1 }] = true;
            let g0 = u(rng, 24.0, 36.0);
            let va = v0 - u(rng, 4.0, 7.0);
            let tc = u(rng, 0.5, 2.5);
            let dur = 2.5;
            let lat = |t: f64| side * LANE_WIDTH * (1.0 - smoothstep((t - tc) / dur));
            let as_ = profile(va, &[], FREE, total);
            let apts: Vec<Vec2> = as_.iter().enumerate().map(|(i, x)| Vec2::new(g0 + x, lat(i as f64 * DT))).collect();
            // first frame at which the agent enters the ego corridor
            let corridor = (crate::sim::EGO_WIDTH + 1.0 + CAR_WIDTH) / 2.0;
            let td = (0..total).map(|i| i as f64 * DT).find(|t| lat(*t).abs() < corridor).ok_or("agent never cuts in")?;
            let t_react = td + 0.2;
            let gap = g0 + va * t_react - v0 * t_react;
            let dv = v0 - va;
            let room = gap - CAR_LENGTH - 3.0;
            if gap < 9.0 || room <= 0.5 {
                return Err(format!("cut-in gap {gap:.1} m too small"));
            }
            let ae = (dv * dv / (2.0 * room)).max(1.5);
            if ae > 7.0 {
                return Err(format!("expert would need {ae:.1} m/s^2"));
            }
            let s = profile(v0, &[(t_react, -ae)], (va, f64::INFINITY), total);
            agents.push(agent("cut_in", apts, 0.0));
            (v0, v0 + 1.0, straight(&s, 0.0))
        }
        ScenarioKind::Crossing => {
            let v0 = u(rng, 8.0, 12.0);
            let t_arrive = u(rng, 4.0, 8.0);
            let xc = v0 * t_arrive;
            let vc = u(rng, 5.0, 8.0);
            let lead_time = u(rng, 1.6, 2.4);
            let t_cross = t_arrive - lead_time;
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let apts: Vec<Vec2> = (0..=total)
                .map(|i| Vec2::new(xc, dir * vc * (i as f64 * DT - t_cross)))
                .collect();
            agents.push(agent("crossing", apts, dir * std::f64::consts::FRAC_PI_2));
            let s = profile(v0, &[], FREE, total);
            (v0, v0 + 1.0, straight(&s, 0.0))
        }
        ScenarioKind::LaneChangeLeft | ScenarioKind::LaneChangeRight => {
            let left = kind == ScenarioKind::LaneChangeLeft;
            nav = if left { DirectionClassCoarse::Left } else { DirectionClassCoarse::Right };
            reserved[if left { 0 } else { 1 }] = true;
            let side = if left { 1.0 } else { -1.0 };
            let v0 = u(rng, 6.0, 9.5);
            let dur = u(rng, 2.2, 2.6);
            let s = profile(v0, &[], FREE, total);
            let pts = s
                .iter()
                .enumerate()
                .map(|(i, x)| Vec2::new(*x, side * LANE_WIDTH * smoothstep(i as f64 * DT / dur)))
                .collect();
            (v0, v0 + 2.0, pts)
        }
    };

    for (lane, (y, reserved)) in [(LANE_WIDTH, reserved[0]), (-LANE_WIDTH, reserved[1])].into_iter().enumerate() {
        if reserved || !rng.gen_bool(params.agent_density) {
            continue;
        }
        let x0 = u(rng, -25.0, 60.0);
        let vb = (v0 + u(rng, -2.0, 2.0)).max(1.0);
        let bs = profile(vb, &[], FREE, total);
        agents.push(agent(
            &format!("background_{lane}"),
            straight(&bs.iter().map(|x| x + x0).collect::<Vec<_>>(), y),
            0.0,
        ));
    }
    let mut static_obstacles = Vec::new();
    if rng.gen_bool(params.shoulder_obstacle_rate) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = u(rng, 20.0, 150.0);
        let rect = OrientedRect::new(Vec2::new(x, side * 7.0), 0.0, CAR_LENGTH, CAR_WIDTH);
        static_obstacles.push(ConvexPolygon::new(rect.corners().to_vec()));
    }

    Ok(Scenario {
        version: SCENARIO_VERSION,
        id: id.into(),
        kind: kind.name().into(),
        duration_s: params.duration_s,
        ego_init: EgoInit {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: v0,
        },
        agents,
        static_obstacles,
        lane_centerlines: lanes(),
        navigation_command: nav,
        speed_limit_mps: limit,
        expert_trajectory: expert,
    })
}
