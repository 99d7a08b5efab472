//! Toy stand-ins for the dual system: a softmax decision policy over a small
//! hand-built feature basis, and a decision-conditioned residual planner.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::Decision;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::kinematics::{kinematic_map, DirectionClassCoarse, SpeedClass, Trajectory, DT};
use crate::losses::{decision_nll, imitation_loss, LogitGrad};

/// The navigation command shares the coarse direction vocabulary.
pub type NavigationCommand = DirectionClassCoarse;

/// Length of the feature basis (bias included).
pub const N_FEATURES: usize = 9;
/// Planned points after the current position.
pub const PLAN_STEPS: usize = 30;
/// Points of a plan including the current position.
pub const PLAN_POINTS: usize = PLAN_STEPS + 1;
/// Coefficients per axis of one residual bank entry.
pub const BASIS_SIZE: usize = 6;
/// Coefficients of one bank entry (longitudinal then lateral).
pub const ENTRY_SIZE: usize = 2 * BASIS_SIZE;
/// One entry per (navigation command, speed decision, direction decision).
pub const BANK_SIZE: usize = 3 * 4 * 3;

const GAP_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub ego_speed: f64,
    /// Center distance to the lead vehicle; infinite without a lead.
    pub lead_gap: f64,
    /// Positive when the ego approaches the lead.
    pub lead_closing_speed: f64,
    pub left_lane_free: bool,
    pub right_lane_free: bool,
    pub navigation_command: NavigationCommand,
    pub speed_limit: f64,
}

impl SceneFeatures {
    pub fn validate(&self) -> Result<()> {
        if !self.ego_speed.is_finite() || self.ego_speed < 0.0 {
            return Err(Error::invalid(format!("ego speed {} must be finite and nonnegative", self.ego_speed)));
        }
        if self.lead_gap.is_nan() || self.lead_gap < 0.0 {
            return Err(Error::invalid(format!("lead gap {} must be nonnegative", self.lead_gap)));
        }
        if !self.lead_closing_speed.is_finite() {
            return Err(Error::invalid("lead closing speed is not finite"));
        }
        if !self.speed_limit.is_finite() || self.speed_limit < 0.0 {
            return Err(Error::invalid(format!("speed limit {} must be finite and nonnegative", self.speed_limit)));
        }
        Ok(())
    }

    /// `[1, v/10, min(gap,100)/50, closing/10, left_free, right_free,
    /// nav_left, nav_right, limit/10]`
    pub fn basis(&self) -> [f64; N_FEATURES] {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            1.0,
            self.ego_speed / 10.0,
            self.lead_gap.min(GAP_CAP) / 50.0,
            self.lead_closing_speed / 10.0,
            flag(self.left_lane_free),
            flag(self.right_lane_free),
            flag(self.navigation_command == DirectionClassCoarse::Left),
            flag(self.navigation_command == DirectionClassCoarse::Right),
            self.speed_limit / 10.0,
        ]
    }

    /// The same scene reflected across the ego heading line.
    pub fn mirrored(&self) -> SceneFeatures {
        SceneFeatures {
            left_lane_free: self.right_lane_free,
            right_lane_free: self.left_lane_free,
            navigation_command: self.navigation_command.mirrored(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionProbs {
    /// Indexed like `SpeedClass::KNOWN`.
    pub speed: [f64; 4],
    /// Indexed like `DirectionClassCoarse::ALL`.
    pub direction: [f64; 3],
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecideMode {
    Argmax,
    Sample(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub speed_weights: [[f64; N_FEATURES]; 4],
    pub direction_weights: [[f64; N_FEATURES]; 3],
    pub temperature: f64,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            speed_weights: [[0.0; N_FEATURES]; 4],
            direction_weights: [[0.0; N_FEATURES]; 3],
            temperature: 1.0,
        }
    }
}

fn softmax<const K: usize>(logits: [f64; K], temperature: f64) -> [f64; K] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| ((z - m) / temperature).exp());
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dot(w: &[f64; N_FEATURES], x: &[f64; N_FEATURES]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl DecisionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        let finite = self
            .speed_weights
            .iter()
            .chain(self.direction_weights.iter())
            .flatten()
            .all(|w| w.is_finite());
        if !finite {
            return Err(Error::invalid("decision policy weights are not finite"));
        }
        Ok(())
    }

    pub fn logits(&self, f: &SceneFeatures) -> Result<([f64; 4], [f64; 3])> {
        f.validate()?;
        let x = f.basis();
        Ok((
            self.speed_weights.map(|w| dot(&w, &x)),
            self.direction_weights.map(|w| dot(&w, &x)),
        ))
    }

    pub fn probs(&self, f: &SceneFeatures) -> Result<DecisionProbs> {
        let (s, d) = self.logits(f)?;
        Ok(DecisionProbs {
            speed: softmax(s, self.temperature),
            direction: softmax(d, self.temperature),
            temperature: self.temperature,
        })
    }

    pub fn decide(&self, f: &SceneFeatures, mode: DecideMode) -> Result<(Decision, DecisionProbs)> {
        match mode {
            DecideMode::Argmax => {
                let p = self.probs(f)?;
                let d = Decision::coarse(
                    SpeedClass::KNOWN[argmax(&p.speed)],
                    DirectionClassCoarse::ALL[argmax(&p.direction)],
                )?;
                Ok((d, p))
            }
            DecideMode::Sample(seed) => self.sample(f, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Draws speed then direction from the policy using `rng`.
    pub fn sample(&self, f: &SceneFeatures, rng: &mut impl Rng) -> Result<(Decision, DecisionProbs)> {
        let p = self.probs(f)?;
        let s = sample_index(&p.speed, rng);
        let d = sample_index(&p.direction, rng);
        Ok((
            Decision::coarse(SpeedClass::KNOWN[s], DirectionClassCoarse::ALL[d])?,
            p,
        ))
    }

    /// Gradient of a loss w.r.t. the weights given its logit gradient.
    pub fn weight_grad(&self, f: &SceneFeatures, g: &LogitGrad) -> PolicyGrad {
        let x = f.basis();
        PolicyGrad {
            speed: g.speed.map(|gs| x.map(|xi| gs * xi)),
            direction: g.direction.map(|gd| x.map(|xi| gd * xi)),
        }
    }

    pub fn apply(&mut self, grad: &PolicyGrad, lr: f64) {
        for (w, g) in self.speed_weights.iter_mut().zip(&grad.speed) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
        for (w, g) in self.direction_weights.iter_mut().zip(&grad.direction) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
    }

    /// Policy acting on mirrored scenes: swaps left/right features and the
    /// left/right direction outputs.
    pub fn mirrored(&self) -> DecisionPolicy {
        let swap_cols = |mut w: [f64; N_FEATURES]| {
            w.swap(4, 5);
            w.swap(6, 7);
            w
        };
        let mut direction_weights = self.direction_weights.map(swap_cols);
        direction_weights.swap(
            DirectionClassCoarse::Left.index(),
            DirectionClassCoarse::Right.index(),
        );
        DecisionPolicy {
            speed_weights: self.speed_weights.map(swap_cols),
            direction_weights,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyGrad {
    pub speed: [[f64; N_FEATURES]; 4],
    pub direction: [[f64; N_FEATURES]; 3],
}

impl PolicyGrad {
    pub fn add_scaled(&mut self, o: &PolicyGrad, k: f64) {
        for (a, b) in self.speed.iter_mut().flatten().zip(o.speed.iter().flatten()) {
            *a += k * b;
        }
        for (a, b) in self.direction.iter_mut().flatten().zip(o.direction.iter().flatten()) {
            *a += k * b;
        }
    }
}

/// Residual basis sampled at the plan times: column `k` holds basis function
/// `k` at every point. The functions span `{u^2, u^3, u^4, u^5}` with
/// `u = t / 3 s` and are orthonormal under the mean over the plan points, so
/// they vanish (with zero slope) at the current position.
pub fn residual_basis() -> &'static [[f64; BASIS_SIZE]; PLAN_POINTS] {
    static BASIS: OnceLock<[[f64; BASIS_SIZE]; PLAN_POINTS]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let horizon = PLAN_STEPS as f64 * DT;
        let mut cols: Vec<Vec<f64>> = (0..BASIS_SIZE)
            .map(|k| {
                (0..PLAN_POINTS)
                    .map(|i| (i as f64 * DT / horizon).powi(k as i32 + 2))
                    .collect()
            })
            .collect();
        let inner = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / PLAN_POINTS as f64
        };
        // modified Gram-Schmidt, run twice for orthogonality to round-off
        for _ in 0..2 {
            for k in 0..BASIS_SIZE {
                for j in 0..k {
                    let proj = inner(&cols[k], &cols[j]);
                    let (head, tail) = cols.split_at_mut(k);
                    for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                        *x -= proj * y;
                    }
                }
                let norm = inner(&cols[k], &cols[k]).sqrt();
                for x in cols[k].iter_mut() {
                    *x /= norm;
                }
            }
        }
        let mut out = [[0.0; BASIS_SIZE]; PLAN_POINTS];
        for (i, row) in out.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = cols[k][i];
            }
        }
        out
    })
}

pub fn bank_index(nav: NavigationCommand, d: &Decision) -> usize {
    let s = d.speed().index().expect("decisions never carry an unknown speed");
    nav.index() * 12 + s * 3 + d.coarse_direction().index()
}

/// Inverse of [`bank_index`].
pub fn bank_condition(index: usize) -> (NavigationCommand, Decision) {
    let nav = DirectionClassCoarse::ALL[index / 12];
    let speed = SpeedClass::KNOWN[(index % 12) / 3];
    let dir = DirectionClassCoarse::ALL[index % 3];
    (nav, Decision::coarse(speed, dir).expect("known speed class"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPlanner {
    /// Per condition: longitudinal coefficients then lateral coefficients.
    pub bank: Vec<[f64; ENTRY_SIZE]>,
}

impl Default for ResidualPlanner {
    fn default() -> Self {
        ResidualPlanner {
            bank: vec![[0.0; ENTRY_SIZE]; BANK_SIZE],
        }
    }
}

/// Constant-velocity reference in the ego frame, origin included.
pub fn reference_plan(ego_speed: f64) -> Vec<Vec2> {
    (0..PLAN_POINTS)
        .map(|i| Vec2::new(ego_speed * DT * i as f64, 0.0))
        .collect()
}

/// Residual offsets of one bank entry at every plan point.
pub fn residual_offsets(entry: &[f64; ENTRY_SIZE]) -> Vec<Vec2> {
    residual_basis()
        .iter()
        .map(|row| {
            let mut r = Vec2::ZERO;
            for k in 0..BASIS_SIZE {
                r.x += entry[k] * row[k];
                r.y += entry[BASIS_SIZE + k] * row[k];
            }
            r
        })
        .collect()
}

/// Projects per-point gradients onto the coefficients of a bank entry.
pub fn coefficient_grad(point_grad: &[Vec2]) -> Result<[f64; ENTRY_SIZE]> {
    if point_grad.len() != PLAN_POINTS {
        return Err(Error::invalid(format!(
            "point gradient of length {} for a {PLAN_POINTS}-point plan",
            point_grad.len()
        )));
    }
    let mut g = [0.0; ENTRY_SIZE];
    for (row, pg) in residual_basis().iter().zip(point_grad) {
        for k in 0..BASIS_SIZE {
            g[k] += pg.x * row[k];
            g[BASIS_SIZE + k] += pg.y * row[k];
        }
    }
    Ok(g)
}

/// Least-squares coefficients of a residual (exact because the basis is
/// orthonormal under the mean inner product).
pub fn fit_coefficients(residual: &[Vec2]) -> Result<[f64; ENTRY_SIZE]> {
    let mut g = coefficient_grad(residual)?;
    for v in g.iter_mut() {
        *v /= PLAN_POINTS as f64;
    }
    Ok(g)
}

impl ResidualPlanner {
    pub fn validate(&self) -> Result<()> {
        if self.bank.len() != BANK_SIZE {
            return Err(Error::Config(format!(
                "residual bank has {} entries, expected {BANK_SIZE}",
                self.bank.len()
            )));
        }
        if self.bank.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("residual bank coefficients are not finite"));
        }
        Ok(())
    }

    pub fn entry(&self, nav: NavigationCommand, d: &Decision) -> Result<&[f64; ENTRY_SIZE]> {
        self.bank.get(bank_index(nav, d)).ok_or_else(|| {
            Error::Config(format!("no residual bank entry for {nav:?} / {d:?}"))
        })
    }

    /// Reference plus conditioned residual, in the ego frame.
    pub fn plan(&self, f: &SceneFeatures, d: &Decision) -> Result<Trajectory> {
        f.validate()?;
        let entry = self.entry(f.navigation_command, d)?;
        let points = reference_plan(f.ego_speed)
            .into_iter()
            .zip(residual_offsets(entry))
            .map(|(r, o)| r + o)
            .collect();
        Trajectory::new(points, DT, f.ego_speed)
    }

    /// Planner acting on mirrored scenes.
    pub fn mirrored(&self) -> ResidualPlanner {
        let mut bank = vec![[0.0; ENTRY_SIZE]; BANK_SIZE];
        for (i, entry) in self.bank.iter().enumerate() {
            let (nav, d) = bank_condition(i);
            let md = Decision::coarse(d.speed(), d.coarse_direction().mirrored())
                .expect("known speed class");
            let mut m = *entry;
            for c in m[BASIS_SIZE..].iter_mut() {
                *c = -*c;
            }
            bank[bank_index(nav.mirrored(), &md)] = m;
        }
        ResidualPlanner { bank }
    }
}

/// One supervised sample: scene features and the expert's next 3 s in the
/// ego frame (origin included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: SceneFeatures,
    pub expert: Trajectory,
}

impl TrainingSample {
    /// Expert decision label; `None` for unclassifiable experts.
    pub fn label(&self) -> Result<Option<Decision>> {
        let (s, d) = kinematic_map(&self.expert)?;
        if s == SpeedClass::Unknown {
            return Ok(None);
        }
        Decision::coarse(s, d).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub iterations: usize,
    pub policy_lr: f64,
    pub planner_lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 2000,
            policy_lr: 0.5,
            planner_lr: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage1Trace {
    /// Mean decision cross-entropy before each step, then after the last.
    pub policy_loss: Vec<f64>,
    /// Mean imitation loss before each step, then after the last.
    pub planner_loss: Vec<f64>,
    pub used: usize,
    pub dropped: usize,
}

/// Labels every sample with the kinematic map of its expert, drops samples
/// with an unknown speed class, and fits both components by full-batch
/// gradient descent: cross-entropy for the policy and per-condition mean
/// imitation loss for the planner bank.
pub fn fit_stage1(
    planner: &mut ResidualPlanner,
    policy: &mut DecisionPolicy,
    data: &[TrainingSample],
    cfg: &Stage1Config,
) -> Result<Stage1Trace> {
    if data.is_empty() {
        return Err(Error::invalid("stage 1 needs a nonempty dataset"));
    }
    planner.validate()?;
    policy.validate()?;
    let mut labelled = Vec::with_capacity(data.len());
    let mut dropped = 0;
    for s in data {
        if s.expert.len() != PLAN_POINTS {
            return Err(Error::invalid(format!(
                "expert futures must have {PLAN_POINTS} points, got {}",
                s.expert.len()
            )));
        }
        match s.label()? {
            Some(d) => labelled.push((s, d)),
            None => dropped += 1,
        }
    }
    if labelled.is_empty() {
        return Err(Error::invalid("every stage-1 sample has an unknown speed class"));
    }
    let mut counts = vec![0usize; BANK_SIZE];
    for (s, d) in &labelled {
        counts[bank_index(s.features.navigation_command, d)] += 1;
    }

    let n = labelled.len() as f64;
    let mut trace = Stage1Trace {
        used: labelled.len(),
        dropped,
        ..Default::default()
    };
    for step in 0..=cfg.iterations {
        let mut policy_loss = 0.0;
        let mut planner_loss = 0.0;
        let mut pgrad = PolicyGrad::default();
        let mut bank_grad = vec![[0.0; ENTRY_SIZE]; BANK_SIZE];
        for (s, d) in &labelled {
            let probs = policy.probs(&s.features)?;
            let ce = decision_nll(&probs, d);
            policy_loss += ce.value;
            if let Some(g) = ce.logit_grad {
                pgrad.add_scaled(&policy.weight_grad(&s.features, &g), 1.0 / n);
            }
            let plan = planner.plan(&s.features, d)?;
            let im = imitation_loss(&plan, &s.expert)?;
            planner_loss += im.value;
            let idx = bank_index(s.features.navigation_command, d);
            let cg = coefficient_grad(&im.point_grad)?;
            for (a, b) in bank_grad[idx].iter_mut().zip(cg) {
                *a += b / counts[idx] as f64;
            }
        }
        trace.policy_loss.push(policy_loss / n);
        trace.planner_loss.push(planner_loss / n);
        if step == cfg.iterations {
            break;
        }
        policy.apply(&pgrad, cfg.policy_lr);
        for (entry, g) in planner.bank.iter_mut().zip(&bank_grad) {
            for (c, gc) in entry.iter_mut().zip(g) {
                *c -= cfg.planner_lr * gc;
            }
        }
    }
    Ok(trace)
}
