//! Three-stage training: imitation pre-training, consistency-gated open-loop
//! alignment, and closed-loop alignment with bottom-up hierarchical updates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Corpus, Split};
use crate::decision::{consistency, ConsistencyRecord, ConsistencyTable, Decision};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::kinematics::{DirectionClassCoarse, SpeedClass, DT};
use crate::losses::{
    decision_nll, high_level_loss, imitation_loss, low_level_loss, stage2_loss, PenaltyGates,
};
use crate::metrics::{
    closed_loop_report, fde_ade, open_loop_collisions, ClosedLoopReport, OpenLoopAccumulator,
    OpenLoopReport,
};
use crate::policy::{
    bank_index, coefficient_grad, fit_coefficients, fit_stage1, DecideMode, DecisionPolicy,
    NavigationCommand, PolicyGrad, ResidualPlanner, Stage1Config, TrainingSample, BANK_SIZE,
    ENTRY_SIZE, N_FEATURES, PLAN_POINTS, PLAN_STEPS,
};
use crate::scenario::Scenario;
use crate::sim::{rollout, scene_features, DecisionSource, EgoState, RolloutLog, SimConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A deliberate offset added to one planner bank entry after stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub navigation: NavigationCommand,
    pub decision: Decision,
    /// Constant longitudinal acceleration (m/s^2) superimposed on the entry.
    pub longitudinal_accel: f64,
}

impl Perturbation {
    /// Keep-speed plans on straight roads that quietly accelerate.
    pub fn accelerating_keep() -> Self {
        Perturbation {
            navigation: DirectionClassCoarse::Straight,
            decision: Decision::coarse(SpeedClass::KeepSpeed, DirectionClassCoarse::Straight)
                .expect("known speed class"),
            longitudinal_accel: 1.0,
        }
    }

    pub fn apply(&self, planner: &mut ResidualPlanner) -> Result<()> {
        let residual: Vec<Vec2> = (0..PLAN_POINTS)
            .map(|i| {
                let t = i as f64 * DT;
                Vec2::new(0.5 * self.longitudinal_accel * t * t, 0.0)
            })
            .collect();
        let add = fit_coefficients(&residual)?;
        let entry = &mut planner.bank[bank_index(self.navigation, &self.decision)];
        for (c, a) in entry.iter_mut().zip(add) {
            *c += a;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing fields in a config document take their default values.
#[serde(default)]
pub struct StageConfig {
    pub seed: u64,
    /// Weight of the decision term in stage 2.
    pub gamma: f64,
    /// Weight of the low-level term in stage 3.
    pub beta: f64,
    /// Frame stride when turning expert replays into samples.
    pub sample_stride: usize,
    pub stage1: Stage1Config,
    pub stage2_epochs: usize,
    pub stage2_policy_lr: f64,
    pub stage2_planner_lr: f64,
    pub stage3_iterations: usize,
    pub stage3_policy_lr: f64,
    pub stage3_planner_lr: f64,
    /// Safety gate threshold in seconds.
    pub ttc_threshold: f64,
    /// Fraction of the reference speed below which efficiency gates fire.
    pub efficiency_factor: f64,
    /// Keep one rollout frame in this many.
    pub subsample_stride: usize,
    pub sim: SimConfig,
    pub perturbation: Option<Perturbation>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            seed: 0,
            gamma: 1.0,
            beta: 1.0,
            sample_stride: 2,
            stage1: Stage1Config::default(),
            stage2_epochs: 40,
            stage2_policy_lr: 0.5,
            stage2_planner_lr: 0.25,
            stage3_iterations: 40,
            stage3_policy_lr: 1.0,
            stage3_planner_lr: 5e-4,
            ttc_threshold: 3.0,
            efficiency_factor: 0.7,
            subsample_stride: 4,
            sim: SimConfig::default(),
            perturbation: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stage1.policy_lr", self.stage1.policy_lr),
            ("stage1.planner_lr", self.stage1.planner_lr),
            ("stage2_policy_lr", self.stage2_policy_lr),
            ("stage2_planner_lr", self.stage2_planner_lr),
            ("stage3_policy_lr", self.stage3_policy_lr),
            ("stage3_planner_lr", self.stage3_planner_lr),
            ("ttc_threshold", self.ttc_threshold),
            ("efficiency_factor", self.efficiency_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.subsample_stride == 0 || self.sample_stride == 0 {
            return Err(Error::Config("strides must be at least 1".into()));
        }
        self.sim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    /// Held-out average consistency F1 (absent when no class was scored).
    pub consistency_f1: Option<f64>,
    pub open_loop_fde: f64,
    pub open_loop_cr: f64,
    pub closed_loop_af_cr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub policy: DecisionPolicy,
    pub planner: ResidualPlanner,
    pub metrics: Option<MetricSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    stage: u8,
    arrays: Vec<NamedArray>,
    metrics: Option<MetricSnapshot>,
}

fn take_array(arrays: &[NamedArray], name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::schema("checkpoint", format!("missing array {name}")))?;
    if a.shape != shape || a.data.len() != shape.iter().product::<usize>() {
        return Err(Error::schema(
            "checkpoint",
            format!("array {name} has shape {:?} with {} values, expected {shape:?}", a.shape, a.data.len()),
        ));
    }
    Ok(a.data.clone())
}

impl Checkpoint {
    pub fn initial() -> Self {
        Checkpoint {
            stage: 0,
            policy: DecisionPolicy::default(),
            planner: ResidualPlanner::default(),
            metrics: None,
        }
    }

    fn to_doc(&self) -> CheckpointDoc {
        let arr = |name: &str, shape: Vec<usize>, data: Vec<f64>| NamedArray {
            name: name.into(),
            shape,
            data,
        };
        CheckpointDoc {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            arrays: vec![
                arr("policy.speed_weights", vec![4, N_FEATURES], self.policy.speed_weights.iter().flatten().copied().collect()),
                arr("policy.direction_weights", vec![3, N_FEATURES], self.policy.direction_weights.iter().flatten().copied().collect()),
                arr("policy.temperature", vec![1], vec![self.policy.temperature]),
                arr("planner.bank", vec![BANK_SIZE, ENTRY_SIZE], self.planner.bank.iter().flatten().copied().collect()),
            ],
            metrics: self.metrics,
        }
    }

    fn from_doc(doc: CheckpointDoc) -> Result<Self> {
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: doc.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if doc.stage > 3 {
            return Err(Error::schema("checkpoint", format!("stage tag {} outside 0..=3", doc.stage)));
        }
        let sw = take_array(&doc.arrays, "policy.speed_weights", &[4, N_FEATURES])?;
        let dw = take_array(&doc.arrays, "policy.direction_weights", &[3, N_FEATURES])?;
        let temp = take_array(&doc.arrays, "policy.temperature", &[1])?;
        let bank = take_array(&doc.arrays, "planner.bank", &[BANK_SIZE, ENTRY_SIZE])?;
        let mut policy = DecisionPolicy {
            temperature: temp[0],
            ..Default::default()
        };
        for (row, chunk) in policy.speed_weights.iter_mut().zip(sw.chunks(N_FEATURES)) {
            row.copy_from_slice(chunk);
        }
        for (row, chunk) in policy.direction_weights.iter_mut().zip(dw.chunks(N_FEATURES)) {
            row.copy_from_slice(chunk);
        }
        let planner = ResidualPlanner {
            bank: bank
                .chunks(ENTRY_SIZE)
                .map(|c| c.try_into().expect("entry-sized chunk"))
                .collect(),
        };
        policy.validate()?;
        planner.validate()?;
        Ok(Checkpoint {
            stage: doc.stage,
            policy,
            planner,
            metrics: doc.metrics,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_doc()).map_err(|e| Error::Json {
            context: "checkpoint".into(),
            source: e,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| Error::schema("checkpoint", e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_doc())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_doc(read_json(path, "checkpoint")?)
    }
}

/// Expert replay frame turned into a supervised sample.
pub fn frame_sample(scn: &Scenario, k: usize, sim: &SimConfig) -> Result<TrainingSample> {
    let pose = scn
        .expert_pose(k)
        .ok_or_else(|| Error::invalid(format!("frame {k} outside scenario {}", scn.id)))?;
    let speed = scn.expert_speed(k).unwrap_or(0.0);
    let agents: Vec<_> = scn.agent_states(k)?.into_iter().map(|(_, a)| a).collect();
    let features = scene_features(scn, &EgoState { pose, speed }, &agents, sim);
    Ok(TrainingSample {
        features,
        expert: scn.expert_future(k, PLAN_STEPS)?,
    })
}

/// Samples every `stride` frames of every scenario's expert replay.
pub fn build_dataset(scenarios: &[&Scenario], stride: usize, sim: &SimConfig) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for scn in scenarios {
        for k in (0..scn.frames()).step_by(stride.max(1)) {
            out.push(frame_sample(scn, k, sim)?);
        }
    }
    Ok(out)
}

/// Argmax decisions against the plans they condition.
pub fn consistency_records(
    policy: &DecisionPolicy,
    planner: &ResidualPlanner,
    samples: &[TrainingSample],
) -> Result<Vec<ConsistencyRecord>> {
    samples
        .iter()
        .map(|s| {
            let (d, _) = policy.decide(&s.features, DecideMode::Argmax)?;
            consistency(&planner.plan(&s.features, &d)?, &d)
        })
        .collect()
}

pub fn consistency_table(
    policy: &DecisionPolicy,
    planner: &ResidualPlanner,
    samples: &[TrainingSample],
) -> Result<ConsistencyTable> {
    Ok(ConsistencyTable::from_records(&consistency_records(policy, planner, samples)?))
}

/// What produces the open-loop plans.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    Model {
        policy: &'a DecisionPolicy,
        planner: &'a ResidualPlanner,
    },
    /// The expert future itself.
    Expert,
}

/// Open-loop metrics over the future points of plans made at every
/// `stride`-th expert frame.
pub fn evaluate_open_loop(
    source: PlanSource<'_>,
    scenarios: &[&Scenario],
    stride: usize,
    sim: &SimConfig,
) -> Result<OpenLoopReport> {
    let mut acc = OpenLoopAccumulator::default();
    for scn in scenarios {
        for k in (0..scn.frames()).step_by(stride.max(1)) {
            let sample = frame_sample(scn, k, sim)?;
            let plan = match source {
                PlanSource::Model { policy, planner } => {
                    let (d, _) = policy.decide(&sample.features, DecideMode::Argmax)?;
                    planner.plan(&sample.features, &d)?
                }
                PlanSource::Expert => sample.expert.clone(),
            };
            let future = |t: &crate::kinematics::Trajectory| -> Result<crate::kinematics::Trajectory> {
                crate::kinematics::Trajectory::new(t.points()[1..].to_vec(), t.dt(), t.t0_speed())
            };
            let (fde, ade) = fde_ade(&future(&plan)?, &future(&sample.expert)?)?;
            let origin = scn.expert_pose(k).expect("frame inside the scenario");
            acc.add(fde, ade, open_loop_collisions(&plan, &origin, scn, k, sim)?);
        }
    }
    acc.report()
}

pub fn evaluate_closed_loop(
    policy: &DecisionPolicy,
    planner: &ResidualPlanner,
    scenarios: &[&Scenario],
    sim: &SimConfig,
) -> Result<(ClosedLoopReport, Vec<RolloutLog>)> {
    let logs = scenarios
        .iter()
        .map(|s| rollout(s, DecisionSource::Argmax(policy), planner, sim))
        .collect::<Result<Vec<_>>>()?;
    Ok((closed_loop_report(&logs)?, logs))
}

pub fn snapshot(
    policy: &DecisionPolicy,
    planner: &ResidualPlanner,
    eval: &[&Scenario],
    cfg: &StageConfig,
) -> Result<MetricSnapshot> {
    let samples = build_dataset(eval, cfg.sample_stride, &cfg.sim)?;
    let table = consistency_table(policy, planner, &samples)?;
    let ol = evaluate_open_loop(PlanSource::Model { policy, planner }, eval, cfg.sample_stride, &cfg.sim)?;
    let (cl, _) = evaluate_closed_loop(policy, planner, eval, &cfg.sim)?;
    Ok(MetricSnapshot {
        consistency_f1: table.average(),
        open_loop_fde: ol.fde,
        open_loop_cr: ol.cr,
        closed_loop_af_cr: cl.af_cr,
    })
}

fn finite_or_err(stage: u8, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("stage {stage} produced a non-finite loss")))
    }
}

/// Stage 1 from zero-initialised parameters.
pub fn run_stage1(dataset: &[TrainingSample], cfg: &StageConfig) -> Result<(Checkpoint, Vec<Value>)> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::initial();
    let trace = fit_stage1(&mut ckpt.planner, &mut ckpt.policy, dataset, &cfg.stage1)?;
    ckpt.stage = 1;
    let mut reports = Vec::with_capacity(trace.policy_loss.len());
    for (i, (p, q)) in trace.policy_loss.iter().zip(&trace.planner_loss).enumerate() {
        reports.push(json!({
            "stage": 1,
            "iteration": i,
            "losses": {"decision": finite_or_err(1, *p)?, "imitation": finite_or_err(1, *q)?},
            "used": trace.used,
            "dropped": trace.dropped,
        }));
    }
    Ok((ckpt, reports))
}

/// Stage 2: samples whose argmax decision and plan already agree are left
/// alone; the rest are pulled toward the expert (planner imitation under
/// the expert's decision, plus `gamma` times the decision cross-entropy).
pub fn run_stage2(ckpt: &Checkpoint, dataset: &[TrainingSample], cfg: &StageConfig) -> Result<(Checkpoint, Vec<Value>)> {
    cfg.validate()?;
    let mut out = ckpt.clone();
    out.stage = 2;
    out.metrics = None;
    let labelled: Vec<(&TrainingSample, Decision)> = dataset
        .iter()
        .map(|s| s.label().map(|l| l.map(|d| (s, d))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if labelled.is_empty() {
        return Err(Error::invalid("stage 2 needs at least one classifiable sample"));
    }
    let mut entry_counts = vec![0usize; BANK_SIZE];
    for (s, d) in &labelled {
        entry_counts[bank_index(s.features.navigation_command, d)] += 1;
    }
    let n = labelled.len() as f64;
    let mut reports = Vec::new();
    for epoch in 0..cfg.stage2_epochs {
        let mut pgrad = PolicyGrad::default();
        let mut bank_grad = vec![[0.0; ENTRY_SIZE]; BANK_SIZE];
        let (mut consistent, mut inconsistent, mut excluded) = (0usize, 0usize, 0usize);
        let mut loss_sum = 0.0;
        for (s, d_exp) in &labelled {
            let probs = out.policy.probs(&s.features)?;
            let (d, _) = out.policy.decide(&s.features, DecideMode::Argmax)?;
            let plan = out.planner.plan(&s.features, &d)?;
            let expert_plan = out.planner.plan(&s.features, d_exp)?;
            let e2e = imitation_loss(&expert_plan, &s.expert)?;
            let vlm = decision_nll(&probs, d_exp);
            let (loss, rec) = stage2_loss(&plan, &d, &e2e, &vlm, cfg.gamma)?;
            if rec.excluded {
                excluded += 1;
                continue;
            }
            if rec.consistent {
                consistent += 1;
                continue;
            }
            inconsistent += 1;
            loss_sum += loss.value;
            let idx = bank_index(s.features.navigation_command, d_exp);
            for (a, b) in bank_grad[idx].iter_mut().zip(coefficient_grad(&loss.point_grad)?) {
                *a += b / entry_counts[idx] as f64;
            }
            if let Some(g) = loss.logit_grad {
                pgrad.add_scaled(&out.policy.weight_grad(&s.features, &g), 1.0 / n);
            }
        }
        let scored = (consistent + inconsistent).max(1) as f64;
        reports.push(json!({
            "stage": 2,
            "iteration": epoch,
            "losses": {"stage2": finite_or_err(2, loss_sum / n)?},
            "gated_fraction": consistent as f64 / scored,
            "inconsistent": inconsistent,
            "excluded": excluded,
        }));
        if inconsistent == 0 {
            continue;
        }
        out.policy.apply(&pgrad, cfg.stage2_policy_lr);
        for (entry, g) in out.planner.bank.iter_mut().zip(&bank_grad) {
            for (c, gc) in entry.iter_mut().zip(g) {
                *c -= cfg.stage2_planner_lr * gc;
            }
        }
    }
    Ok((out, reports))
}

/// Intermediate values of one stage-3 iteration, exposed for inspection.
#[derive(Debug)]
pub enum Stage3Event<'a> {
    /// Frames kept from one rollout, out of those before the first collision.
    Kept {
        iteration: usize,
        scenario_id: &'a str,
        clean_frames: usize,
        kept: usize,
    },
    /// A gated frame re-planned by the already-updated planner.
    Refined {
        iteration: usize,
        features: &'a crate::policy::SceneFeatures,
        decision: &'a Decision,
        before: &'a crate::kinematics::Trajectory,
        after: &'a crate::kinematics::Trajectory,
        planner: &'a ResidualPlanner,
    },
}

struct KeptFrame {
    features: crate::policy::SceneFeatures,
    decision: Decision,
    probs: crate::policy::DecisionProbs,
    plan: crate::kinematics::Trajectory,
    gates: PenaltyGates,
}

fn rollout_seed(seed: u64, iteration: usize, scenario: usize) -> u64 {
    seed ^ ((iteration as u64) << 32) ^ (scenario as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean expert speed over the plan window starting at frame `k`.
fn expert_window_speed(scn: &Scenario, k: usize) -> f64 {
    let pts = &scn.expert_trajectory;
    let end = (k + PLAN_STEPS).min(pts.len() - 1);
    if end <= k {
        return 0.0;
    }
    let length: f64 = pts[k..=end].windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    length / ((end - k) as f64 * DT)
}

/// Stage 3: sampled rollouts, frame filtering, then one planner step on the
/// gated longitudinal penalties followed by one policy step toward the
/// meta-actions of the refined plans.
pub fn run_stage3(
    ckpt: &Checkpoint,
    scenarios: &[&Scenario],
    cfg: &StageConfig,
    mut hook: Option<&mut dyn FnMut(&Stage3Event)>,
) -> Result<(Checkpoint, Vec<Value>)> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::invalid("stage 3 needs at least one scenario"));
    }
    let mut out = ckpt.clone();
    out.stage = 3;
    out.metrics = None;
    let mut reports = Vec::new();
    for it in 0..cfg.stage3_iterations {
        let mut kept: Vec<KeptFrame> = Vec::new();
        let (mut collisions, mut at_fault, mut speed_sum, mut speed_n) = (0usize, 0usize, 0.0, 0usize);
        for (j, scn) in scenarios.iter().enumerate() {
            let sim = SimConfig {
                seed: rollout_seed(cfg.seed, it, j),
                ..cfg.sim
            };
            let log = rollout(scn, DecisionSource::Sample(&out.policy), &out.planner, &sim)?;
            collisions += usize::from(log.collided());
            at_fault += usize::from(log.at_fault());
            speed_sum += log.frames.iter().map(|f| f.speed).sum::<f64>();
            speed_n += log.frames.len();
            let clean = log.clean_frames();
            let before = kept.len();
            for frame in clean.iter().step_by(cfg.subsample_stride) {
                let (Some(decision), Some(probs)) = (frame.decision, frame.probs) else {
                    continue;
                };
                let plan = out.planner.plan(&frame.features, &decision)?;
                let delta_v = cfg.efficiency_factor
                    * scn.speed_limit_mps.min(expert_window_speed(scn, frame.step));
                let mut gates =
                    PenaltyGates::from_indicators(&plan, frame.min_ttc, cfg.ttc_threshold, delta_v.max(1e-9))?;
                // a frame under a safety gate is never also pushed to go faster
                if gates.safety.iter().any(|g| *g) {
                    gates.efficiency.iter_mut().for_each(|g| *g = false);
                }
                kept.push(KeptFrame {
                    features: frame.features,
                    decision,
                    probs,
                    plan,
                    gates,
                });
            }
            if let Some(h) = hook.as_mut() {
                h(&Stage3Event::Kept {
                    iteration: it,
                    scenario_id: &scn.id,
                    clean_frames: clean.len(),
                    kept: kept.len() - before,
                });
            }
        }
        if kept.is_empty() {
            log::warn!("stage 3 iteration {it}: every frame was discarded, skipping");
            reports.push(json!({"stage": 3, "iteration": it, "skipped": true}));
            continue;
        }

        // low level first; each entry's step is the mean over its gated frames
        let mut entry_counts = vec![0usize; BANK_SIZE];
        for f in kept.iter().filter(|f| f.gates.any_active()) {
            entry_counts[bank_index(f.features.navigation_command, &f.decision)] += 1;
        }
        let mut bank_grad = vec![[0.0; ENTRY_SIZE]; BANK_SIZE];
        let mut low_sum = 0.0;
        let mut gated = 0usize;
        for f in &kept {
            if !f.gates.any_active() {
                continue;
            }
            gated += 1;
            let low = low_level_loss(&f.plan, &f.gates)?.scaled(cfg.beta);
            low_sum += low.value;
            let idx = bank_index(f.features.navigation_command, &f.decision);
            for (a, b) in bank_grad[idx].iter_mut().zip(coefficient_grad(&low.point_grad)?) {
                *a += b / entry_counts[idx] as f64;
            }
        }
        for (entry, g) in out.planner.bank.iter_mut().zip(&bank_grad) {
            for (c, gc) in entry.iter_mut().zip(g) {
                *c -= cfg.stage3_planner_lr * gc;
            }
        }

        // then the decision policy, against the refined plans
        let n = kept.len() as f64;
        let n_gated = gated.max(1) as f64;
        let mut pgrad = PolicyGrad::default();
        let mut high_sum = 0.0;
        let mut skipped = 0usize;
        for f in kept.iter().filter(|f| f.gates.any_active()) {
            let refined = out.planner.plan(&f.features, &f.decision)?;
            if let Some(h) = hook.as_mut() {
                h(&Stage3Event::Refined {
                    iteration: it,
                    features: &f.features,
                    decision: &f.decision,
                    before: &f.plan,
                    after: &refined,
                    planner: &out.planner,
                });
            }
            let high = high_level_loss(&f.probs, &f.decision, &refined)?;
            if high.skipped {
                skipped += 1;
                continue;
            }
            high_sum += high.value;
            if let Some(g) = high.logit_grad {
                pgrad.add_scaled(&out.policy.weight_grad(&f.features, &g), 1.0 / n_gated);
            }
        }
        out.policy.apply(&pgrad, cfg.stage3_policy_lr);

        reports.push(json!({
            "stage": 3,
            "iteration": it,
            "losses": {"low": finite_or_err(3, low_sum / n_gated)?, "high": finite_or_err(3, high_sum / n_gated)?},
            "gated_fraction": gated as f64 / n,
            "kept_frames": kept.len(),
            "high_skipped": skipped,
            "rollouts": scenarios.len(),
            "collisions": collisions,
            "at_fault": at_fault,
            "mean_speed": if speed_n > 0 { speed_sum / speed_n as f64 } else { 0.0 },
        }));
    }
    Ok((out, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stages: String,
    pub open_loop_fde: f64,
    pub open_loop_cr: f64,
    pub closed_loop_af_cr: f64,
    pub avg_f1: Option<f64>,
}

impl AblationRow {
    fn from_snapshot(stages: &str, m: &MetricSnapshot) -> Self {
        AblationRow {
            stages: stages.into(),
            open_loop_fde: m.open_loop_fde,
            open_loop_cr: m.open_loop_cr,
            closed_loop_af_cr: m.closed_loop_af_cr,
            avg_f1: m.consistency_f1,
        }
    }
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<12} | {:>14} | {:>13} | {:>16} | {:>7}\n",
        "Stages", "Open-loop FDE", "Open-loop CR", "Closed-loop AFCR", "Avg. F1"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} | {:>14.3} | {:>13.3} | {:>16.3} | {:>7}\n",
            r.stages,
            r.open_loop_fde,
            r.open_loop_cr,
            r.closed_loop_af_cr,
            r.avg_f1.map_or("-".to_string(), |v| format!("{v:.3}"))
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub reports: Vec<Vec<Value>>,
    pub ablation: Vec<AblationRow>,
}

fn splits(corpus: &Corpus) -> Result<(Vec<&Scenario>, Vec<&Scenario>)> {
    let train = corpus.split(Split::Train);
    let eval = corpus.split(Split::Eval);
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("the corpus needs nonempty train and eval splits"));
    }
    Ok((train, eval))
}

/// One stage on the corpus's train split, with metrics on its eval split.
/// Stages 2 and 3 continue from the checkpoint of the stage before.
pub fn train_stage(
    corpus: &Corpus,
    stage: u8,
    prev: Option<&Checkpoint>,
    cfg: &StageConfig,
) -> Result<(Checkpoint, Vec<Value>)> {
    cfg.validate()?;
    let (train, eval) = splits(corpus)?;
    let previous = |want: u8| -> Result<&Checkpoint> {
        match prev {
            Some(c) if c.stage == want => Ok(c),
            Some(c) => Err(Error::Config(format!(
                "stage {stage} continues from a stage-{want} checkpoint, got stage {}",
                c.stage
            ))),
            None => Err(Error::Config(format!("stage {stage} needs a stage-{want} checkpoint"))),
        }
    };
    let (mut ckpt, reports) = match stage {
        1 => {
            let dataset = build_dataset(&train, cfg.sample_stride, &cfg.sim)?;
            let (mut c, r) = run_stage1(&dataset, cfg)?;
            if let Some(p) = &cfg.perturbation {
                p.apply(&mut c.planner)?;
            }
            (c, r)
        }
        2 => {
            let dataset = build_dataset(&train, cfg.sample_stride, &cfg.sim)?;
            run_stage2(previous(1)?, &dataset, cfg)?
        }
        3 => run_stage3(previous(2)?, &train, cfg, None)?,
        other => return Err(Error::Config(format!("no training stage {other}"))),
    };
    ckpt.metrics = Some(snapshot(&ckpt.policy, &ckpt.planner, &eval, cfg)?);
    Ok((ckpt, reports))
}

/// Runs all three stages and evaluates every checkpoint on the eval split.
pub fn run_all(corpus: &Corpus, cfg: &StageConfig) -> Result<PipelineOutcome> {
    let (s1, r1) = train_stage(corpus, 1, None, cfg)?;
    let (s2, r2) = train_stage(corpus, 2, Some(&s1), cfg)?;
    let (s3, r3) = train_stage(corpus, 3, Some(&s2), cfg)?;
    let ablation = [("1", &s1), ("1+2", &s2), ("1+2+3", &s3)]
        .into_iter()
        .map(|(name, c)| AblationRow::from_snapshot(name, c.metrics.as_ref().expect("set by train_stage")))
        .collect();
    Ok(PipelineOutcome {
        checkpoints: vec![s1, s2, s3],
        reports: vec![r1, r2, r3],
        ablation,
    })
}

/// One JSON document per line.
pub fn to_jsonl(lines: &[Value]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, lines: &[Value]) -> Result<()> {
    write_atomic(path, to_jsonl(lines).as_bytes())
}
