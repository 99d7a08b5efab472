//! Training objectives with analytic gradients.
//!
//! Trajectory gradients are taken with respect to the points of the
//! differentiated trajectory (index 0 is the current ego position); logit
//! gradients with respect to the raw, pre-temperature logits of the decision
//! policy. Terms wrapped in a stop-gradient receive exactly zero gradient.

use serde::{Deserialize, Serialize};

use crate::decision::{consistency, ConsistencyRecord, Decision};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::kinematics::{kinematic_map, speeds, SpeedClass, Trajectory};
use crate::policy::DecisionProbs;

/// Probability floor used inside the high-level log-likelihood.
pub const HIGH_LEVEL_PROB_FLOOR: f64 = 1e-2;
/// Numerical floor for the plain cross-entropy.
pub const NLL_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogitGrad {
    pub speed: [f64; 4],
    pub direction: [f64; 3],
}

impl LogitGrad {
    fn scaled(&self, k: f64) -> LogitGrad {
        LogitGrad {
            speed: self.speed.map(|g| g * k),
            direction: self.direction.map(|g| g * k),
        }
    }

    fn add(&self, o: &LogitGrad) -> LogitGrad {
        let mut out = *self;
        for (a, b) in out.speed.iter_mut().zip(o.speed) {
            *a += b;
        }
        for (a, b) in out.direction.iter_mut().zip(o.direction) {
            *a += b;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    /// d loss / d trajectory point; empty when no trajectory is involved.
    pub point_grad: Vec<Vec2>,
    pub logit_grad: Option<LogitGrad>,
    /// A probability was floored inside a logarithm.
    pub clamped: bool,
    /// The sample was excluded and contributes nothing.
    pub skipped: bool,
}

impl LossValue {
    pub fn zero_like(&self) -> LossValue {
        LossValue {
            value: 0.0,
            point_grad: vec![Vec2::ZERO; self.point_grad.len()],
            logit_grad: self.logit_grad.map(|_| LogitGrad::default()),
            clamped: false,
            skipped: false,
        }
    }

    pub fn scaled(&self, k: f64) -> LossValue {
        LossValue {
            value: self.value * k,
            point_grad: self.point_grad.iter().map(|g| *g * k).collect(),
            logit_grad: self.logit_grad.map(|g| g.scaled(k)),
            clamped: self.clamped,
            skipped: self.skipped,
        }
    }

    /// Sum of two losses. Point gradients must refer to the same trajectory
    /// (or one of them must be empty).
    pub fn plus(&self, other: &LossValue) -> Result<LossValue> {
        let point_grad = match (self.point_grad.is_empty(), other.point_grad.is_empty()) {
            (true, _) => other.point_grad.clone(),
            (_, true) => self.point_grad.clone(),
            _ if self.point_grad.len() == other.point_grad.len() => self
                .point_grad
                .iter()
                .zip(&other.point_grad)
                .map(|(a, b)| *a + *b)
                .collect(),
            _ => {
                return Err(Error::invalid(format!(
                    "cannot add point gradients of lengths {} and {}",
                    self.point_grad.len(),
                    other.point_grad.len()
                )))
            }
        };
        let logit_grad = match (self.logit_grad, other.logit_grad) {
            (Some(a), Some(b)) => Some(a.add(&b)),
            (a, b) => a.or(b),
        };
        Ok(LossValue {
            value: self.value + other.value,
            point_grad,
            logit_grad,
            clamped: self.clamped || other.clamped,
            skipped: self.skipped && other.skipped,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.point_grad.iter().all(|g| g.is_finite())
            && self.logit_grad.map_or(true, |g| {
                g.speed.iter().chain(g.direction.iter()).all(|x| x.is_finite())
            })
    }
}

/// Constant-velocity reference along +x at the trajectory's initial speed.
pub fn reference_points(n: usize, speed: f64, dt: f64) -> Vec<Vec2> {
    (0..n)
        .map(|i| Vec2::new(speed * dt * i as f64, 0.0))
        .collect()
}

/// Mean over points of the squared residual error. Both residuals are taken
/// against the expert's constant-velocity reference, which therefore cancels
/// in value and gradient.
pub fn imitation_loss(planned: &Trajectory, expert: &Trajectory) -> Result<LossValue> {
    if planned.len() != expert.len() {
        return Err(Error::invalid(format!(
            "imitation loss over trajectories of length {} and {}",
            planned.len(),
            expert.len()
        )));
    }
    if (planned.dt() - expert.dt()).abs() > 1e-12 {
        return Err(Error::invalid("imitation loss over trajectories with different dt"));
    }
    let n = planned.len();
    let reference = reference_points(n, expert.t0_speed(), expert.dt());
    let mut value = 0.0;
    let mut point_grad = Vec::with_capacity(n);
    for ((p, e), r) in planned.points().iter().zip(expert.points()).zip(&reference) {
        let diff = (*p - *r) - (*e - *r);
        value += diff.norm_sq();
        point_grad.push(diff * (2.0 / n as f64));
    }
    Ok(LossValue {
        value: value / n as f64,
        point_grad,
        ..Default::default()
    })
}

pub fn decision_nll(probs: &DecisionProbs, label: &Decision) -> LossValue {
    decision_nll_floored(probs, label, NLL_PROB_FLOOR)
}

/// `-log P(speed) - log P(direction)` with probabilities floored at `floor`.
///
/// The gradient is the softmax gradient `(p - onehot) / temperature` of each
/// component whether or not the floor was hit, so a confidently wrong policy
/// still gets a bounded, informative update.
pub fn decision_nll_floored(probs: &DecisionProbs, label: &Decision, floor: f64) -> LossValue {
    let s = label
        .speed()
        .index()
        .expect("decisions never carry an unknown speed");
    let d = label.coarse_direction().index();
    let ps = probs.speed[s];
    let pd = probs.direction[d];
    let clamped = ps < floor || pd < floor;
    let value = -ps.max(floor).ln() - pd.max(floor).ln();

    let inv_t = 1.0 / probs.temperature;
    let mut grad = LogitGrad {
        speed: probs.speed.map(|p| p * inv_t),
        direction: probs.direction.map(|p| p * inv_t),
    };
    grad.speed[s] -= inv_t;
    grad.direction[d] -= inv_t;
    LossValue {
        value,
        point_grad: Vec::new(),
        logit_grad: Some(grad),
        clamped,
        skipped: false,
    }
}

/// Consistency-gated open-loop alignment loss:
/// `(1 - C(traj, d)) * (e2e + gamma * vlm)`.
///
/// Consistent samples contribute exactly zero value and gradient; samples whose
/// planned speed class is unknown are skipped the same way and flagged.
pub fn stage2_loss(
    traj: &Trajectory,
    d: &Decision,
    e2e_term: &LossValue,
    vlm_term: &LossValue,
    gamma: f64,
) -> Result<(LossValue, ConsistencyRecord)> {
    let record = consistency(traj, d)?;
    let supervised = e2e_term.plus(&vlm_term.scaled(gamma))?;
    if record.excluded {
        let mut zero = supervised.zero_like();
        zero.skipped = true;
        return Ok((zero, record));
    }
    if record.consistent {
        return Ok((supervised.zero_like(), record));
    }
    Ok((supervised, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGates {
    /// One flag per term t = 1..T-1 (pair of consecutive points).
    pub safety: Vec<bool>,
    pub efficiency: Vec<bool>,
    /// TTC threshold in seconds.
    pub ttc_threshold: f64,
    /// Speed threshold in m/s.
    pub speed_threshold: f64,
}

impl PenaltyGates {
    pub fn new(
        safety: Vec<bool>,
        efficiency: Vec<bool>,
        ttc_threshold: f64,
        speed_threshold: f64,
    ) -> Result<Self> {
        if !(ttc_threshold > 0.0) || !(speed_threshold > 0.0) {
            return Err(Error::invalid("penalty thresholds must be positive"));
        }
        if safety.len() != efficiency.len() {
            return Err(Error::invalid("safety and efficiency gates differ in length"));
        }
        Ok(PenaltyGates {
            safety,
            efficiency,
            ttc_threshold,
            speed_threshold,
        })
    }

    /// Gates for a whole planned trajectory from its scalar indicators: the
    /// frame TTC and the mean planned speed.
    pub fn from_indicators(
        traj: &Trajectory,
        ttc: f64,
        ttc_threshold: f64,
        speed_threshold: f64,
    ) -> Result<Self> {
        let n = traj.len() - 1;
        let mean_speed = speeds(traj)?.mean();
        Self::new(
            vec![ttc < ttc_threshold; n],
            vec![mean_speed < speed_threshold; n],
            ttc_threshold,
            speed_threshold,
        )
    }

    pub fn any_active(&self) -> bool {
        self.safety.iter().chain(&self.efficiency).any(|g| *g)
    }

    fn check(&self, traj: &Trajectory, which: &[bool]) -> Result<()> {
        if which.len() + 1 != traj.len() {
            return Err(Error::invalid(format!(
                "{} gates for a {}-point trajectory (expected {})",
                which.len(),
                traj.len(),
                traj.len() - 1
            )));
        }
        Ok(())
    }
}

/// `sum_t 1[ttc < d_t] |p_{t+1} - sg(p_t)|^2`: gradient reaches only the later
/// point of each gated pair, pulling it back toward its predecessor.
pub fn safety_penalty(traj: &Trajectory, gates: &PenaltyGates) -> Result<LossValue> {
    gates.check(traj, &gates.safety)?;
    let p = traj.points();
    let mut value = 0.0;
    let mut grad = vec![Vec2::ZERO; p.len()];
    for (t, _) in gates.safety.iter().enumerate().filter(|(_, g)| **g) {
        let d = p[t + 1] - p[t];
        value += d.norm_sq();
        grad[t + 1] += d * 2.0;
    }
    Ok(LossValue {
        value,
        point_grad: grad,
        ..Default::default()
    })
}

/// `sum_t 1[f_v < d_v] |p_t - sg(p_{t+1})|^2`: gradient reaches only the
/// earlier point, pushing it forward toward its successor.
pub fn efficiency_penalty(traj: &Trajectory, gates: &PenaltyGates) -> Result<LossValue> {
    gates.check(traj, &gates.efficiency)?;
    let p = traj.points();
    let mut value = 0.0;
    let mut grad = vec![Vec2::ZERO; p.len()];
    for (t, _) in gates.efficiency.iter().enumerate().filter(|(_, g)| **g) {
        let d = p[t] - p[t + 1];
        value += d.norm_sq();
        grad[t] += d * 2.0;
    }
    Ok(LossValue {
        value,
        point_grad: grad,
        ..Default::default()
    })
}

pub fn low_level_loss(traj: &Trajectory, gates: &PenaltyGates) -> Result<LossValue> {
    safety_penalty(traj, gates)?.plus(&efficiency_penalty(traj, gates)?)
}

/// Aligns the decision distribution with the meta-action of a refined plan.
///
/// Fires only when the sampled decision disagrees with the plan's class;
/// a plan whose speed class is unknown is skipped and flagged.
pub fn high_level_loss(
    probs: &DecisionProbs,
    sampled: &Decision,
    refined: &Trajectory,
) -> Result<LossValue> {
    let (speed, direction) = kinematic_map(refined)?;
    let zero = LossValue {
        logit_grad: Some(LogitGrad::default()),
        ..Default::default()
    };
    if speed == SpeedClass::Unknown {
        return Ok(LossValue {
            skipped: true,
            ..zero
        });
    }
    let target = Decision::coarse(speed, direction)?;
    if sampled.to_coarse() == target {
        return Ok(zero);
    }
    Ok(decision_nll_floored(probs, &target, HIGH_LEVEL_PROB_FLOOR))
}

/// `high + beta * low`.
pub fn stage3_loss(high: &LossValue, low: &LossValue, beta: f64) -> Result<LossValue> {
    high.plus(&low.scaled(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DirectionClassCoarse, DT};

    fn pts(v: &[(f64, f64)]) -> Trajectory {
        Trajectory::from_points(v.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).unwrap()
    }

    fn all_gates(n_terms: usize, safety: bool, efficiency: bool) -> PenaltyGates {
        PenaltyGates::new(vec![safety; n_terms], vec![efficiency; n_terms], 3.0, 5.0).unwrap()
    }

    fn probs(speed: [f64; 4], direction: [f64; 3]) -> DecisionProbs {
        DecisionProbs {
            speed,
            direction,
            temperature: 1.0,
        }
    }

    fn line(n: usize, v: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| Vec2::new(v * DT * i as f64, 0.0)).collect(), DT, v).unwrap()
    }

    #[test]
    fn imitation_examples() {
        let expert = line(30, 10.0);
        assert_eq!(imitation_loss(&expert, &expert).unwrap().value, 0.0);
        let mut shifted: Vec<Vec2> = expert.points().to_vec();
        shifted[29].x += 1.0;
        let planned = Trajectory::new(shifted, DT, 10.0).unwrap();
        let l = imitation_loss(&planned, &expert).unwrap();
        assert!((l.value - 1.0 / 30.0).abs() < 1e-12);
        assert!((l.point_grad[29].x - 2.0 / 30.0).abs() < 1e-12);
        assert!(imitation_loss(&line(10, 1.0), &expert).is_err());
    }

    #[test]
    fn nll_examples() {
        let keep = Decision::coarse(SpeedClass::KeepSpeed, DirectionClassCoarse::Straight).unwrap();
        let certain = probs([0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert_eq!(decision_nll(&certain, &keep).value, 0.0);
        let uniform_speed = probs([0.25; 4], [0.0, 0.0, 1.0]);
        assert!((decision_nll(&uniform_speed, &keep).value - 4.0_f64.ln()).abs() < 1e-12);
        let left = Decision::coarse(SpeedClass::KeepSpeed, DirectionClassCoarse::Left).unwrap();
        let half = probs([0.0, 0.0, 1.0, 0.0], [0.5, 0.5, 0.0]);
        assert!((decision_nll(&half, &left).value - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stage2_gate() {
        let traj = line(31, 10.0);
        let keep = Decision::coarse(SpeedClass::KeepSpeed, DirectionClassCoarse::Straight).unwrap();
        let acc = Decision::coarse(SpeedClass::Accelerate, DirectionClassCoarse::Straight).unwrap();
        let e2e = LossValue { value: 0.4, point_grad: vec![Vec2::new(1.0, 1.0); 31], ..Default::default() };
        let vlm = LossValue { value: 0.2, logit_grad: Some(LogitGrad { speed: [1.0; 4], direction: [1.0; 3] }), ..Default::default() };

        let (l, rec) = stage2_loss(&traj, &keep, &e2e, &vlm, 1.0).unwrap();
        assert!(rec.consistent);
        assert_eq!(l.value, 0.0);
        assert!(l.point_grad.iter().all(|g| *g == Vec2::ZERO));
        assert_eq!(l.logit_grad, Some(LogitGrad::default()));

        let (l, rec) = stage2_loss(&traj, &acc, &e2e, &vlm, 1.0).unwrap();
        assert!(!rec.consistent);
        assert!((l.value - 0.6).abs() < 1e-15);

        let (l, _) = stage2_loss(&traj, &acc, &e2e, &vlm, 0.0).unwrap();
        assert_eq!(l.value, 0.4);
        assert_eq!(l.logit_grad, Some(LogitGrad::default()));
    }

    #[test]
    fn safety_examples() {
        let t = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(safety_penalty(&t, &all_gates(2, false, false)).unwrap().value, 0.0);
        assert_eq!(safety_penalty(&t, &all_gates(2, true, false)).unwrap().value, 2.0);
        let two = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let l = safety_penalty(&two, &all_gates(1, true, false)).unwrap();
        assert_eq!(l.point_grad, vec![Vec2::ZERO, Vec2::new(2.0, 0.0)]);
        assert!(safety_penalty(&t, &all_gates(3, true, false)).is_err());
    }

    #[test]
    fn efficiency_examples() {
        let t = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(efficiency_penalty(&t, &all_gates(2, false, false)).unwrap().value, 0.0);
        let l = efficiency_penalty(&t, &all_gates(2, false, true)).unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(l.point_grad[1], Vec2::new(-2.0, 0.0));
        assert_eq!(l.point_grad[2], Vec2::ZERO);

        let still = pts(&[(0.0, 0.0); 31]);
        let gates = PenaltyGates::from_indicators(&still, f64::INFINITY, 3.0, 5.0).unwrap();
        assert!(gates.efficiency.iter().all(|g| *g));
        assert_eq!(efficiency_penalty(&still, &gates).unwrap().value, 0.0);
    }

    #[test]
    fn low_level_additivity() {
        let t = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let l = low_level_loss(&t, &all_gates(2, true, false)).unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(low_level_loss(&t, &all_gates(2, false, false)).unwrap().value, 0.0);

        let gates = PenaltyGates::new(vec![true, false], vec![false, true], 3.0, 5.0).unwrap();
        let combined = low_level_loss(&t, &gates).unwrap();
        let s = safety_penalty(&t, &gates).unwrap();
        let e = efficiency_penalty(&t, &gates).unwrap();
        assert_eq!(combined.value, s.value + e.value);
        for i in 0..3 {
            assert_eq!(combined.point_grad[i], s.point_grad[i] + e.point_grad[i]);
        }
    }

    #[test]
    fn high_level_examples() {
        let keep_plan = line(31, 10.0);
        let keep = Decision::coarse(SpeedClass::KeepSpeed, DirectionClassCoarse::Straight).unwrap();
        let p = probs([0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.8]);
        assert_eq!(high_level_loss(&p, &keep, &keep_plan).unwrap().value, 0.0);

        let brake = Trajectory::new(
            (0..31).map(|i| { let t = i as f64 * DT; Vec2::new(10.0 * t - 1.5 * t * t, 0.0) }).collect(),
            DT,
            10.0,
        )
        .unwrap();
        let uniform = probs([0.25; 4], [0.0, 0.0, 1.0]);
        let l = high_level_loss(&uniform, &keep, &brake).unwrap();
        assert!((l.value - 4.0_f64.ln()).abs() < 1e-12);

        let wrong = probs([1e-5, 1e-5, 1.0 - 3e-5, 1e-5], [0.0, 0.0, 1.0]);
        let l = high_level_loss(&wrong, &keep, &brake).unwrap();
        assert!(l.clamped);
        assert!((l.value + 0.01_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stage3_examples() {
        let z = LossValue::default();
        assert_eq!(stage3_loss(&z, &z, 1.0).unwrap().value, 0.0);
        let high = LossValue { value: 0.7, ..Default::default() };
        let low = LossValue { value: 2.0, ..Default::default() };
        assert!((stage3_loss(&high, &low, 1.0).unwrap().value - 2.7).abs() < 1e-15);
        assert_eq!(stage3_loss(&high, &low, 0.0).unwrap().value, 0.7);
    }
}
