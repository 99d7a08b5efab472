//! Plot data for rollouts: speed and mileage curves, relative-speed histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decision::relative_speed_ratio;
use crate::error::{Error, Result};
use crate::sim::RolloutLog;

pub const HIST_MAX: f64 = 2.0;
pub const HIST_STEP: f64 = 0.05;
pub const HIST_BINS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    SpeedCurve,
    MileageCurve,
    RelativeSpeedHistogram,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::SpeedCurve => "speed_curve",
            CurveKind::MileageCurve => "mileage_curve",
            CurveKind::RelativeSpeedHistogram => "relative_speed_histogram",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [CurveKind::SpeedCurve, CurveKind::MileageCurve, CurveKind::RelativeSpeedHistogram]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// One labelled curve; `x` is strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Counts for [i*0.05, (i+1)*0.05), i < 40; the last bin also takes 2.0 itself.
    pub counts: Vec<usize>,
    /// Ratios above 2.0.
    pub overflow: usize,
    /// Plans whose ratio is undefined (stationary start).
    pub undefined: usize,
    pub mean: Option<f64>,
}

impl Histogram {
    pub fn from_ratios(ratios: &[f64], undefined: usize) -> Self {
        let mut counts = vec![0; HIST_BINS];
        let mut overflow = 0;
        for r in ratios {
            if *r > HIST_MAX {
                overflow += 1;
            } else {
                counts[((r.max(0.0) / HIST_STEP) as usize).min(HIST_BINS - 1)] += 1;
            }
        }
        Histogram {
            counts,
            overflow,
            undefined,
            mean: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.overflow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveExport {
    pub kind: CurveKind,
    pub series: Vec<Series>,
    pub histogram: Option<Histogram>,
}

impl CurveExport {
    /// `series,t,<value>` rows for curves; `bin_start,bin_end,count` for
    /// histograms with a final `2,inf` overflow row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match (&self.histogram, self.kind) {
            (Some(h), _) => {
                out.push_str("bin_start,bin_end,count\n");
                for (i, c) in h.counts.iter().enumerate() {
                    let _ = writeln!(out, "{:.2},{:.2},{c}", i as f64 * HIST_STEP, (i + 1) as f64 * HIST_STEP);
                }
                let _ = writeln!(out, "{HIST_MAX:.2},inf,{}", h.overflow);
            }
            (None, kind) => {
                let value = if kind == CurveKind::MileageCurve { "mileage_m" } else { "speed_mps" };
                let _ = writeln!(out, "series,t,{value}");
                for s in &self.series {
                    for (x, y) in s.x.iter().zip(&s.y) {
                        let _ = writeln!(out, "{},{x:.1},{y}", s.label);
                    }
                }
            }
        }
        out
    }

    /// Counts that do not fit the CSV body.
    pub fn sidecar(&self) -> serde_json::Value {
        match &self.histogram {
            Some(h) => serde_json::json!({
                "kind": self.kind.name(),
                "ratios": h.total(),
                "undefined_ratios": h.undefined,
                "overflow": h.overflow,
                "mean": h.mean,
            }),
            None => serde_json::json!({"kind": self.kind.name(), "series": self.series.len()}),
        }
    }
}

fn nonempty(logs: &[RolloutLog]) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::invalid("curve export over zero rollouts"));
    }
    Ok(())
}

pub fn speed_series(log: &RolloutLog) -> Series {
    Series {
        label: log.scenario_id.clone(),
        x: log.frames.iter().map(|f| f.t).collect(),
        y: log.speeds(),
    }
}

/// Cumulative trapezoidal integral of the speed curve.
pub fn mileage_series(log: &RolloutLog) -> Series {
    let speed = speed_series(log);
    let mut y = Vec::with_capacity(speed.y.len());
    let mut acc = 0.0;
    for i in 0..speed.y.len() {
        if i > 0 {
            acc += 0.5 * (speed.y[i] + speed.y[i - 1]) * (speed.x[i] - speed.x[i - 1]);
        }
        y.push(acc);
    }
    Series { y, ..speed }
}

/// Ratios of every plan issued during the rollouts, and how many were undefined.
pub fn plan_ratios(logs: &[RolloutLog]) -> Result<(Vec<f64>, usize)> {
    let mut ratios = Vec::new();
    let mut undefined = 0;
    for log in logs {
        for f in log.frames.iter().filter(|f| f.replanned) {
            let Some(plan) = &f.plan else { continue };
            match relative_speed_ratio(plan) {
                Ok(r) => ratios.push(r),
                Err(Error::UndefinedRatio(_)) => undefined += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((ratios, undefined))
}

pub fn export_curves(logs: &[RolloutLog], kind: CurveKind) -> Result<CurveExport> {
    nonempty(logs)?;
    Ok(match kind {
        CurveKind::SpeedCurve => CurveExport {
            kind,
            series: logs.iter().map(speed_series).collect(),
            histogram: None,
        },
        CurveKind::MileageCurve => CurveExport {
            kind,
            series: logs.iter().map(mileage_series).collect(),
            histogram: None,
        },
        CurveKind::RelativeSpeedHistogram => {
            let (ratios, undefined) = plan_ratios(logs)?;
            CurveExport {
                kind,
                series: Vec::new(),
                histogram: Some(Histogram::from_ratios(&ratios, undefined)),
            }
        }
    })
}
