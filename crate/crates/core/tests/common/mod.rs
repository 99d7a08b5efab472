#![allow(dead_code)]

pub mod f1_oracle;
pub mod gradient_checks;
pub mod kinematics_oracle;
pub mod sim_oracles;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use drive_align::corpus::{generate_corpus, Corpus, GenerationParams, MANIFEST_FILE};
use drive_align::geometry::Pose;
use drive_align::kinematics::{DirectionClassCoarse, DT};
use drive_align::scenario::{frame_count, AgentScript, EgoInit, Scenario, SCENARIO_VERSION};
use drive_align::Vec2;

/// The corpus shipped at the workspace root, or a default-parameter corpus
/// generated once under the target directory when it is absent.
pub fn corpus_dir() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
        if bundled.join(MANIFEST_FILE).exists() {
            return bundled;
        }
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("default-corpus");
        if !dir.join(MANIFEST_FILE).exists() {
            generate_corpus(&GenerationParams::default(), &dir).expect("default corpus generates");
        }
        dir
    })
    .clone()
}

pub fn bundled_corpus() -> Corpus {
    Corpus::load(&corpus_dir()).expect("bundled corpus loads")
}

/// Ego starting at the origin heading +x whose expert keeps `speed`.
pub fn straight_scenario(id: &str, duration_s: f64, speed: f64, agents: Vec<AgentScript>) -> Scenario {
    let n = frame_count(duration_s);
    Scenario {
        version: SCENARIO_VERSION,
        id: id.into(),
        kind: "test".into(),
        duration_s,
        ego_init: EgoInit { x: 0.0, y: 0.0, heading: 0.0, speed },
        agents,
        static_obstacles: Vec::new(),
        lane_centerlines: Vec::new(),
        navigation_command: DirectionClassCoarse::Straight,
        speed_limit_mps: 30.0,
        expert_trajectory: (0..=n).map(|k| Vec2::new(speed * DT * k as f64, 0.0)).collect(),
    }
}

/// Agent whose pose at frame `k` is `pose(k * DT)`, scripted for `frames + 1` frames.
pub fn scripted_agent(id: &str, frames: usize, length: f64, width: f64, pose: impl Fn(f64) -> Pose) -> AgentScript {
    AgentScript {
        id: id.into(),
        length,
        width,
        waypoints: (0..=frames).map(|k| pose(k as f64 * DT)).collect(),
    }
}
