//! Decision/planning consistency toolkit: kinematic meta-action mapping,
//! alignment losses, toy decision and planning policies, a 2D closed-loop
//! driving simulator, evaluation metrics and a three-stage training pipeline.

pub mod corpus;
pub mod curves;
pub mod decision;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod scenario;
pub mod sim;

pub use decision::{consistency, relative_speed_ratio, ConsistencyRecord, Decision};
pub use error::{Error, Result};
pub use geometry::{Pose, Vec2};
pub use kinematics::{kinematic_map, DirectionClassCoarse, SpeedClass, Trajectory};
