//! Desk-scale simulator of an X-ray guided battery sorting line.
//!
//! Electronic devices ride a conveyor through a dual-energy line-scan X-ray
//! detector. Frames are searched for devices and the batteries inside them,
//! battery-carrying devices are tracked down the belt, and a delta robot
//! picks them off at a predicted time and drops them in a bin.
//!
//! The kinematics, spline and geometry code is generic over the scalar type;
//! the aliases below fix it to `f64` (or `f32` where noted). Imaging,
//! detection, tracking and the simulation loop work in `f64`.

pub mod config;
pub mod detection;
pub mod geometry;
pub mod kinematics;
pub mod orchestrator;
pub mod protocol;
pub mod scalar;
pub mod scene;
pub mod tracking;
pub mod trajectory;
pub mod xray;

pub use config::{ConfigError, DetectorMode, NoiseKind, ScenarioConfig, VelocitySource};
pub use detection::{BoundingBox, DetectionRecord, Label, MetricsReport};
pub use kinematics::{forward_kinematics, inverse_kinematics, KinematicsError};
pub use orchestrator::{run_scenario, ScenarioReport, Simulation};
pub use protocol::{decode_message, encode_message, WireMessage};
pub use scalar::Scalar;
pub use scene::{BatteryClass, Scene};
pub use trajectory::{build_pi_path, plan_pick_place, TrajectoryError};

pub type Vec3 = geometry::Vec3<f64>;
pub type Pose = kinematics::EefPose<f64>;
pub type Joints = kinematics::JointAngles<f64>;
pub type Delta = kinematics::DeltaParams<f64>;
pub type Delta32 = kinematics::DeltaParams<f32>;
pub type PiPath = trajectory::PiPath<f64>;
pub type Spline = trajectory::PiecewiseCubicTrajectory<f64>;
pub type JointTrajectory = trajectory::JointTrajectory<f64>;
