//! Concrete models: planar robot kinematics and sensors, plus linear fixtures.

pub mod arm;
pub mod constvel;
pub mod diffdrive;
pub mod landmark;
pub mod linear;
pub mod planar;

pub use arm::{forward_kinematics, JointOdometryUpdate};
pub use constvel::{constvel_inverse, constvel_step, ConstVel, ConstVelParams, PlanarKinematicState};
pub use diffdrive::{diffdrive_propagate, diffdrive_step, DiffDrive, DiffDriveParams};
pub use landmark::{extrinsic_statics, landmark_statics, predict_relative, LandmarkPoseUpdate};
pub use linear::{ConstantVelocity, LinearObservation, RandomWalk};
pub use planar::PlanarPose;
