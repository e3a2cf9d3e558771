//! Simulation and estimator configuration.
//!
//! Files are TOML, or JSON when the extension is `.json`. Every field has a
//! default, so an empty file describes the default benchmark: a
//! differential-drive base snaking through a field of fiducials for 60 s,
//! wheel odometry at 100 Hz, fiducial sightings at 10 Hz and two 3 s
//! fiducial blackouts.
//!
//! ```toml
//! [sim]
//! seed = 7
//! blackouts = [[15.0, 18.0], [40.0, 43.0]]
//!
//! [sim.sensors]
//! wheels = true
//! base_tag = true
//!
//! [estimator]
//! batch_size = 8
//! loss = { kind = "huber", threshold = 1.0 }
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mhe_core::solver::Loss;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Length of the run, seconds.
    pub duration: f64,
    pub seed: u64,
    /// Rate of the process sensors (wheels, IMU), Hz.
    pub process_rate: f64,
    /// Rate of the update sensors, Hz. Must divide `process_rate`.
    pub update_rate: f64,
    pub trajectory: TrajectoryConfig,
    pub robot: RobotConfig,
    pub landmarks: LandmarkConfig,
    pub noise: NoiseConfig,
    /// Intervals `[start, end)` in which the base camera sees no fiducial.
    pub blackouts: Vec<[f64; 2]>,
    /// Fraction of update measurements corrupted with 100 times the noise.
    pub outlier_fraction: f64,
    pub sensors: SensorSet,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            seed: 1,
            process_rate: 100.0,
            update_rate: 10.0,
            trajectory: TrajectoryConfig::default(),
            robot: RobotConfig::default(),
            landmarks: LandmarkConfig::default(),
            noise: NoiseConfig::default(),
            blackouts: vec![[15.0, 18.0], [40.0, 43.0]],
            outlier_fraction: 0.0,
            sensors: SensorSet::default(),
        }
    }
}

/// Body speed `v(t) = v0 + a sin(2 pi f t)` and turn rate
/// `w(t) = b sin(2 pi g t + phase)`; joint angles `q_i(t) = m_i + c_i sin(2 pi h_i t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub speed_mean: f64,
    pub speed_amplitude: f64,
    pub speed_frequency: f64,
    pub turn_amplitude: f64,
    pub turn_frequency: f64,
    pub turn_phase: f64,
    pub joint_mean: [f64; 2],
    pub joint_amplitude: [f64; 2],
    pub joint_frequency: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            speed_mean: 0.5,
            speed_amplitude: 0.2,
            speed_frequency: 0.05,
            turn_amplitude: 0.8,
            turn_frequency: 0.08,
            turn_phase: 0.0,
            joint_mean: [0.6, 0.9],
            joint_amplitude: [0.5, 0.6],
            joint_frequency: [0.13, 0.17],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub wheel_radius: f64,
    pub track_width: f64,
    /// Arm link lengths, metres.
    pub links: [f64; 2],
    /// True joint encoder biases: the encoders read `q - bias`.
    pub joint_bias: [f64; 2],
    /// True pose `[x, y, heading]` of the base camera on the body.
    pub camera_offset: [f64; 3],
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            wheel_radius: 0.1,
            track_width: 0.5,
            links: [0.8, 0.6],
            joint_bias: [0.0, 0.0],
            camera_offset: [0.0, 0.0, 0.0],
        }
    }
}

/// Fiducial map. Without explicit poses, one fiducial is placed every
/// `spacing` seconds of the true trajectory, `lateral_offset` metres to
/// alternating sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkConfig {
    /// Explicit poses `[x, y, heading]`.
    pub poses: Vec<[f64; 3]>,
    pub spacing: f64,
    pub lateral_offset: f64,
    /// A camera sees the nearest fiducial within this range, metres.
    pub range: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            poses: Vec::new(),
            spacing: 4.0,
            lateral_offset: 2.0,
            range: 6.0,
        }
    }
}

/// Standard deviations of the simulated sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Wheel speed, rad/s.
    pub wheel_speed: f64,
    /// Gyro rate, rad/s.
    pub gyro: f64,
    /// Body acceleration, m/s².
    pub accel: f64,
    /// Fiducial relative position, metres.
    pub tag_position: f64,
    /// Fiducial relative heading, radians.
    pub tag_heading: f64,
    /// Joint encoder, radians.
    pub joint: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            wheel_speed: 0.5,
            gyro: 0.02,
            accel: 0.1,
            tag_position: 0.05,
            tag_heading: 0.05,
            joint: 0.005,
        }
    }
}

impl NoiseConfig {
    /// Noise-free sensors.
    pub fn zero() -> Self {
        Self {
            wheel_speed: 0.0,
            gyro: 0.0,
            accel: 0.0,
            tag_position: 0.0,
            tag_heading: 0.0,
            joint: 0.0,
        }
    }
}

/// Which sensors are simulated and fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSet {
    /// Wheel speeds driving the differential-drive process model.
    pub wheels: bool,
    /// Gyro and accelerometer driving the constant-velocity process model.
    pub imu: bool,
    /// Joint encoders relating base and end-effector poses.
    pub arm: bool,
    /// Base camera observing fiducials.
    pub base_tag: bool,
    /// End-effector camera observing fiducials.
    pub ee_tag: bool,
}

impl Default for SensorSet {
    fn default() -> Self {
        Self {
            wheels: true,
            imu: false,
            arm: false,
            base_tag: true,
            ee_tag: false,
        }
    }
}

const SENSOR_NAMES: [&str; 5] = ["wheels", "imu", "arm", "base_tag", "ee_tag"];

impl SensorSet {
    fn flags(&self) -> [bool; 5] {
        [self.wheels, self.imu, self.arm, self.base_tag, self.ee_tag]
    }

    pub fn has_process(&self) -> bool {
        self.wheels || self.imu
    }

    pub fn has_update(&self) -> bool {
        self.arm || self.base_tag || self.ee_tag
    }

    /// Whether states carry end-effector blocks.
    pub fn has_ee(&self) -> bool {
        self.arm || self.ee_tag
    }
}

impl fmt::Display for SensorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = SENSOR_NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        write!(f, "{}", names.join("+"))
    }
}

impl FromStr for SensorSet {
    type Err = HarnessError;

    /// Parses `wheels+base_tag`-style lists.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = SensorSet {
            wheels: false,
            imu: false,
            arm: false,
            base_tag: false,
            ee_tag: false,
        };
        for name in s.split('+').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "wheels" => set.wheels = true,
                "imu" => set.imu = true,
                "arm" => set.arm = true,
                "base_tag" => set.base_tag = true,
                "ee_tag" => set.ee_tag = true,
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown sensor `{other}`, expected one of {}",
                        SENSOR_NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Window length N of the moving-horizon estimator.
    pub batch_size: usize,
    /// Worker threads for residual evaluation.
    pub threads: usize,
    pub loss: Loss,
    pub max_iterations: usize,
    /// Standard deviations of the prior on the first state.
    pub initial_position_sigma: f64,
    pub initial_heading_sigma: f64,
    pub initial_velocity_sigma: f64,
    /// Estimate the joint encoder biases.
    pub calibrate_bias: bool,
    /// Estimate the base camera pose on the body.
    pub calibrate_extrinsic: bool,
    /// Prior standard deviation on calibrated statics around their nominal values.
    pub calibration_prior_sigma: f64,
    /// Gauss-Newton iterations of the IEKF measurement update.
    pub iekf_iterations: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            threads: 1,
            loss: Loss::None,
            max_iterations: 10,
            initial_position_sigma: 1.0,
            initial_heading_sigma: 0.5,
            initial_velocity_sigma: 1.0,
            calibrate_bias: false,
            calibrate_extrinsic: false,
            calibration_prior_sigma: 1.0,
            iekf_iterations: 5,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be non-negative, got {v}")))
    }
}

impl SimConfig {
    /// Process ticks between consecutive update ticks.
    pub fn update_every(&self) -> usize {
        (self.process_rate / self.update_rate).round() as usize
    }

    /// Number of process ticks after the initial one.
    pub fn ticks(&self) -> usize {
        (self.duration * self.process_rate).round() as usize
    }

    pub fn tick_stamp(&self, k: usize) -> f64 {
        k as f64 / self.process_rate
    }

    pub fn in_blackout(&self, t: f64) -> bool {
        self.blackouts.iter().any(|[a, b]| t >= *a && t < *b)
    }

    pub fn validate(&self) -> Result<()> {
        positive("sim.duration", self.duration)?;
        positive("sim.process_rate", self.process_rate)?;
        positive("sim.update_rate", self.update_rate)?;
        let ratio = self.process_rate / self.update_rate;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(HarnessError::Config(format!(
                "sim.process_rate ({}) must be an integer multiple of sim.update_rate ({})",
                self.process_rate, self.update_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(HarnessError::Config("sim.outlier_fraction must lie in [0, 1]".into()));
        }
        for [a, b] in &self.blackouts {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(HarnessError::Config(format!("blackout [{a}, {b}] is not an interval")));
            }
        }
        let r = &self.robot;
        positive("sim.robot.wheel_radius", r.wheel_radius)?;
        positive("sim.robot.track_width", r.track_width)?;
        positive("sim.robot.links[0]", r.links[0])?;
        positive("sim.robot.links[1]", r.links[1])?;
        let n = &self.noise;
        for (name, v) in [
            ("wheel_speed", n.wheel_speed),
            ("gyro", n.gyro),
            ("accel", n.accel),
            ("tag_position", n.tag_position),
            ("tag_heading", n.tag_heading),
            ("joint", n.joint),
        ] {
            non_negative(&format!("sim.noise.{name}"), v)?;
        }
        let l = &self.landmarks;
        positive("sim.landmarks.range", l.range)?;
        if l.poses.is_empty() {
            positive("sim.landmarks.spacing", l.spacing)?;
        }
        let t = &self.trajectory;
        for v in [
            t.speed_mean,
            t.speed_amplitude,
            t.speed_frequency,
            t.turn_amplitude,
            t.turn_frequency,
            t.turn_phase,
        ] {
            if !v.is_finite() {
                return Err(HarnessError::Config("trajectory parameters must be finite".into()));
            }
        }
        if !self.sensors.has_process() {
            return Err(HarnessError::Config("enable at least one process sensor (wheels or imu)".into()));
        }
        if !self.sensors.has_update() {
            return Err(HarnessError::Config(
                "enable at least one update sensor (arm, base_tag or ee_tag)".into(),
            ));
        }
        Ok(())
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(HarnessError::Config("estimator.batch_size must be at least 2".into()));
        }
        if self.threads == 0 || self.max_iterations == 0 || self.iekf_iterations == 0 {
            return Err(HarnessError::Config(
                "estimator.threads, max_iterations and iekf_iterations must be positive".into(),
            ));
        }
        positive("estimator.initial_position_sigma", self.initial_position_sigma)?;
        positive("estimator.initial_heading_sigma", self.initial_heading_sigma)?;
        positive("estimator.initial_velocity_sigma", self.initial_velocity_sigma)?;
        positive("estimator.calibration_prior_sigma", self.calibration_prior_sigma)?;
        if let Loss::Huber(k) = self.loss {
            positive("estimator.loss.threshold", k)?;
        }
        Ok(())
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.estimator.validate()
    }

    /// Reads and validates a TOML or JSON configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let config: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
