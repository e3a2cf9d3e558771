//! Estimator wiring shared by the moving-horizon estimator and the IEKF:
//! state layout, models, statics and the initial prior, all derived from
//! the sensor set and the sensor noise.

use std::sync::Arc;

use mhe_core::engine::{Engine, EngineConfig, StateLayout};
use mhe_core::models::{
    extrinsic_statics, landmark_statics, ConstVel, ConstVelParams, DiffDrive, DiffDriveParams,
    JointOdometryUpdate, LandmarkPoseUpdate, PlanarPose,
};
use mhe_core::problem::{ProcessModel, UpdateModel};
use mhe_core::solver::SolverOptions;
use mhe_core::{ManifoldKind, ParameterBlock};

use crate::config::{Config, EstimatorConfig, SimConfig};
use crate::error::{config_error, Result};
use crate::iekf::Iekf;
use crate::sim::{source, SIGMA_FLOOR};

pub const LINKS: &str = "arm/links";
pub const BIAS: &str = "arm/bias";
pub const CAMERA: &str = "camera";

/// Indices of the state blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub position: usize,
    pub heading: usize,
    pub velocity: Option<usize>,
    pub ee_position: Option<usize>,
    pub ee_heading: Option<usize>,
}

/// A static parameter with an optional prior standard deviation per tangent
/// dimension.
#[derive(Debug, Clone)]
pub struct StaticSpec {
    pub name: String,
    pub block: ParameterBlock,
    pub prior_sigmas: Option<Vec<f64>>,
}

/// Everything an estimator needs besides the measurements.
#[derive(Clone)]
pub struct Setup {
    pub layout: StateLayout,
    pub blocks: Blocks,
    /// In priority order: the first drives state initialization.
    pub process_models: Vec<Arc<dyn ProcessModel>>,
    pub update_models: Vec<Arc<dyn UpdateModel>>,
    pub statics: Vec<StaticSpec>,
    pub spawn_sources: Vec<String>,
    pub initial_information: Vec<f64>,
}

/// Which values the statics take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticValues {
    /// Calibrations at their nominal (zero) values, active when calibrated.
    Nominal,
    /// Calibrations at their simulated true values, all inactive.
    Truth,
}

/// Wheel-speed noise expressed as differential-drive random-walk densities.
pub fn diffdrive_params(sim: &SimConfig) -> DiffDriveParams {
    let r = sim.robot.wheel_radius;
    let sw = sim.noise.wheel_speed.max(SIGMA_FLOOR);
    let dt = 1.0 / sim.process_rate;
    DiffDriveParams {
        wheel_radius: r,
        track_width: sim.robot.track_width,
        position_noise_density: 0.5 * (r * sw).powi(2) * dt,
        heading_noise_density: 2.0 * (r * sw / sim.robot.track_width).powi(2) * dt,
        ..DiffDriveParams::default()
    }
}

/// IMU noise expressed as constant-velocity noise densities.
pub fn constvel_params(sim: &SimConfig) -> ConstVelParams {
    let dt = 1.0 / sim.process_rate;
    ConstVelParams {
        gyro_noise_density: sim.noise.gyro.max(SIGMA_FLOOR).powi(2) * dt,
        accel_noise_density: sim.noise.accel.max(SIGMA_FLOOR).powi(2) * dt,
        ..ConstVelParams::default()
    }
}

impl Setup {
    pub fn new(sim: &SimConfig, est: &EstimatorConfig, landmarks: &[PlanarPose], values: StaticValues) -> Result<Self> {
        let sensors = sim.sensors;
        let mut layout = StateLayout::new(Vec::new());
        let position = layout.push("base/position", ManifoldKind::Euclidean(2));
        let heading = layout.push("base/heading", ManifoldKind::Angle);
        let velocity = sensors.imu.then(|| layout.push("base/velocity", ManifoldKind::Euclidean(2)));
        let (ee_position, ee_heading) = if sensors.has_ee() {
            (
                Some(layout.push("ee/position", ManifoldKind::Euclidean(2))),
                Some(layout.push("ee/heading", ManifoldKind::Angle)),
            )
        } else {
            (None, None)
        };
        let blocks = Blocks {
            position,
            heading,
            velocity,
            ee_position,
            ee_heading,
        };

        let mut info = Vec::new();
        for spec in &layout.blocks {
            let sigma = match spec.name.as_str() {
                "base/heading" | "ee/heading" => est.initial_heading_sigma,
                "base/velocity" => est.initial_velocity_sigma,
                _ => est.initial_position_sigma,
            };
            info.extend(std::iter::repeat_n(1.0 / (sigma * sigma), spec.kind.tangent_dim()));
        }

        let mut process_models: Vec<Arc<dyn ProcessModel>> = Vec::new();
        if sensors.wheels {
            let m = DiffDrive::new(source::WHEELS, position, heading, diffdrive_params(sim)).map_err(config_error)?;
            process_models.push(Arc::new(m));
        }
        if let Some(v) = velocity {
            let m = ConstVel::new(source::IMU, position, heading, v, constvel_params(sim)).map_err(config_error)?;
            process_models.push(Arc::new(m));
        }

        let truth = values == StaticValues::Truth;
        let mut statics = Vec::new();
        for (i, l) in landmarks.iter().enumerate() {
            let [p, h] = landmark_statics(&i.to_string());
            statics.push(StaticSpec {
                name: p,
                block: l.position_block().with_active(false),
                prior_sigmas: None,
            });
            statics.push(StaticSpec {
                name: h,
                block: l.heading_block().with_active(false),
                prior_sigmas: None,
            });
        }
        let calib_sigma = est.calibration_prior_sigma;
        let mut update_models: Vec<Arc<dyn UpdateModel>> = Vec::new();
        let mut spawn_sources = Vec::new();
        if sensors.base_tag {
            update_models.push(Arc::new(LandmarkPoseUpdate::new(source::BASE_TAG, position, heading).with_extrinsic(CAMERA)));
            spawn_sources.push(source::BASE_TAG.to_string());
            let offset = if truth { sim.robot.camera_offset } else { [0.0; 3] };
            let active = est.calibrate_extrinsic && !truth;
            let [p, h] = extrinsic_statics(CAMERA);
            statics.push(StaticSpec {
                name: p,
                block: ParameterBlock::euclidean(&offset[..2]).with_active(active),
                prior_sigmas: active.then(|| vec![calib_sigma; 2]),
            });
            statics.push(StaticSpec {
                name: h,
                block: ParameterBlock::angle(offset[2]).with_active(active),
                prior_sigmas: active.then(|| vec![calib_sigma]),
            });
        }
        if let (Some(ep), Some(eh)) = (ee_position, ee_heading) {
            if sensors.arm {
                update_models.push(Arc::new(JointOdometryUpdate::new(
                    source::ARM,
                    [position, heading],
                    [ep, eh],
                    LINKS,
                    BIAS,
                )));
                spawn_sources.push(source::ARM.to_string());
                statics.push(StaticSpec {
                    name: LINKS.into(),
                    block: ParameterBlock::euclidean(&sim.robot.links).with_active(false),
                    prior_sigmas: None,
                });
                let bias = if truth { sim.robot.joint_bias } else { [0.0; 2] };
                let active = est.calibrate_bias && !truth;
                statics.push(StaticSpec {
                    name: BIAS.into(),
                    block: ParameterBlock::euclidean(&bias).with_active(active),
                    prior_sigmas: active.then(|| vec![calib_sigma; 2]),
                });
            }
            if sensors.ee_tag {
                update_models.push(Arc::new(LandmarkPoseUpdate::new(source::EE_TAG, ep, eh)));
                spawn_sources.push(source::EE_TAG.to_string());
            }
        }
        Ok(Self {
            layout,
            blocks,
            process_models,
            update_models,
            statics,
            spawn_sources,
            initial_information: info,
        })
    }

    pub fn from_config(config: &Config, landmarks: &[PlanarPose]) -> Result<Self> {
        Self::new(&config.sim, &config.estimator, landmarks, StaticValues::Nominal)
    }

    /// Engine configuration for this setup.
    pub fn engine_config(&self, est: &EstimatorConfig, marginalize: bool) -> EngineConfig {
        EngineConfig {
            batch_size: est.batch_size,
            solver: SolverOptions {
                max_iterations: est.max_iterations,
                loss: est.loss,
                worker_count: est.threads,
                ..SolverOptions::default()
            },
            spawn_sources: self.spawn_sources.clone(),
            initial_information: self.initial_information.clone(),
            marginalize,
            ..EngineConfig::default()
        }
    }

    /// A moving-horizon engine with every model and static registered.
    pub fn engine(&self, est: &EstimatorConfig, marginalize: bool) -> Result<Engine> {
        let mut engine = Engine::new(self.engine_config(est, marginalize), self.layout.clone()).map_err(config_error)?;
        for s in &self.statics {
            match &s.prior_sigmas {
                Some(sig) => engine.add_static_with_prior(s.name.clone(), s.block.clone(), sig),
                None => engine.add_static(s.name.clone(), s.block.clone()),
            }
            .map_err(config_error)?;
        }
        for m in &self.process_models {
            engine.add_process_model(m.clone()).map_err(config_error)?;
        }
        for m in &self.update_models {
            engine.add_update_model(m.clone()).map_err(config_error)?;
        }
        Ok(engine)
    }

    /// An IEKF over the same models; statics are held at their values.
    /// Overlapping process models are a configuration error.
    pub fn iekf(&self, est: &EstimatorConfig) -> Result<Iekf> {
        let mut f = Iekf::new(self.layout.clone(), self.initial_information.clone(), est.iekf_iterations)
            .map_err(config_error)?;
        for s in &self.statics {
            f.add_static(s.name.clone(), s.block.clone());
        }
        for m in &self.process_models {
            f.add_process_model(m.clone()).map_err(config_error)?;
        }
        for m in &self.update_models {
            f.add_update_model(m.clone()).map_err(config_error)?;
        }
        Ok(f)
    }
}
