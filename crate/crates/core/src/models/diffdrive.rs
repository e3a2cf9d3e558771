//! Differential-drive base kinematics driven by wheel speed measurements.
//!
//! Each segment integrates the unicycle `v = r (w_l + w_r) / 2`,
//! `psi_dot = r (w_r - w_l) / w` with the heading taken at the segment
//! midpoint. Process noise is additive on the pose and is scaled down by a
//! large factor while the wheels are still, so the base is held in place
//! between stationary states.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use super::planar::{dm, scalar, set_scalar, set_vec2, vec2, PlanarPose};
use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::problem::{propagate, ChainSegment, ProcessModel, StepJacobians};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffDriveParams {
    pub wheel_radius: f64,
    pub track_width: f64,
    /// Position random-walk density, m²/s.
    pub position_noise_density: f64,
    /// Heading random-walk density, rad²/s.
    pub heading_noise_density: f64,
    pub slip_noise_scale_moving: f64,
    pub slip_noise_scale_stationary: f64,
    /// Wheels count as turning when `|w_l| + |w_r|` exceeds this, rad/s.
    pub slip_threshold: f64,
}

impl Default for DiffDriveParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.1,
            track_width: 0.5,
            position_noise_density: 2.5e-3,
            heading_noise_density: 2.5e-3,
            slip_noise_scale_moving: 1.0,
            slip_noise_scale_stationary: 1e-6,
            slip_threshold: 1e-3,
        }
    }
}

impl DiffDriveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheel_radius > 0.0 && self.track_width > 0.0) {
            return Err(MheError::Configuration(
                "wheel radius and track width must be positive".into(),
            ));
        }
        if !(self.slip_noise_scale_stationary > 0.0)
            || self.slip_noise_scale_moving < self.slip_noise_scale_stationary
        {
            return Err(MheError::Configuration(
                "slip noise scales must satisfy 0 < stationary <= moving".into(),
            ));
        }
        if !(self.position_noise_density > 0.0 && self.heading_noise_density > 0.0) {
            return Err(MheError::Configuration("noise densities must be positive".into()));
        }
        Ok(())
    }

    /// Body speed and turn rate for the given wheel speeds.
    pub fn body_rates(&self, w_left: f64, w_right: f64) -> (f64, f64) {
        let r = self.wheel_radius;
        (r * (w_left + w_right) / 2.0, r * (w_right - w_left) / self.track_width)
    }

    pub fn is_moving(&self, w_left: f64, w_right: f64) -> bool {
        w_left.abs() + w_right.abs() > self.slip_threshold
    }
}

/// Integrates one midpoint step; returns the new pose.
pub fn diffdrive_step(pose: &PlanarPose, w_left: f64, w_right: f64, dt: f64, params: &DiffDriveParams) -> PlanarPose {
    let (v, omega) = params.body_rates(w_left, w_right);
    let mid = pose.heading + 0.5 * omega * dt;
    PlanarPose::new(
        pose.position.x + v * dt * mid.cos(),
        pose.position.y + v * dt * mid.sin(),
        pose.heading + omega * dt,
    )
}

/// Process model over a `[position, heading]` state portion.
/// Input: `[w_left, w_right]` in rad/s.
#[derive(Debug, Clone)]
pub struct DiffDrive {
    name: String,
    blocks: [usize; 2],
    pub params: DiffDriveParams,
}

impl DiffDrive {
    pub fn new(name: impl Into<String>, position_block: usize, heading_block: usize, params: DiffDriveParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            name: name.into(),
            blocks: [position_block, heading_block],
            params,
        })
    }
}

impl ProcessModel for DiffDrive {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn step(
        &self,
        state: &mut [ParameterBlock],
        segment: &ChainSegment,
        _statics: &[&ParameterBlock],
    ) -> Result<StepJacobians> {
        if segment.input.len() != 2 {
            return Err(MheError::DimensionMismatch {
                expected: 2,
                actual: segment.input.len(),
            });
        }
        let dt = segment.dt();
        let pose = PlanarPose::from_blocks(&state[0], &state[1])?;
        let (v, omega) = self.params.body_rates(segment.input[0], segment.input[1]);
        let mid = pose.heading + 0.5 * omega * dt;
        let next = diffdrive_step(&pose, segment.input[0], segment.input[1], dt, &self.params);
        set_vec2(&mut state[0], &next.position)?;
        set_scalar(&mut state[1], next.heading)?;

        let mut f = Matrix3::identity();
        f[(0, 2)] = -v * dt * mid.sin();
        f[(1, 2)] = v * dt * mid.cos();
        Ok(StepJacobians {
            state: dm(&f),
            noise: DMatrix::identity(3, 3),
            statics: Vec::new(),
        })
    }

    fn noise_covariance(&self, segment: &ChainSegment) -> DMatrix<f64> {
        let p = &self.params;
        let moving = segment.input.len() == 2 && p.is_moving(segment.input[0], segment.input[1]);
        let scale = if moving {
            p.slip_noise_scale_moving
        } else {
            p.slip_noise_scale_stationary
        };
        let dt = segment.dt();
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            scale * p.position_noise_density * dt,
            scale * p.position_noise_density * dt,
            scale * p.heading_noise_density * dt,
        ]))
    }
}

/// Integrates a wheel-speed sequence from `pose`, returning the predicted
/// pose and its covariance (zero at the start).
pub fn diffdrive_propagate(
    pose: &PlanarPose,
    segments: &[ChainSegment],
    params: &DiffDriveParams,
) -> Result<(PlanarPose, DMatrix<f64>)> {
    let model = DiffDrive::new("diffdrive", 0, 1, params.clone())?;
    let p = pose.position_block();
    let h = pose.heading_block();
    let prop = propagate(&model, &[&p, &h], segments, &[], None)?;
    let out = PlanarPose {
        position: vec2(&prop.predicted[0])?,
        heading: scalar(&prop.predicted[1])?,
    };
    Ok((out, prop.covariance))
}
