//! Planar strapdown integration of gyro and accelerometer-like inputs.
//!
//! State portion: `[position (2), heading, velocity (2)]`. Input:
//! `[omega, a_x, a_y]` with the acceleration in the body frame. Each segment
//! applies, in order,
//!
//! ```text
//! heading  += omega dt
//! velocity += R(heading) a dt
//! position += velocity dt
//! ```

use nalgebra::{DMatrix, DVector, Matrix5, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::planar::{dm, rot, scalar, set_scalar, set_vec2, skew, vec2};
use crate::error::{MheError, Result};
use crate::manifold::{wrap_angle, ParameterBlock};
use crate::problem::{ChainSegment, ProcessModel, StepJacobians};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstVelParams {
    /// Gyro white-noise density, rad²/s.
    pub gyro_noise_density: f64,
    /// Accelerometer white-noise density, (m/s²)²·s.
    pub accel_noise_density: f64,
    /// Small position random walk keeping single-step chains full rank, m²/s.
    pub position_noise_density: f64,
}

impl Default for ConstVelParams {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1e-4,
            accel_noise_density: 1e-2,
            position_noise_density: 1e-6,
        }
    }
}

/// Planar state with velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarKinematicState {
    pub position: Vector2<f64>,
    pub heading: f64,
    pub velocity: Vector2<f64>,
}

/// One semi-implicit integration step.
pub fn constvel_step(s: &PlanarKinematicState, input: &Vector3<f64>, dt: f64) -> PlanarKinematicState {
    let heading = wrap_angle(s.heading + input[0] * dt);
    let velocity = s.velocity + rot(heading) * Vector2::new(input[1], input[2]) * dt;
    PlanarKinematicState {
        position: s.position + velocity * dt,
        heading,
        velocity,
    }
}

/// Inputs that move `from` exactly to `to` in one step of length `dt`
/// (the position of `to` is assumed consistent with its velocity).
pub fn constvel_inverse(from: &PlanarKinematicState, to: &PlanarKinematicState, dt: f64) -> Vector3<f64> {
    let omega = wrap_angle(to.heading - from.heading) / dt;
    let a = rot(to.heading).transpose() * (to.velocity - from.velocity) / dt;
    Vector3::new(omega, a.x, a.y)
}

/// Process model over `[position, heading, velocity]` blocks.
#[derive(Debug, Clone)]
pub struct ConstVel {
    name: String,
    blocks: [usize; 3],
    pub params: ConstVelParams,
}

impl ConstVel {
    pub fn new(
        name: impl Into<String>,
        position_block: usize,
        heading_block: usize,
        velocity_block: usize,
        params: ConstVelParams,
    ) -> Result<Self> {
        if !(params.gyro_noise_density > 0.0
            && params.accel_noise_density > 0.0
            && params.position_noise_density > 0.0)
        {
            return Err(MheError::Configuration("noise densities must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            blocks: [position_block, heading_block, velocity_block],
            params,
        })
    }
}

impl ProcessModel for ConstVel {
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
        if segment.input.len() != 3 {
            return Err(MheError::DimensionMismatch {
                expected: 3,
                actual: segment.input.len(),
            });
        }
        let dt = segment.dt();
        let u = Vector3::new(segment.input[0], segment.input[1], segment.input[2]);
        let s = PlanarKinematicState {
            position: vec2(&state[0])?,
            heading: scalar(&state[1])?,
            velocity: vec2(&state[2])?,
        };
        let next = constvel_step(&s, &u, dt);
        set_vec2(&mut state[0], &next.position)?;
        set_scalar(&mut state[1], next.heading)?;
        set_vec2(&mut state[2], &next.velocity)?;

        // Tangent order: p (0..2), heading (2), v (3..5).
        let r = rot(next.heading);
        let a = Vector2::new(u[1], u[2]);
        let dv_dpsi = skew() * r * a * dt;
        let mut f = Matrix5::identity();
        f.fixed_view_mut::<2, 1>(3, 2).copy_from(&dv_dpsi);
        f.fixed_view_mut::<2, 1>(0, 2).copy_from(&(dv_dpsi * dt));
        f.fixed_view_mut::<2, 2>(0, 3).copy_from(&(nalgebra::Matrix2::identity() * dt));

        // Noise: [n_omega, n_a (2), n_p (2)].
        let mut g = SMatrix::<f64, 5, 5>::zeros();
        g[(2, 0)] = dt;
        let dv_domega = dv_dpsi * dt;
        g.fixed_view_mut::<2, 1>(3, 0).copy_from(&dv_domega);
        g.fixed_view_mut::<2, 1>(0, 0).copy_from(&(dv_domega * dt));
        g.fixed_view_mut::<2, 2>(3, 1).copy_from(&(r * dt));
        g.fixed_view_mut::<2, 2>(0, 1).copy_from(&(r * dt * dt));
        g.fixed_view_mut::<2, 2>(0, 3).copy_from(&nalgebra::Matrix2::identity());
        Ok(StepJacobians {
            state: dm(&f),
            noise: dm(&g),
            statics: Vec::new(),
        })
    }

    fn noise_covariance(&self, segment: &ChainSegment) -> DMatrix<f64> {
        let dt = segment.dt();
        let p = &self.params;
        if dt <= 0.0 {
            return DMatrix::zeros(5, 5);
        }
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            p.gyro_noise_density / dt,
            p.accel_noise_density / dt,
            p.accel_noise_density / dt,
            p.position_noise_density * dt,
            p.position_noise_density * dt,
        ]))
    }
}
