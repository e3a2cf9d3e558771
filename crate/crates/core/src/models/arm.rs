//! Joint-angle odometry of a planar 2-link arm mounted on the base.
//!
//! Relates the base pose `B` and the end-effector pose `E` of the same state
//! through forward kinematics: `E = B ∘ fk(q + bias)`. Link lengths and joint
//! biases are statics.

use nalgebra::{DVector, SMatrix, Vector2};

use super::planar::{dm, rot, scalar, skew, vec2, PlanarPose};
use crate::error::{MheError, Result};
use crate::manifold::{wrap_angle, ParameterBlock};
use crate::problem::{ModelOutput, UpdateMeasurement, UpdateModel};

/// End-effector pose in the base frame for link lengths `l` and joint angles `q`.
pub fn forward_kinematics(l: &Vector2<f64>, q: &Vector2<f64>) -> PlanarPose {
    let q12 = q[0] + q[1];
    PlanarPose::new(
        l[0] * q[0].cos() + l[1] * q12.cos(),
        l[0] * q[0].sin() + l[1] * q12.sin(),
        q12,
    )
}

/// Update model over base `[position, heading]` and end-effector
/// `[position, heading]` blocks. Payload: `[q1, q2]`.
#[derive(Debug, Clone)]
pub struct JointOdometryUpdate {
    name: String,
    blocks: [usize; 4],
    links: String,
    bias: String,
}

impl JointOdometryUpdate {
    /// `links` and `bias` name 2-dimensional Euclidean statics.
    pub fn new(
        name: impl Into<String>,
        base_blocks: [usize; 2],
        ee_blocks: [usize; 2],
        links: impl Into<String>,
        bias: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            blocks: [base_blocks[0], base_blocks[1], ee_blocks[0], ee_blocks[1]],
            links: links.into(),
            bias: bias.into(),
        }
    }
}

impl UpdateModel for JointOdometryUpdate {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        3
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn statics(&self, _meas: &UpdateMeasurement) -> Vec<String> {
        vec![self.links.clone(), self.bias.clone()]
    }

    fn error(
        &self,
        state: &[&ParameterBlock],
        statics: &[&ParameterBlock],
        meas: &UpdateMeasurement,
    ) -> Result<ModelOutput> {
        if state.len() != 4 || statics.len() != 2 || meas.payload.len() != 2 {
            return Err(MheError::DimensionMismatch {
                expected: 4,
                actual: state.len(),
            });
        }
        let bp = vec2(state[0])?;
        let bpsi = scalar(state[1])?;
        let ep = vec2(state[2])?;
        let epsi = scalar(state[3])?;
        let l = vec2(statics[0])?;
        let bias = vec2(statics[1])?;
        let q = Vector2::new(meas.payload[0], meas.payload[1]) + bias;
        let q12 = q[0] + q[1];
        let local = Vector2::new(
            l[0] * q[0].cos() + l[1] * q12.cos(),
            l[0] * q[0].sin() + l[1] * q12.sin(),
        );
        let rb = rot(bpsi);
        let pred_p = bp + rb * local;
        let pred_psi = bpsi + q12;

        let mut error = DVector::zeros(3);
        error[0] = ep.x - pred_p.x;
        error[1] = ep.y - pred_p.y;
        error[2] = wrap_angle(epsi - pred_psi);

        // d local / d q
        let mut dl_dq = nalgebra::Matrix2::zeros();
        dl_dq[(0, 0)] = -l[0] * q[0].sin() - l[1] * q12.sin();
        dl_dq[(1, 0)] = l[0] * q[0].cos() + l[1] * q12.cos();
        dl_dq[(0, 1)] = -l[1] * q12.sin();
        dl_dq[(1, 1)] = l[1] * q12.cos();
        let mut dl_dl = nalgebra::Matrix2::zeros();
        dl_dl[(0, 0)] = q[0].cos();
        dl_dl[(1, 0)] = q[0].sin();
        dl_dl[(0, 1)] = q12.cos();
        dl_dl[(1, 1)] = q12.sin();

        let mut j_bp = SMatrix::<f64, 3, 2>::zeros();
        j_bp.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-nalgebra::Matrix2::identity()));
        let mut j_bpsi = SMatrix::<f64, 3, 1>::zeros();
        j_bpsi
            .fixed_view_mut::<2, 1>(0, 0)
            .copy_from(&(-(skew() * rb * local)));
        j_bpsi[(2, 0)] = -1.0;
        let mut j_ep = SMatrix::<f64, 3, 2>::zeros();
        j_ep.fixed_view_mut::<2, 2>(0, 0).copy_from(&nalgebra::Matrix2::identity());
        let mut j_epsi = SMatrix::<f64, 3, 1>::zeros();
        j_epsi[(2, 0)] = 1.0;
        let mut j_l = SMatrix::<f64, 3, 2>::zeros();
        j_l.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-(rb * dl_dl)));
        let mut j_bias = SMatrix::<f64, 3, 2>::zeros();
        j_bias
            .fixed_view_mut::<2, 2>(0, 0)
            .copy_from(&(-(rb * dl_dq)));
        j_bias[(2, 0)] = -1.0;
        j_bias[(2, 1)] = -1.0;
        Ok(ModelOutput {
            error,
            jacobians: vec![dm(&j_bp), dm(&j_bpsi), dm(&j_ep), dm(&j_epsi), dm(&j_l), dm(&j_bias)],
        })
    }
}
