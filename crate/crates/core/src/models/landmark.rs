//! Relative pose of a fiducial landmark seen from a body-mounted sensor.
//!
//! The sensor sits at an optional extrinsic offset `E` on the body `B`; the
//! landmark `L` is a static pose. The measurement is `L` expressed in the
//! sensor frame: `z = (B ∘ E)^{-1} ∘ L`, as `[x, y, heading]`.

use nalgebra::{DVector, Matrix2, SMatrix, Vector2};

use super::planar::{dm, rot, scalar, skew, vec2, PlanarPose};
use crate::error::{MheError, Result};
use crate::manifold::{wrap_angle, ParameterBlock};
use crate::problem::{ModelOutput, UpdateMeasurement, UpdateModel};

/// Static block names for a landmark id.
pub fn landmark_statics(id: &str) -> [String; 2] {
    [format!("landmark/{id}/position"), format!("landmark/{id}/heading")]
}

/// Static block names for a sensor extrinsic.
pub fn extrinsic_statics(prefix: &str) -> [String; 2] {
    [format!("{prefix}/position"), format!("{prefix}/heading")]
}

/// Landmark pose in the sensor frame.
pub fn predict_relative(body: &PlanarPose, extrinsic: &PlanarPose, landmark: &PlanarPose) -> PlanarPose {
    body.compose(extrinsic).between(landmark)
}

/// Update model over a `[position, heading]` body portion. The measurement's
/// `target` names the landmark.
#[derive(Debug, Clone)]
pub struct LandmarkPoseUpdate {
    name: String,
    blocks: [usize; 2],
    extrinsic: Option<String>,
}

impl LandmarkPoseUpdate {
    pub fn new(name: impl Into<String>, position_block: usize, heading_block: usize) -> Self {
        Self {
            name: name.into(),
            blocks: [position_block, heading_block],
            extrinsic: None,
        }
    }

    /// Estimates (or holds) the sensor pose on the body through statics named
    /// `{prefix}/position` and `{prefix}/heading`.
    pub fn with_extrinsic(mut self, prefix: impl Into<String>) -> Self {
        self.extrinsic = Some(prefix.into());
        self
    }

    fn target<'a>(&self, meas: &'a UpdateMeasurement) -> Result<&'a str> {
        meas.target.as_deref().ok_or_else(|| {
            MheError::InvalidInput(format!("`{}` measurement has no landmark target", self.name))
        })
    }

    fn extrinsic_pose(&self, statics: &[&ParameterBlock]) -> Result<PlanarPose> {
        match self.extrinsic {
            Some(_) => Ok(PlanarPose::from_blocks(statics[2], statics[3])?),
            None => Ok(PlanarPose::identity()),
        }
    }
}

impl UpdateModel for LandmarkPoseUpdate {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        3
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn statics(&self, meas: &UpdateMeasurement) -> Vec<String> {
        let mut out: Vec<String> = match meas.target.as_deref() {
            Some(id) => landmark_statics(id).into(),
            None => Vec::new(),
        };
        if let Some(prefix) = &self.extrinsic {
            out.extend(extrinsic_statics(prefix));
        }
        out
    }

    fn error(
        &self,
        state: &[&ParameterBlock],
        statics: &[&ParameterBlock],
        meas: &UpdateMeasurement,
    ) -> Result<ModelOutput> {
        self.target(meas)?;
        let expected = if self.extrinsic.is_some() { 4 } else { 2 };
        if statics.len() != expected || state.len() != 2 || meas.payload.len() != 3 {
            return Err(MheError::DimensionMismatch {
                expected,
                actual: statics.len(),
            });
        }
        let p = vec2(state[0])?;
        let psi = scalar(state[1])?;
        let lp = vec2(statics[0])?;
        let lpsi = scalar(statics[1])?;
        let ext = self.extrinsic_pose(statics)?;

        let rb = rot(psi);
        let ps = p + rb * ext.position;
        let psi_s = psi + ext.heading;
        let rs = rot(psi_s);
        let d = lp - ps;
        let zp = rs.transpose() * d;
        let zpsi = wrap_angle(lpsi - psi_s);

        let u = &meas.payload;
        let mut error = DVector::zeros(3);
        error[0] = u[0] - zp.x;
        error[1] = u[1] - zp.y;
        error[2] = wrap_angle(u[2] - zpsi);

        // Jacobians of z, negated below since e = u - z.
        let s = skew();
        let dzp_dpsi_s: Vector2<f64> = -(rs.transpose() * s * d);
        let dzp_dp: Matrix2<f64> = -rs.transpose();
        let dzp_dpsi: Vector2<f64> = dzp_dpsi_s - rs.transpose() * s * rb * ext.position;

        let mut j_p = SMatrix::<f64, 3, 2>::zeros();
        j_p.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-dzp_dp));
        let mut j_psi = SMatrix::<f64, 3, 1>::zeros();
        j_psi.fixed_view_mut::<2, 1>(0, 0).copy_from(&(-dzp_dpsi));
        j_psi[(2, 0)] = 1.0;
        let mut j_lp = SMatrix::<f64, 3, 2>::zeros();
        j_lp.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-rs.transpose()));
        let mut j_lpsi = SMatrix::<f64, 3, 1>::zeros();
        j_lpsi[(2, 0)] = -1.0;
        let mut jacobians = vec![dm(&j_p), dm(&j_psi), dm(&j_lp), dm(&j_lpsi)];
        if self.extrinsic.is_some() {
            let mut j_ep = SMatrix::<f64, 3, 2>::zeros();
            j_ep.fixed_view_mut::<2, 2>(0, 0).copy_from(&(rs.transpose() * rb));
            let mut j_epsi = SMatrix::<f64, 3, 1>::zeros();
            j_epsi.fixed_view_mut::<2, 1>(0, 0).copy_from(&(-dzp_dpsi_s));
            j_epsi[(2, 0)] = 1.0;
            jacobians.push(dm(&j_ep));
            jacobians.push(dm(&j_epsi));
        }
        Ok(ModelOutput { error, jacobians })
    }

    fn seed(&self, meas: &UpdateMeasurement, statics: &[&ParameterBlock]) -> Option<Vec<(usize, DVector<f64>)>> {
        let expected = if self.extrinsic.is_some() { 4 } else { 2 };
        if statics.len() != expected || meas.payload.len() != 3 {
            return None;
        }
        let landmark = PlanarPose::from_blocks(statics[0], statics[1]).ok()?;
        let ext = self.extrinsic_pose(statics).ok()?;
        let z = PlanarPose::new(meas.payload[0], meas.payload[1], meas.payload[2]);
        let sensor = landmark.compose(&z.inverse());
        let body = sensor.compose(&ext.inverse());
        Some(vec![
            (self.blocks[0], DVector::from_column_slice(body.position.as_slice())),
            (self.blocks[1], DVector::from_element(1, body.heading)),
        ])
    }
}
