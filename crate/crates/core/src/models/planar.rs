//! Planar (SE(2)) helpers shared by the robot models.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};
use crate::manifold::{wrap_angle, ManifoldKind, ParameterBlock};

/// Planar rotation by `psi`.
pub fn rot(psi: f64) -> Matrix2<f64> {
    let (s, c) = psi.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Generator of planar rotations: `d rot(psi) / d psi = S rot(psi)`.
pub fn skew() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

pub(crate) fn dm<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

pub(crate) fn vec2(b: &ParameterBlock) -> Result<Vector2<f64>> {
    let v = b.value();
    if v.len() != 2 {
        return Err(MheError::DimensionMismatch {
            expected: 2,
            actual: v.len(),
        });
    }
    Ok(Vector2::new(v[0], v[1]))
}

pub(crate) fn scalar(b: &ParameterBlock) -> Result<f64> {
    let v = b.value();
    if v.len() != 1 {
        return Err(MheError::DimensionMismatch {
            expected: 1,
            actual: v.len(),
        });
    }
    Ok(v[0])
}

pub(crate) fn set_vec2(b: &mut ParameterBlock, v: &Vector2<f64>) -> Result<()> {
    b.set_value(DVector::from_column_slice(v.as_slice()))
}

pub(crate) fn set_scalar(b: &mut ParameterBlock, x: f64) -> Result<()> {
    let x = if b.kind == ManifoldKind::Angle { wrap_angle(x) } else { x };
    b.set_value(DVector::from_element(1, x))
}

/// Position and heading in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub position: Vector2<f64>,
    pub heading: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
            heading: wrap_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_blocks(position: &ParameterBlock, heading: &ParameterBlock) -> Result<Self> {
        Ok(Self {
            position: vec2(position)?,
            heading: scalar(heading)?,
        })
    }

    pub fn position_block(&self) -> ParameterBlock {
        ParameterBlock::euclidean(&[self.position.x, self.position.y])
    }

    pub fn heading_block(&self) -> ParameterBlock {
        ParameterBlock::angle(self.heading)
    }

    /// `self ∘ other`: `other` expressed in the frame of `self`, mapped out.
    pub fn compose(&self, other: &PlanarPose) -> PlanarPose {
        PlanarPose {
            position: self.position + rot(self.heading) * other.position,
            heading: wrap_angle(self.heading + other.heading),
        }
    }

    pub fn inverse(&self) -> PlanarPose {
        PlanarPose {
            position: -(rot(self.heading).transpose() * self.position),
            heading: wrap_angle(-self.heading),
        }
    }

    /// `self^{-1} ∘ other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &PlanarPose) -> PlanarPose {
        self.inverse().compose(other)
    }

    /// Tangent difference `[dp, wrap(dpsi)]` in the world frame.
    pub fn minus(&self, other: &PlanarPose) -> [f64; 3] {
        let d = self.position - other.position;
        [d.x, d.y, wrap_angle(self.heading - other.heading)]
    }
}
