//! Parameter-block manifolds and the boxplus / boxminus operators.
//!
//! Every estimated quantity lives in a [`ParameterBlock`] whose [`ManifoldKind`]
//! fixes its ambient representation and its tangent (increment) space:
//!
//! | kind             | ambient | tangent | value                         |
//! |------------------|---------|---------|-------------------------------|
//! | `Euclidean(n)`   | n       | n       | any vector                    |
//! | `UnitQuaternion` | 4       | 3       | `[w, x, y, z]`, unit norm     |
//! | `Angle`          | 1       | 1       | radians in (-pi, pi]          |
//!
//! Quaternion increments are applied on the left, `q' = exp(delta) * q`, so the
//! tangent vector is a rotation vector expressed in the global frame.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};

const QUATERNION_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManifoldKind {
    Euclidean(usize),
    UnitQuaternion,
    Angle,
}

impl ManifoldKind {
    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldKind::Euclidean(n) => *n,
            ManifoldKind::UnitQuaternion => 4,
            ManifoldKind::Angle => 1,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            ManifoldKind::Euclidean(n) => *n,
            ManifoldKind::UnitQuaternion => 3,
            ManifoldKind::Angle => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ManifoldKind::Euclidean(_) => "euclidean",
            ManifoldKind::UnitQuaternion => "unit quaternion",
            ManifoldKind::Angle => "angle",
        }
    }

    /// The identity element (zero vector, identity rotation, zero angle).
    pub fn identity(&self) -> DVector<f64> {
        match self {
            ManifoldKind::UnitQuaternion => DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            _ => DVector::zeros(self.ambient_dim()),
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        if x.len() != self.ambient_dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            ManifoldKind::Euclidean(_) => true,
            ManifoldKind::UnitQuaternion => (x.norm() - 1.0).abs() < QUATERNION_NORM_TOL,
            ManifoldKind::Angle => x[0] > -PI && x[0] <= PI,
        }
    }

    fn check_ambient(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(MheError::DimensionMismatch {
                expected: self.ambient_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_tangent(&self, delta: &DVector<f64>) -> Result<()> {
        if delta.len() != self.tangent_dim() {
            return Err(MheError::DimensionMismatch {
                expected: self.tangent_dim(),
                actual: delta.len(),
            });
        }
        Ok(())
    }

    /// `x ⊞ delta`.
    pub fn boxplus(&self, x: &DVector<f64>, delta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(x)?;
        self.check_tangent(delta)?;
        Ok(match self {
            ManifoldKind::Euclidean(_) => x + delta,
            ManifoldKind::Angle => DVector::from_element(1, wrap_angle(x[0] + delta[0])),
            ManifoldKind::UnitQuaternion => {
                let q = quat_from_slice(x.as_slice());
                let increment = so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
                quat_to_vector(&(increment * q).normalize())
            }
        })
    }

    /// `y ⊟ x`, the tangent vector taking `x` to `y`.
    pub fn boxminus(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(y)?;
        self.check_ambient(x)?;
        Ok(match self {
            ManifoldKind::Euclidean(_) => y - x,
            ManifoldKind::Angle => DVector::from_element(1, wrap_angle(y[0] - x[0])),
            ManifoldKind::UnitQuaternion => {
                let rel = relative_rotation(y, x);
                let v = so3_log(&rel);
                DVector::from_column_slice(v.as_slice())
            }
        })
    }

    /// Jacobians of `y ⊟ x` with respect to left tangent perturbations of `y`
    /// and of `x`.
    pub fn boxminus_jacobians(
        &self,
        y: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_ambient(y)?;
        self.check_ambient(x)?;
        let n = self.tangent_dim();
        Ok(match self {
            ManifoldKind::Euclidean(_) | ManifoldKind::Angle => {
                (DMatrix::identity(n, n), -DMatrix::identity(n, n))
            }
            ManifoldKind::UnitQuaternion => {
                let r = so3_log(&relative_rotation(y, x));
                let d_y = so3_left_jacobian_inv(&r);
                let d_x = -so3_left_jacobian_inv(&(-r));
                (
                    DMatrix::from_column_slice(3, 3, d_y.as_slice()),
                    DMatrix::from_column_slice(3, 3, d_x.as_slice()),
                )
            }
        })
    }

    /// Projects a nearly-valid value back onto the manifold.
    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ManifoldKind::Euclidean(_) => x.clone(),
            ManifoldKind::Angle => DVector::from_element(1, wrap_angle(x[0])),
            ManifoldKind::UnitQuaternion => x.normalize(),
        }
    }
}

/// A manifold-valued estimated quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub kind: ManifoldKind,
    value: DVector<f64>,
    pub active: bool,
}

impl ParameterBlock {
    pub fn new(kind: ManifoldKind, value: DVector<f64>) -> Result<Self> {
        if !kind.contains(&value) {
            if value.len() != kind.ambient_dim() {
                return Err(MheError::DimensionMismatch {
                    expected: kind.ambient_dim(),
                    actual: value.len(),
                });
            }
            return Err(MheError::InvalidValue {
                manifold: kind.name(),
            });
        }
        Ok(Self {
            kind,
            value,
            active: true,
        })
    }

    pub fn euclidean(values: &[f64]) -> Self {
        Self {
            kind: ManifoldKind::Euclidean(values.len()),
            value: DVector::from_column_slice(values),
            active: true,
        }
    }

    pub fn angle(radians: f64) -> Self {
        Self {
            kind: ManifoldKind::Angle,
            value: DVector::from_element(1, wrap_angle(radians)),
            active: true,
        }
    }

    pub fn identity(kind: ManifoldKind) -> Self {
        Self {
            kind,
            value: kind.identity(),
            active: true,
        }
    }

    pub fn with_active(mut self, active: bool) -> Self {
        self.active = active;
        self
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn tangent_dim(&self) -> usize {
        self.kind.tangent_dim()
    }

    pub fn set_value(&mut self, value: DVector<f64>) -> Result<()> {
        let checked = ParameterBlock::new(self.kind, value)?;
        self.value = checked.value;
        Ok(())
    }

    /// Applies `self ⊞ delta` in place. Inactive blocks are left untouched.
    pub fn increment(&mut self, delta: &DVector<f64>) -> Result<()> {
        if !self.active {
            return Ok(());
        }
        self.value = self.kind.boxplus(&self.value, delta)?;
        Ok(())
    }

    /// `self ⊟ other`.
    pub fn minus(&self, other: &ParameterBlock) -> Result<DVector<f64>> {
        if self.kind != other.kind {
            return Err(MheError::InvalidInput(format!(
                "boxminus between {:?} and {:?}",
                self.kind, other.kind
            )));
        }
        self.kind.boxminus(&self.value, &other.value)
    }

    /// Value of `self ⊞ delta` without modifying the block.
    pub fn plus(&self, delta: &DVector<f64>) -> Result<ParameterBlock> {
        Ok(ParameterBlock {
            kind: self.kind,
            value: self.kind.boxplus(&self.value, delta)?,
            active: self.active,
        })
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

fn quat_from_slice(v: &[f64]) -> Quaternion<f64> {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

fn quat_to_vector(q: &Quaternion<f64>) -> DVector<f64> {
    DVector::from_vec(vec![q.w, q.i, q.j, q.k])
}

/// `y * x^-1` with the sign chosen so that the scalar part is non-negative.
fn relative_rotation(y: &DVector<f64>, x: &DVector<f64>) -> Quaternion<f64> {
    let qy = quat_from_slice(y.as_slice());
    let qx = quat_from_slice(x.as_slice());
    let rel = qy * qx.conjugate();
    if rel.w < 0.0 {
        -rel
    } else {
        rel
    }
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn so3_exp(phi: &Vector3<f64>) -> Quaternion<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    let (scale, w) = if theta < 1e-8 {
        (0.5 - theta * theta / 48.0, 1.0 - theta * theta / 8.0)
    } else {
        (half.sin() / theta, half.cos())
    };
    Quaternion::new(w, phi.x * scale, phi.y * scale, phi.z * scale)
}

/// Logarithm of a unit quaternion with non-negative scalar part.
pub fn so3_log(q: &Quaternion<f64>) -> Vector3<f64> {
    let v = Vector3::new(q.i, q.j, q.k);
    let n = v.norm();
    if n < 1e-8 {
        // 2 * atan2(n, w) / n ~ 2 / w for tiny n
        return v * (2.0 / q.w);
    }
    let theta = 2.0 * n.atan2(q.w);
    v * (theta / n)
}

fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let coeff = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + coeff * k * k
}
