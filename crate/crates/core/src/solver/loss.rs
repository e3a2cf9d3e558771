use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Robust loss applied per residual block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum Loss {
    #[default]
    None,
    Huber(f64),
}

impl Loss {
    /// Scale factor for a residual block of norm `s`.
    ///
    /// For Huber, the rescaled block has squared norm `2ks - k^2` when
    /// `s > k`, and is left unchanged otherwise.
    pub fn scale(&self, s: f64) -> f64 {
        match *self {
            Loss::None => 1.0,
            Loss::Huber(k) => {
                if s <= k || !k.is_finite() {
                    1.0
                } else {
                    (2.0 * k * s - k * k).sqrt() / s
                }
            }
        }
    }

    /// Rescales a residual block and its Jacobians in place; returns the scale.
    pub fn apply(&self, e: &mut DVector<f64>, jacobians: &mut [DMatrix<f64>]) -> f64 {
        let w = self.scale(e.norm());
        if w != 1.0 {
            *e *= w;
            for j in jacobians.iter_mut() {
                *j *= w;
            }
        }
        w
    }
}
