//! Linear-Gaussian models, used as exact fixtures against Kalman filtering.

use nalgebra::{DMatrix, DVector};

use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::problem::{ChainSegment, ModelOutput, ProcessModel, StepJacobians, UpdateMeasurement, UpdateModel};

/// `x' = x + u dt` on one Euclidean block, with noise covariance `q dt I`.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    name: String,
    blocks: [usize; 1],
    pub dim: usize,
    pub q: f64,
}

impl RandomWalk {
    pub fn new(name: impl Into<String>, block: usize, dim: usize, q: f64) -> Self {
        Self {
            name: name.into(),
            blocks: [block],
            dim,
            q,
        }
    }
}

impl ProcessModel for RandomWalk {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn step(&self, state: &mut [ParameterBlock], segment: &ChainSegment, _statics: &[&ParameterBlock]) -> Result<StepJacobians> {
        let x = state[0].value().clone();
        if x.len() != self.dim || segment.input.len() != self.dim {
            return Err(MheError::DimensionMismatch {
                expected: self.dim,
                actual: segment.input.len(),
            });
        }
        state[0].set_value(x + &segment.input * segment.dt())?;
        Ok(StepJacobians {
            state: DMatrix::identity(self.dim, self.dim),
            noise: DMatrix::identity(self.dim, self.dim),
            statics: Vec::new(),
        })
    }

    fn noise_covariance(&self, segment: &ChainSegment) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * (self.q * segment.dt())
    }
}

/// Constant velocity in `d` dimensions on one Euclidean block `[p (d), v (d)]`,
/// driven by an acceleration input, with the exact discretisation of
/// continuous white acceleration noise of density `q`.
#[derive(Debug, Clone)]
pub struct ConstantVelocity {
    name: String,
    blocks: [usize; 1],
    pub d: usize,
    pub q: f64,
}

impl ConstantVelocity {
    pub fn new(name: impl Into<String>, block: usize, d: usize, q: f64) -> Self {
        Self {
            name: name.into(),
            blocks: [block],
            d,
            q,
        }
    }

    pub fn transition(&self, dt: f64) -> DMatrix<f64> {
        let d = self.d;
        let mut f = DMatrix::identity(2 * d, 2 * d);
        for i in 0..d {
            f[(i, d + i)] = dt;
        }
        f
    }

    pub fn input_matrix(&self, dt: f64) -> DMatrix<f64> {
        let d = self.d;
        let mut g = DMatrix::zeros(2 * d, d);
        for i in 0..d {
            g[(i, i)] = 0.5 * dt * dt;
            g[(d + i, i)] = dt;
        }
        g
    }
}

impl ProcessModel for ConstantVelocity {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn step(&self, state: &mut [ParameterBlock], segment: &ChainSegment, _statics: &[&ParameterBlock]) -> Result<StepJacobians> {
        let d = self.d;
        let x = state[0].value().clone();
        if x.len() != 2 * d || segment.input.len() != d {
            return Err(MheError::DimensionMismatch {
                expected: 2 * d,
                actual: x.len(),
            });
        }
        let dt = segment.dt();
        let f = self.transition(dt);
        state[0].set_value(&f * x + self.input_matrix(dt) * &segment.input)?;
        Ok(StepJacobians {
            state: f,
            noise: DMatrix::identity(2 * d, 2 * d),
            statics: Vec::new(),
        })
    }

    fn noise_covariance(&self, segment: &ChainSegment) -> DMatrix<f64> {
        let d = self.d;
        let dt = segment.dt();
        let mut q = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            q[(i, i)] = self.q * dt.powi(3) / 3.0;
            q[(i, d + i)] = self.q * dt * dt / 2.0;
            q[(d + i, i)] = self.q * dt * dt / 2.0;
            q[(d + i, d + i)] = self.q * dt;
        }
        q
    }
}

/// `u = H x` on one Euclidean block.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    name: String,
    blocks: [usize; 1],
    pub h: DMatrix<f64>,
}

impl LinearObservation {
    pub fn new(name: impl Into<String>, block: usize, h: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            blocks: [block],
            h,
        }
    }

    /// Observes the first `k` of `n` components.
    pub fn leading(name: impl Into<String>, block: usize, k: usize, n: usize) -> Self {
        Self::new(name, block, DMatrix::identity(k, n))
    }
}

impl UpdateModel for LinearObservation {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn state_blocks(&self) -> &[usize] {
        &self.blocks
    }

    fn error(&self, state: &[&ParameterBlock], _statics: &[&ParameterBlock], meas: &UpdateMeasurement) -> Result<ModelOutput> {
        let x = state[0].value();
        if x.len() != self.h.ncols() || meas.payload.len() != self.h.nrows() {
            return Err(MheError::DimensionMismatch {
                expected: self.h.ncols(),
                actual: x.len(),
            });
        }
        Ok(ModelOutput {
            error: &meas.payload - &self.h * x,
            jacobians: vec![-self.h.clone()],
        })
    }

    fn seed(&self, meas: &UpdateMeasurement, _statics: &[&ParameterBlock]) -> Option<Vec<(usize, DVector<f64>)>> {
        let pinv = self.h.clone().pseudo_inverse(1e-12).ok()?;
        Some(vec![(self.blocks[0], pinv * &meas.payload)])
    }
}
