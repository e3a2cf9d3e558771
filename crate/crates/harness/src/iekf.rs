//! Iterated extended Kalman filter over the same models as the
//! moving-horizon estimator.
//!
//! The filter keeps the mean as manifold blocks and the covariance in their
//! tangent space. Prediction integrates every process model over its own
//! state portion; blocks no process model propagates (the end-effector pose)
//! are re-initialized with a broad, uncorrelated prior at every new stamp,
//! matching the moving-horizon window in which they are independent per
//! state. The measurement update runs Gauss-Newton on
//! `|W^{1/2} e(x)|² + |x ⊟ x̄|²_{P̄^{-1}}`. Statics are held fixed.

use std::collections::BTreeMap;
use std::sync::Arc;

use mhe_core::engine::{cut_segments, StateLayout};
use mhe_core::problem::{propagate, ProcessMeasurement, ProcessModel, StaticSet, UpdateMeasurement, UpdateModel};
use mhe_core::{MheError, ParameterBlock, Result};
use nalgebra::{DMatrix, DVector};

/// Why a filter cannot fuse two process models on one state portion.
pub const DUAL_PROCESS_RATIONALE: &str =
    "multiple process measurements which act on the same portion of the state cannot be incorporated directly by a filter";

/// Variance given to blocks no process model propagates when a new stamp starts.
pub const RESET_VARIANCE: f64 = 1e6;

/// Gauss-Newton stops once the increment norm falls below this.
const STEP_TOLERANCE: f64 = 1e-12;

/// Mean and covariance at one stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub stamp: f64,
    pub blocks: Vec<ParameterBlock>,
    pub covariance: DMatrix<f64>,
}

/// Outcome of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub prior: Belief,
    pub posterior: Belief,
    pub iterations: usize,
}

pub struct Iekf {
    layout: StateLayout,
    offsets: Vec<usize>,
    process_models: Vec<Arc<dyn ProcessModel>>,
    update_models: BTreeMap<String, Arc<dyn UpdateModel>>,
    statics: StaticSet,
    buffers: BTreeMap<String, Vec<ProcessMeasurement>>,
    belief: Option<Belief>,
    initial_information: Vec<f64>,
    max_iterations: usize,
}

impl std::fmt::Debug for Iekf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Iekf").field("belief", &self.belief).finish()
    }
}

impl Iekf {
    /// `initial_information` is the diagonal prior information of the first
    /// state, one entry per tangent dimension.
    pub fn new(layout: StateLayout, initial_information: Vec<f64>, max_iterations: usize) -> Result<Self> {
        if initial_information.len() != layout.tangent_dim() {
            return Err(MheError::Configuration(format!(
                "initial_information has {} entries, the state has {} tangent dimensions",
                initial_information.len(),
                layout.tangent_dim()
            )));
        }
        if initial_information.iter().any(|w| !(*w > 0.0 && w.is_finite())) || max_iterations == 0 {
            return Err(MheError::Configuration(
                "initial information must be positive and at least one iteration is needed".into(),
            ));
        }
        let mut offsets = Vec::new();
        let mut off = 0;
        for b in &layout.blocks {
            offsets.push(off);
            off += b.kind.tangent_dim();
        }
        Ok(Self {
            layout,
            offsets,
            process_models: Vec::new(),
            update_models: BTreeMap::new(),
            statics: StaticSet::new(),
            buffers: BTreeMap::new(),
            belief: None,
            initial_information,
            max_iterations,
        })
    }

    /// Registers a process model; rejects one whose state portion overlaps an
    /// already registered model's.
    pub fn add_process_model(&mut self, model: Arc<dyn ProcessModel>) -> Result<()> {
        for other in &self.process_models {
            if let Some(b) = model.state_blocks().iter().find(|b| other.state_blocks().contains(b)) {
                let block = self.layout.blocks.get(*b).map_or("?", |s| s.name.as_str());
                return Err(MheError::Configuration(format!(
                    "process models `{}` and `{}` both act on state block `{block}`: {DUAL_PROCESS_RATIONALE}",
                    other.name(),
                    model.name()
                )));
            }
        }
        self.check_blocks(model.name(), model.state_blocks())?;
        self.buffers.insert(model.name().to_string(), Vec::new());
        self.process_models.push(model);
        Ok(())
    }

    pub fn add_update_model(&mut self, model: Arc<dyn UpdateModel>) -> Result<()> {
        self.check_blocks(model.name(), model.state_blocks())?;
        self.update_models.insert(model.name().to_string(), model);
        Ok(())
    }

    pub fn add_static(&mut self, name: impl Into<String>, block: ParameterBlock) {
        self.statics.insert(name.into(), block);
    }

    fn check_blocks(&self, name: &str, blocks: &[usize]) -> Result<()> {
        match blocks.iter().find(|b| **b >= self.layout.blocks.len()) {
            Some(b) => Err(MheError::Configuration(format!("model `{name}` refers to missing state block {b}"))),
            None => Ok(()),
        }
    }

    pub fn belief(&self) -> Option<&Belief> {
        self.belief.as_ref()
    }

    pub fn ingest_process(&mut self, m: ProcessMeasurement) -> Result<()> {
        let buffer = self
            .buffers
            .get_mut(&m.source)
            .ok_or_else(|| MheError::Configuration(format!("unknown process source `{}`", m.source)))?;
        let at = buffer.partition_point(|x| x.stamp <= m.stamp);
        buffer.insert(at, m);
        Ok(())
    }

    fn lookup_statics(&self, names: &[String]) -> Result<Vec<&ParameterBlock>> {
        names
            .iter()
            .map(|n| {
                self.statics
                    .get(n)
                    .ok_or_else(|| MheError::Configuration(format!("unknown static `{n}`")))
            })
            .collect()
    }

    fn tangent_indices(&self, blocks: &[usize]) -> Vec<usize> {
        blocks
            .iter()
            .flat_map(|&b| self.offsets[b]..self.offsets[b] + self.layout.blocks[b].kind.tangent_dim())
            .collect()
    }

    /// The current belief propagated to `stamp` through the buffered process
    /// measurements, without changing the filter.
    pub fn predict(&self, stamp: f64) -> Result<Belief> {
        let belief = self
            .belief
            .as_ref()
            .ok_or_else(|| MheError::InvalidInput("the filter is not initialized".into()))?;
        if stamp < belief.stamp {
            return Err(MheError::InvalidInput(format!(
                "cannot predict backwards from {} to {stamp}",
                belief.stamp
            )));
        }
        let mut blocks = belief.blocks.clone();
        let n = belief.covariance.nrows();
        let mut phi = DMatrix::identity(n, n);
        let mut q = DMatrix::zeros(n, n);
        let mut propagated = vec![false; blocks.len()];
        for model in &self.process_models {
            for &b in model.state_blocks() {
                propagated[b] = true;
            }
            let (segments, _) = cut_segments(&self.buffers[model.name()], belief.stamp, stamp);
            if segments.is_empty() {
                continue;
            }
            let portion: Vec<&ParameterBlock> = model.state_blocks().iter().map(|&b| &belief.blocks[b]).collect();
            let statics = self.lookup_statics(&model.statics())?;
            let prop = propagate(model.as_ref(), &portion, &segments, &statics, None)?;
            for (&b, v) in model.state_blocks().iter().zip(prop.predicted) {
                blocks[b] = v;
            }
            let idx = self.tangent_indices(model.state_blocks());
            for (i, &r) in idx.iter().enumerate() {
                for (j, &c) in idx.iter().enumerate() {
                    phi[(r, c)] = prop.state_jacobian[(i, j)];
                    q[(r, c)] = prop.covariance[(i, j)];
                }
            }
        }
        let mut cov = &phi * &belief.covariance * phi.transpose() + q;
        if stamp > belief.stamp {
            let free: Vec<usize> = (0..blocks.len()).filter(|&b| !propagated[b]).collect();
            for i in self.tangent_indices(&free) {
                for j in 0..n {
                    cov[(i, j)] = 0.0;
                    cov[(j, i)] = 0.0;
                }
                cov[(i, i)] = RESET_VARIANCE;
            }
        }
        Ok(Belief {
            stamp,
            blocks,
            covariance: symmetrize(cov),
        })
    }

    fn initial_belief(&self, stamp: f64, measurements: &[UpdateMeasurement]) -> Result<Belief> {
        let mut blocks = self.layout.initial_blocks()?;
        for m in measurements {
            let model = self.model(&m.source)?;
            let statics = self.lookup_statics(&model.statics(m))?;
            for (b, v) in model.seed(m, &statics).unwrap_or_default() {
                let block = blocks
                    .get_mut(b)
                    .ok_or_else(|| MheError::Configuration(format!("`{}` seeds unknown block {b}", m.source)))?;
                block.set_value(block.kind.normalize(&v))?;
            }
        }
        let p = DVector::from_iterator(
            self.initial_information.len(),
            self.initial_information.iter().map(|w| 1.0 / w),
        );
        Ok(Belief {
            stamp,
            blocks,
            covariance: DMatrix::from_diagonal(&p),
        })
    }

    fn model(&self, source: &str) -> Result<Arc<dyn UpdateModel>> {
        self.update_models
            .get(source)
            .cloned()
            .ok_or_else(|| MheError::Configuration(format!("unknown update source `{source}`")))
    }

    /// Weighted residual and its Jacobian over the full tangent state.
    fn linearize(&self, blocks: &[ParameterBlock], measurements: &[UpdateMeasurement]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n: usize = self.layout.tangent_dim();
        let rows: usize = measurements.iter().map(|m| m.weight_sqrt.nrows()).sum();
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, n);
        let mut row = 0;
        for m in measurements {
            let model = self.model(&m.source)?;
            let state: Vec<&ParameterBlock> = model.state_blocks().iter().map(|&b| &blocks[b]).collect();
            let statics = self.lookup_statics(&model.statics(m))?;
            let out = model.error(&state, &statics, m)?;
            let d = m.weight_sqrt.nrows();
            if out.error.len() != d {
                return Err(MheError::DimensionMismatch {
                    expected: d,
                    actual: out.error.len(),
                });
            }
            r.rows_mut(row, d).copy_from(&(&m.weight_sqrt * &out.error));
            for (&b, jac) in model.state_blocks().iter().zip(&out.jacobians) {
                let off = self.offsets[b];
                let w = &m.weight_sqrt * jac;
                let mut view = j.view_mut((row, off), (d, w.ncols()));
                view += w;
            }
            row += d;
        }
        Ok((r, j))
    }

    /// Predicts to `stamp` and fuses all `measurements` taken at it. The
    /// first call initializes the filter from the models' seeds and the
    /// initial information.
    pub fn update(&mut self, stamp: f64, measurements: &[UpdateMeasurement]) -> Result<UpdateReport> {
        let prior = match &self.belief {
            Some(_) => self.predict(stamp)?,
            None => self.initial_belief(stamp, measurements)?,
        };
        let info = prior
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| MheError::Factorization { block: "filter covariance".into() })?
            .inverse();
        let n = info.nrows();
        let mut delta = DVector::zeros(n);
        let mut blocks = prior.blocks.clone();
        let mut iterations = 0;
        while iterations < self.max_iterations {
            iterations += 1;
            let (r, j) = self.linearize(&blocks, measurements)?;
            let a = j.transpose() * &j + &info;
            let g = j.transpose() * r + &info * &delta;
            let step = a
                .cholesky()
                .ok_or_else(|| MheError::Factorization { block: "filter update".into() })?
                .solve(&(-g));
            delta += &step;
            blocks = self.retract(&prior.blocks, &delta)?;
            if step.norm() < STEP_TOLERANCE {
                break;
            }
        }
        let (_, j) = self.linearize(&blocks, measurements)?;
        let a = j.transpose() * &j + &info;
        let covariance = a
            .cholesky()
            .ok_or_else(|| MheError::Factorization { block: "filter update".into() })?
            .inverse();
        let posterior = Belief {
            stamp,
            blocks,
            covariance: symmetrize(covariance),
        };
        for buffer in self.buffers.values_mut() {
            // Inputs stamped up to `stamp` hold over intervals already integrated.
            let k = buffer.partition_point(|m| m.stamp <= stamp);
            buffer.drain(..k);
        }
        self.belief = Some(posterior.clone());
        Ok(UpdateReport {
            prior,
            posterior,
            iterations,
        })
    }

    fn retract(&self, base: &[ParameterBlock], delta: &DVector<f64>) -> Result<Vec<ParameterBlock>> {
        base.iter()
            .zip(&self.offsets)
            .map(|(b, &off)| b.plus(&delta.rows(off, b.tangent_dim()).into_owned()))
            .collect()
    }

    /// Values of the belief's blocks by block name.
    pub fn values(&self, belief: &Belief) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .blocks
            .iter()
            .zip(&belief.blocks)
            .map(|(s, b)| (s.name.clone(), b.value().as_slice().to_vec()))
            .collect()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
