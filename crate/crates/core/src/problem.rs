//! States, measurements, and the update/process model interfaces.
//!
//! Update models relate one state (plus statics) to a measurement:
//! `e = W^{1/2} (u ⊟ g(x, s))`. Process models relate two consecutive states
//! through a chain of process measurements: `e = W^{1/2} (x_j ⊟ h(x_i, p, s))`,
//! where `W` is the inverse covariance obtained by propagating the chain from
//! a noise-free `x_i`.
//!
//! Residuals are always stored pre-weighted, so the solver never sees a
//! weighting matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::solver::CostTerm;

/// Identity of an estimated parameter block.
///
/// The derived ordering puts statics first (by name) and then state blocks
/// by state sequence number, which is also stamp order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    Static(String),
    State { state: u64, block: usize },
}

impl ParamKey {
    pub fn state(state: u64, block: usize) -> Self {
        ParamKey::State { state, block }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, ParamKey::Static(_))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Static(name) => write!(f, "{name}"),
            ParamKey::State { state, block } => write!(f, "x{state}.{block}"),
        }
    }
}

/// Statics available to models, by name.
pub type StaticSet = BTreeMap<String, ParameterBlock>;

/// A measurement constraining a single state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMeasurement {
    /// Name of the update model that interprets this measurement.
    pub source: String,
    pub stamp: f64,
    pub payload: DVector<f64>,
    /// Upper-triangular square-root information `W^{1/2}`.
    pub weight_sqrt: DMatrix<f64>,
    /// Optional name of the entity observed (e.g. a landmark id).
    pub target: Option<String>,
}

impl UpdateMeasurement {
    pub fn new(
        source: impl Into<String>,
        stamp: f64,
        payload: DVector<f64>,
        weight_sqrt: DMatrix<f64>,
    ) -> Result<Self> {
        if !weight_sqrt.is_square() {
            return Err(MheError::InvalidInput("weight_sqrt must be square".into()));
        }
        for c in 0..weight_sqrt.ncols() {
            if weight_sqrt[(c, c)] < 0.0 {
                return Err(MheError::InvalidInput(
                    "weight_sqrt must have a non-negative diagonal".into(),
                ));
            }
            for r in (c + 1)..weight_sqrt.nrows() {
                if weight_sqrt[(r, c)] != 0.0 {
                    return Err(MheError::InvalidInput(
                        "weight_sqrt must be upper triangular".into(),
                    ));
                }
            }
        }
        if !stamp.is_finite() {
            return Err(MheError::InvalidInput("non-finite stamp".into()));
        }
        Ok(Self {
            source: source.into(),
            stamp,
            payload,
            weight_sqrt,
            target: None,
        })
    }

    /// Measurement with independent noise of the given standard deviations.
    pub fn with_sigmas(
        source: impl Into<String>,
        stamp: f64,
        payload: DVector<f64>,
        sigmas: &[f64],
    ) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(MheError::InvalidInput("sigmas must be positive".into()));
        }
        let w = DMatrix::from_diagonal(&DVector::from_iterator(
            sigmas.len(),
            sigmas.iter().map(|s| 1.0 / s),
        ));
        Self::new(source, stamp, payload, w)
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }
}

/// A measurement describing motion over the interval ending at `stamp`.
///
/// The input is held constant over `(previous stamp of the same source, stamp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessMeasurement {
    pub source: String,
    pub stamp: f64,
    pub input: DVector<f64>,
}

impl ProcessMeasurement {
    pub fn new(source: impl Into<String>, stamp: f64, input: DVector<f64>) -> Self {
        Self {
            source: source.into(),
            stamp,
            input,
        }
    }
}

/// One constant-input piece of a process chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSegment {
    pub start: f64,
    pub end: f64,
    pub input: DVector<f64>,
}

impl ChainSegment {
    pub fn new(start: f64, end: f64, input: DVector<f64>) -> Self {
        Self { start, end, input }
    }

    pub fn dt(&self) -> f64 {
        self.end - self.start
    }
}

/// Process measurements linking two consecutive states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessChain {
    pub source: String,
    pub start: f64,
    pub end: f64,
    pub segments: Vec<ChainSegment>,
    /// Upper Cholesky factor of the inverse propagated covariance.
    pub weight_sqrt: DMatrix<f64>,
}

/// A time-stamped collection of parameter blocks.
#[derive(Debug, Clone)]
pub struct State {
    /// Sequence number; increases with stamp.
    pub id: u64,
    pub stamp: f64,
    pub blocks: Vec<ParameterBlock>,
    pub updates: Vec<Arc<UpdateMeasurement>>,
    /// Chains from the preceding state, by process model name.
    pub incoming: BTreeMap<String, Arc<ProcessChain>>,
}

impl State {
    pub fn new(id: u64, stamp: f64, blocks: Vec<ParameterBlock>) -> Self {
        Self {
            id,
            stamp,
            blocks,
            updates: Vec::new(),
            incoming: BTreeMap::new(),
        }
    }

    pub fn key(&self, block: usize) -> ParamKey {
        ParamKey::state(self.id, block)
    }
}

/// Unweighted model error and its tangent-space Jacobians.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub error: DVector<f64>,
    /// One Jacobian per input block: state blocks first, then statics.
    pub jacobians: Vec<DMatrix<f64>>,
}

/// An update model `g(x, s)`.
pub trait UpdateModel: Send + Sync {
    fn name(&self) -> &str;

    /// Residual dimension.
    fn dim(&self) -> usize;

    /// Indices of the state blocks this model reads, in the order they are
    /// passed to [`UpdateModel::error`].
    fn state_blocks(&self) -> &[usize];

    /// Names of the statics a measurement touches.
    fn statics(&self, _meas: &UpdateMeasurement) -> Vec<String> {
        Vec::new()
    }

    /// `u ⊟ g(x, s)` with Jacobians with respect to every input block.
    fn error(
        &self,
        state: &[&ParameterBlock],
        statics: &[&ParameterBlock],
        meas: &UpdateMeasurement,
    ) -> Result<ModelOutput>;

    /// Initial values for state blocks implied by a single measurement.
    fn seed(
        &self,
        _meas: &UpdateMeasurement,
        _statics: &[&ParameterBlock],
    ) -> Option<Vec<(usize, DVector<f64>)>> {
        None
    }
}

/// Jacobians of a single integration step.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// d(new state) / d(old state), tangent to tangent.
    pub state: DMatrix<f64>,
    /// d(new state) / d(input noise).
    pub noise: DMatrix<f64>,
    /// d(new state) / d(static), one per static.
    pub statics: Vec<DMatrix<f64>>,
}

/// A process model `h(x_i, p, s)`, integrated one segment at a time.
pub trait ProcessModel: Send + Sync {
    fn name(&self) -> &str;

    /// Indices of the state blocks this model propagates (its state portion).
    fn state_blocks(&self) -> &[usize];

    fn statics(&self) -> Vec<String> {
        Vec::new()
    }

    /// Advances `state` in place across one segment.
    fn step(
        &self,
        state: &mut [ParameterBlock],
        segment: &ChainSegment,
        statics: &[&ParameterBlock],
    ) -> Result<StepJacobians>;

    /// Covariance of the input noise over one segment.
    fn noise_covariance(&self, segment: &ChainSegment) -> DMatrix<f64>;
}

/// Result of integrating a chain from a noise-free starting state.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub predicted: Vec<ParameterBlock>,
    /// d(predicted) / d(start), tangent to tangent.
    pub state_jacobian: DMatrix<f64>,
    pub static_jacobians: Vec<DMatrix<f64>>,
    pub covariance: DMatrix<f64>,
}

fn tangent_dim(blocks: &[ParameterBlock]) -> usize {
    blocks.iter().map(|b| b.tangent_dim()).sum()
}

/// Integrates `segments` starting from `start`, accumulating the Jacobians
/// and the covariance `P <- F P F^T + G Q G^T` from `P = 0`.
///
/// `noise` overrides the model's per-segment noise covariances when given.
pub fn propagate(
    model: &dyn ProcessModel,
    start: &[&ParameterBlock],
    segments: &[ChainSegment],
    statics: &[&ParameterBlock],
    noise: Option<&[DMatrix<f64>]>,
) -> Result<Propagation> {
    if let Some(q) = noise {
        if q.len() != segments.len() {
            return Err(MheError::DimensionMismatch {
                expected: segments.len(),
                actual: q.len(),
            });
        }
    }
    let mut state: Vec<ParameterBlock> = start.iter().map(|b| (*b).clone()).collect();
    let n = tangent_dim(&state);
    let mut jac = DMatrix::identity(n, n);
    let mut jac_s: Vec<DMatrix<f64>> = statics
        .iter()
        .map(|s| DMatrix::zeros(n, s.tangent_dim()))
        .collect();
    let mut cov = DMatrix::zeros(n, n);
    for (k, seg) in segments.iter().enumerate() {
        if !(seg.dt() >= 0.0) {
            return Err(MheError::InvalidInput(format!(
                "segment ({}, {}] runs backwards",
                seg.start, seg.end
            )));
        }
        let step = model.step(&mut state, seg, statics)?;
        let q = match noise {
            Some(q) => q[k].clone(),
            None => model.noise_covariance(seg),
        };
        cov = &step.state * cov * step.state.transpose()
            + &step.noise * q * step.noise.transpose();
        for (acc, local) in jac_s.iter_mut().zip(&step.statics) {
            *acc = &step.state * &*acc + local;
        }
        jac = &step.state * jac;
    }
    Ok(Propagation {
        predicted: state,
        state_jacobian: jac,
        static_jacobians: jac_s,
        covariance: cov,
    })
}

/// Square-root weight of a process chain: the upper Cholesky factor of the
/// inverse of the covariance propagated from a noise-free `start`.
pub fn compute_chain_weight(
    model: &dyn ProcessModel,
    start: &[&ParameterBlock],
    segments: &[ChainSegment],
    statics: &[&ParameterBlock],
    noise: Option<&[DMatrix<f64>]>,
) -> Result<DMatrix<f64>> {
    if segments.is_empty() {
        return Err(MheError::EmptyChain);
    }
    let prop = propagate(model, start, segments, statics, noise)?;
    information_sqrt_from_covariance(&prop.covariance)
}

/// Upper-triangular `U` with `U^T U = P^{-1}`.
pub fn information_sqrt_from_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = 1e-14 * max.max(f64::MIN_POSITIVE);
    let mut directions = Vec::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= floor {
            let v = eig.eigenvectors.column(i);
            let (idx, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (j, x)| if x.abs() > acc.1 { (j, x.abs()) } else { acc });
            if !directions.contains(&idx) {
                directions.push(idx);
            }
        }
    }
    if !directions.is_empty() || max <= 0.0 {
        directions.sort_unstable();
        return Err(MheError::SingularCovariance { directions });
    }
    let chol = Cholesky::new(sym).ok_or(MheError::SingularCovariance {
        directions: Vec::new(),
    })?;
    let info = chol.inverse();
    let info = (&info + info.transpose()) * 0.5;
    let l = Cholesky::new(info)
        .ok_or(MheError::SingularCovariance {
            directions: Vec::new(),
        })?
        .l();
    Ok(l.transpose())
}

/// A weighted residual and its Jacobians keyed by parameter.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(ParamKey, DMatrix<f64>)>,
}

fn lookup_statics<'a>(statics: &'a StaticSet, names: &[String]) -> Result<Vec<&'a ParameterBlock>> {
    names
        .iter()
        .map(|n| {
            statics
                .get(n)
                .ok_or_else(|| MheError::Configuration(format!("missing static block `{n}`")))
        })
        .collect()
}

/// Evaluates `W^{1/2} (u ⊟ g(x, s))`, reporting Jacobians for active blocks only.
pub fn evaluate_update_residual(
    model: &dyn UpdateModel,
    state: &State,
    statics: &StaticSet,
    meas: &UpdateMeasurement,
) -> Result<Linearization> {
    let static_names = model.statics(meas);
    let static_blocks = lookup_statics(statics, &static_names)?;
    let mut params: Vec<&ParameterBlock> = Vec::new();
    let mut keys = Vec::new();
    for &b in model.state_blocks() {
        params.push(state_block(state, b, model.name())?);
        keys.push(state.key(b));
    }
    params.extend(static_blocks.iter().copied());
    keys.extend(static_names.iter().map(|n| ParamKey::Static(n.clone())));
    let (residual, jacs) = weighted_update(model, meas, &params)?;
    Ok(keep_active(residual, keys, jacs, &params))
}

/// Evaluates `W^{1/2} (x_next ⊟ h(x_prev, p, s))` for the model's state portion.
pub fn evaluate_process_residual(
    model: &dyn ProcessModel,
    prev: &State,
    next: &State,
    chain: &ProcessChain,
    statics: &StaticSet,
) -> Result<Linearization> {
    if chain.start != prev.stamp || chain.end != next.stamp {
        return Err(MheError::Assignment(format!(
            "chain ({}, {}] does not span states at {} and {}",
            chain.start, chain.end, prev.stamp, next.stamp
        )));
    }
    let static_names = model.statics();
    let static_blocks = lookup_statics(statics, &static_names)?;
    let mut params: Vec<&ParameterBlock> = Vec::new();
    let mut keys = Vec::new();
    for state in [prev, next] {
        for &b in model.state_blocks() {
            params.push(state_block(state, b, model.name())?);
            keys.push(state.key(b));
        }
    }
    params.extend(static_blocks.iter().copied());
    keys.extend(static_names.iter().map(|n| ParamKey::Static(n.clone())));
    let (residual, jacs) = weighted_process(model, chain, &params)?;
    Ok(keep_active(residual, keys, jacs, &params))
}

fn state_block<'a>(state: &'a State, block: usize, model: &str) -> Result<&'a ParameterBlock> {
    state
        .blocks
        .get(block)
        .ok_or_else(|| MheError::Configuration(format!("state has no block {block} for `{model}`")))
}

fn keep_active(
    residual: DVector<f64>,
    keys: Vec<ParamKey>,
    jacs: Vec<DMatrix<f64>>,
    params: &[&ParameterBlock],
) -> Linearization {
    let jacobians = keys
        .into_iter()
        .zip(jacs)
        .zip(params)
        .filter(|(_, p)| p.active)
        .map(|(kj, _)| kj)
        .collect();
    Linearization { residual, jacobians }
}

fn weighted_update(
    model: &dyn UpdateModel,
    meas: &UpdateMeasurement,
    params: &[&ParameterBlock],
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    let count = model.state_blocks().len();
    if params.len() < count {
        return Err(MheError::DimensionMismatch {
            expected: count,
            actual: params.len(),
        });
    }
    let (state, statics) = params.split_at(count);
    let out = model.error(state, statics, meas)?;
    let w = &meas.weight_sqrt;
    if w.ncols() != out.error.len() {
        return Err(MheError::DimensionMismatch {
            expected: out.error.len(),
            actual: w.ncols(),
        });
    }
    let e = w * out.error;
    let jacs = out.jacobians.iter().map(|j| w * j).collect();
    Ok((e, jacs))
}

fn weighted_process(
    model: &dyn ProcessModel,
    chain: &ProcessChain,
    params: &[&ParameterBlock],
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    if chain.segments.is_empty() {
        return Err(MheError::EmptyChain);
    }
    let portion = model.state_blocks().len();
    if params.len() < 2 * portion {
        return Err(MheError::DimensionMismatch {
            expected: 2 * portion,
            actual: params.len(),
        });
    }
    let prev = &params[..portion];
    let next = &params[portion..2 * portion];
    let statics = &params[2 * portion..];
    let prop = propagate(model, prev, &chain.segments, statics, None)?;
    let n = prop.state_jacobian.nrows();
    let mut r = DVector::zeros(n);
    let mut d_next = DMatrix::zeros(n, n);
    let mut d_pred = DMatrix::zeros(n, n);
    let mut off = 0;
    for (pred, nb) in prop.predicted.iter().zip(next) {
        let d = pred.tangent_dim();
        r.rows_mut(off, d)
            .copy_from(&nb.kind.boxminus(nb.value(), pred.value())?);
        let (jy, jx) = nb.kind.boxminus_jacobians(nb.value(), pred.value())?;
        d_next.view_mut((off, off), (d, d)).copy_from(&jy);
        d_pred.view_mut((off, off), (d, d)).copy_from(&jx);
        off += d;
    }
    let w = &chain.weight_sqrt;
    if w.ncols() != n {
        return Err(MheError::DimensionMismatch {
            expected: n,
            actual: w.ncols(),
        });
    }
    let e = w * r;
    let wd_pred = w * d_pred;
    let wd_next = w * d_next;
    let j_prev = &wd_pred * &prop.state_jacobian;
    let mut jacs = Vec::with_capacity(params.len());
    let mut col = 0;
    for p in prev {
        let d = p.tangent_dim();
        jacs.push(j_prev.columns(col, d).into_owned());
        col += d;
    }
    col = 0;
    for p in next {
        let d = p.tangent_dim();
        jacs.push(wd_next.columns(col, d).into_owned());
        col += d;
    }
    for js in &prop.static_jacobians {
        jacs.push(&wd_pred * js);
    }
    Ok((e, jacs))
}

/// Cost term for one update measurement. Parameters: the model's state
/// blocks, then its statics.
pub struct UpdateTerm {
    pub model: Arc<dyn UpdateModel>,
    pub meas: Arc<UpdateMeasurement>,
}

impl CostTerm for UpdateTerm {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn evaluate(&self, params: &[&ParameterBlock]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        weighted_update(self.model.as_ref(), &self.meas, params)
    }
}

/// Cost term for one process chain. Parameters: the model's portion of the
/// preceding state, the same portion of the following state, then statics.
pub struct ProcessTerm {
    pub model: Arc<dyn ProcessModel>,
    pub chain: Arc<ProcessChain>,
}

impl CostTerm for ProcessTerm {
    fn dim(&self) -> usize {
        self.chain.weight_sqrt.nrows()
    }

    fn evaluate(&self, params: &[&ParameterBlock]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        weighted_process(self.model.as_ref(), &self.chain, params)
    }
}

/// Weighted prior on a single block: `S (x ⊟ x̌)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorTerm {
    pub anchor: ParameterBlock,
    pub sqrt_information: DMatrix<f64>,
}

impl AnchorTerm {
    pub fn new(anchor: ParameterBlock, sqrt_information: DMatrix<f64>) -> Result<Self> {
        let d = anchor.tangent_dim();
        if sqrt_information.ncols() != d {
            return Err(MheError::DimensionMismatch {
                expected: d,
                actual: sqrt_information.ncols(),
            });
        }
        Ok(Self {
            anchor,
            sqrt_information,
        })
    }

    pub fn diagonal(anchor: ParameterBlock, sqrt_information: &DVector<f64>) -> Result<Self> {
        Self::new(anchor, DMatrix::from_diagonal(sqrt_information))
    }
}

impl CostTerm for AnchorTerm {
    fn dim(&self) -> usize {
        self.sqrt_information.nrows()
    }

    fn evaluate(&self, params: &[&ParameterBlock]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let x = params.first().ok_or(MheError::DimensionMismatch {
            expected: 1,
            actual: 0,
        })?;
        let kind = self.anchor.kind;
        let r = kind.boxminus(x.value(), self.anchor.value())?;
        let (jy, _) = kind.boxminus_jacobians(x.value(), self.anchor.value())?;
        Ok((&self.sqrt_information * r, vec![&self.sqrt_information * jy]))
    }
}
