//! Robustified Levenberg-Marquardt on block-sparse normal equations.

mod cholesky;
mod loss;
mod normal;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::problem::ParamKey;

pub use cholesky::{solve_damped, BlockCholesky};
pub use loss::Loss;
pub use normal::{BlockLayout, LinearizedResidual, SparseNormalEquations};

/// A residual function over an ordered list of parameter blocks.
///
/// Implementations return the pre-weighted residual and one tangent-space
/// Jacobian per parameter (inactive ones included; the solver drops them).
pub trait CostTerm: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, params: &[&ParameterBlock]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)>;
}

/// A cost term bound to concrete parameters.
#[derive(Clone)]
pub struct ResidualBlock {
    pub label: String,
    pub params: Vec<ParamKey>,
    pub term: Arc<dyn CostTerm>,
    /// Whether the robust loss applies to this block.
    pub robust: bool,
}

impl std::fmt::Debug for ResidualBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResidualBlock")
            .field("label", &self.label)
            .field("params", &self.params)
            .field("robust", &self.robust)
            .finish()
    }
}

/// Parameter blocks and the residuals connecting them.
#[derive(Debug, Clone, Default)]
pub struct Problem {
    pub params: BTreeMap<ParamKey, ParameterBlock>,
    pub residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, key: ParamKey, block: ParameterBlock) {
        self.params.insert(key, block);
    }

    pub fn add_residual(
        &mut self,
        label: impl Into<String>,
        params: Vec<ParamKey>,
        term: Arc<dyn CostTerm>,
        robust: bool,
    ) -> Result<()> {
        let label = label.into();
        for k in &params {
            if !self.params.contains_key(k) {
                return Err(MheError::Configuration(format!(
                    "residual `{label}` references unknown parameter `{k}`"
                )));
            }
        }
        self.residuals.push(ResidualBlock {
            label,
            params,
            term,
            robust,
        });
        Ok(())
    }

    /// Layout of the active blocks that appear in at least one residual.
    pub fn layout(&self) -> BlockLayout {
        let mut used: BTreeMap<ParamKey, usize> = BTreeMap::new();
        for r in &self.residuals {
            for k in &r.params {
                let p = &self.params[k];
                if p.active {
                    used.insert(k.clone(), p.tangent_dim());
                }
            }
        }
        BlockLayout::new(used)
    }

    /// Total cost `sum e^T e` with the robust loss applied.
    pub fn cost(&self, loss: Loss) -> Result<f64> {
        let mut total = 0.0;
        for r in &self.residuals {
            let (e, _) = evaluate_block(self, r)?;
            let s = e.norm();
            let w = if r.robust { loss.scale(s) } else { 1.0 };
            total += (w * s) * (w * s);
        }
        Ok(total)
    }

    /// Applies a stacked tangent increment laid out by `layout`.
    pub fn apply_increment(&mut self, layout: &BlockLayout, dx: &DVector<f64>) -> Result<()> {
        for (i, key) in layout.keys().iter().enumerate() {
            let delta = dx.rows(layout.offset(i), layout.block_dim(i)).into_owned();
            if let Some(p) = self.params.get_mut(key) {
                p.increment(&delta)?;
            }
        }
        Ok(())
    }
}

fn evaluate_block(problem: &Problem, r: &ResidualBlock) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    let params: Vec<&ParameterBlock> = r.params.iter().map(|k| &problem.params[k]).collect();
    let (e, jacs) = r.term.evaluate(&params)?;
    let finite = e.iter().all(|x| x.is_finite()) && jacs.iter().all(|j| j.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(MheError::NonFinite {
            residual: r.label.clone(),
        });
    }
    Ok((e, jacs))
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub cost_decrease_tol: f64,
    /// Max-norm of `b` below which the solve ends.
    pub gradient_tol: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub loss: Loss,
    pub worker_count: usize,
    /// Factor the undamped `H` at the solution and report rank loss as a
    /// [`MheError::Factorization`] naming the first singular block.
    pub check_observability: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            cost_decrease_tol: 1e-6,
            gradient_tol: 1e-8,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            loss: Loss::None,
            worker_count: 1,
            check_observability: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MheError::Configuration(m.to_string()));
        if !(self.cost_decrease_tol > 0.0) || !(self.gradient_tol > 0.0) {
            return bad("solver tolerances must be positive");
        }
        if !(self.lambda_up > 1.0) {
            return bad("lambda_up must exceed 1");
        }
        if !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return bad("lambda_down must lie in (0, 1)");
        }
        if !(self.initial_lambda > 0.0) {
            return bad("initial_lambda must be positive");
        }
        if self.worker_count == 0 {
            return bad("worker_count must be at least 1");
        }
        if let Loss::Huber(k) = self.loss {
            if !(k > 0.0) {
                return bad("Huber threshold must be positive");
            }
        }
        Ok(())
    }
}

/// Shared rayon pools keyed by thread count.
fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = pools.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("thread pool"),
            )
        })
        .clone()
}

/// Evaluates every residual block against `layout`, applying the robust loss.
///
/// Blocks are evaluated concurrently when `worker_count > 1`; the output
/// order always matches `problem.residuals`.
pub fn linearize(
    problem: &Problem,
    layout: &BlockLayout,
    loss: Loss,
    worker_count: usize,
) -> Result<Vec<LinearizedResidual>> {
    let one = |r: &ResidualBlock| -> Result<LinearizedResidual> {
        let (mut e, mut jacs) = evaluate_block(problem, r)?;
        if r.robust {
            loss.apply(&mut e, &mut jacs);
        }
        let jacobians = r
            .params
            .iter()
            .zip(jacs)
            .filter_map(|(k, j)| layout.position(k).map(|i| (i, j)))
            .collect();
        Ok(LinearizedResidual {
            residual: e,
            jacobians,
        })
    };
    if worker_count <= 1 || problem.residuals.len() < 2 {
        problem.residuals.iter().map(one).collect()
    } else {
        pool(worker_count).install(|| problem.residuals.par_iter().map(one).collect())
    }
}

fn total_cost(lin: &[LinearizedResidual]) -> f64 {
    lin.iter().map(|r| r.residual.norm_squared()).sum()
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Nothing to optimize.
    NoOp,
    Gradient,
    CostDecrease,
    MaxIterations,
    /// Every step was rejected until the damping overflowed.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after the iteration (unchanged when the step was rejected).
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub linearize_ms: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub iterations: Vec<IterationRecord>,
}

impl SolverReport {
    fn noop(cost: f64) -> Self {
        Self {
            initial_cost: cost,
            final_cost: cost,
            accepted_steps: 0,
            termination: Termination::NoOp,
            iterations: Vec::new(),
        }
    }

    pub fn stalled(&self) -> bool {
        self.termination == Termination::Stalled
    }

    pub fn total_ms(&self) -> f64 {
        self.iterations
            .iter()
            .map(|r| r.linearize_ms + r.solve_ms)
            .sum()
    }
}

const LAMBDA_MAX: f64 = 1e16;

/// Minimizes the problem's cost in place.
///
/// After a step whose actual cost decrease matches the linear model almost
/// exactly (gain ratio above 0.999), damping is dropped to zero so the next
/// step is a pure Gauss-Newton step; a rejected step restores damping. Once
/// an undamped step has been rejected, damping only shrinks geometrically
/// for the rest of the solve, so a far-reaching Gauss-Newton step is not
/// retried after every short damped one.
pub fn optimize(problem: &mut Problem, options: &SolverOptions) -> Result<SolverReport> {
    options.validate()?;
    let layout = problem.layout();
    let t0 = Instant::now();
    let mut lin = linearize(problem, &layout, options.loss, options.worker_count)?;
    let mut lin_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut cost = total_cost(&lin);
    if layout.is_empty() {
        return Ok(SolverReport::noop(cost));
    }
    let mut report = SolverReport {
        initial_cost: cost,
        final_cost: cost,
        accepted_steps: 0,
        termination: Termination::MaxIterations,
        iterations: Vec::new(),
    };
    let mut lambda = options.initial_lambda;
    let mut undamped_rejected = false;
    let mut neq = SparseNormalEquations::assemble(layout.clone(), &lin);
    for iteration in 0..options.max_iterations {
        if neq.gradient_norm() < options.gradient_tol {
            report.termination = Termination::Gradient;
            break;
        }
        let ts = Instant::now();
        let factor = BlockCholesky::factor(&neq, lambda);
        let mut solve_ms = ts.elapsed().as_secs_f64() * 1e3;
        let dx = match factor {
            Ok(f) => {
                let dx = f.solve(&neq.b);
                solve_ms = ts.elapsed().as_secs_f64() * 1e3;
                dx
            }
            Err(err) => {
                undamped_rejected |= lambda == 0.0;
                lambda = if lambda == 0.0 {
                    options.initial_lambda
                } else {
                    lambda * options.lambda_up
                };
                report.iterations.push(IterationRecord {
                    iteration,
                    cost,
                    lambda,
                    step_norm: 0.0,
                    accepted: false,
                    linearize_ms: std::mem::take(&mut lin_ms),
                    solve_ms,
                });
                if lambda > LAMBDA_MAX {
                    return Err(err);
                }
                continue;
            }
        };
        let mut trial = problem.clone();
        trial.apply_increment(&layout, &dx)?;
        let tl = Instant::now();
        let trial_lin = linearize(&trial, &layout, options.loss, options.worker_count)?;
        let new_cost = total_cost(&trial_lin);
        lin_ms += tl.elapsed().as_secs_f64() * 1e3;
        let hdx = sparse_mul(&neq, &dx);
        let predicted = 2.0 * dx.dot(&neq.b) - dx.dot(&hdx);
        let actual = cost - new_cost;
        let step_norm = dx.norm();
        if new_cost.is_finite() && new_cost <= cost {
            *problem = trial;
            lin = trial_lin;
            let relative = if cost > 0.0 { actual / cost } else { 0.0 };
            cost = new_cost;
            report.accepted_steps += 1;
            let rho = if predicted > 0.0 { actual / predicted } else { 0.0 };
            // A damped step on an exact quadratic model is followed by an
            // undamped one instead of stopping short of the minimum.
            let exact_model = rho > 0.999 && lambda > 0.0 && !undamped_rejected;
            lambda = if rho > 0.999 && !undamped_rejected {
                0.0
            } else {
                (lambda * options.lambda_down).max(0.0)
            };
            report.iterations.push(IterationRecord {
                iteration,
                cost,
                lambda,
                step_norm,
                accepted: true,
                linearize_ms: std::mem::take(&mut lin_ms),
                solve_ms,
            });
            neq = SparseNormalEquations::assemble(layout.clone(), &lin);
            if relative < options.cost_decrease_tol && !exact_model {
                report.termination = Termination::CostDecrease;
                break;
            }
        } else {
            undamped_rejected |= lambda == 0.0;
            lambda = if lambda == 0.0 {
                options.initial_lambda
            } else {
                lambda * options.lambda_up
            };
            report.iterations.push(IterationRecord {
                iteration,
                cost,
                lambda,
                step_norm,
                accepted: false,
                linearize_ms: std::mem::take(&mut lin_ms),
                solve_ms,
            });
            if lambda > LAMBDA_MAX {
                report.termination = Termination::Stalled;
                break;
            }
        }
    }
    if !cost.is_finite() {
        return Err(MheError::NonFinite {
            residual: "total cost".into(),
        });
    }
    if report.termination == Termination::MaxIterations
        && neq.gradient_norm() < options.gradient_tol
    {
        report.termination = Termination::Gradient;
    }
    report.final_cost = cost;
    if options.check_observability {
        BlockCholesky::factor(&neq, 0.0)?;
    }
    Ok(report)
}

/// `H x` using the stored upper blocks.
pub fn sparse_mul(neq: &SparseNormalEquations, x: &DVector<f64>) -> DVector<f64> {
    let layout = &neq.layout;
    let mut out = DVector::zeros(layout.dim());
    for (&(i, j), m) in &neq.blocks {
        let (oi, di) = (layout.offset(i), layout.block_dim(i));
        let (oj, dj) = (layout.offset(j), layout.block_dim(j));
        let xj = x.rows(oj, dj);
        let mut oi_seg = out.rows_mut(oi, di);
        oi_seg += m * xj;
        if i != j {
            let xi = x.rows(oi, di).into_owned();
            let mut oj_seg = out.rows_mut(oj, dj);
            oj_seg += m.transpose() * xi;
        }
    }
    out
}

/// Linearizes the problem at its current values and assembles `H`, `b`.
pub fn normal_equations(problem: &Problem, options: &SolverOptions) -> Result<SparseNormalEquations> {
    let layout = problem.layout();
    let lin = linearize(problem, &layout, options.loss, options.worker_count)?;
    Ok(SparseNormalEquations::assemble(layout, &lin))
}

/// Blocks of `H^{-1}` for the requested parameters, as one joint matrix in
/// the order given.
pub fn covariance(problem: &Problem, keys: &[ParamKey], options: &SolverOptions) -> Result<DMatrix<f64>> {
    let neq = normal_equations(problem, options)?;
    let factor = BlockCholesky::factor(&neq, 0.0)?;
    let layout = &neq.layout;
    let mut indices = Vec::new();
    for k in keys {
        let i = layout.position(k).ok_or_else(|| {
            MheError::Configuration(format!("`{k}` is not an active parameter of the problem"))
        })?;
        indices.extend(layout.offset(i)..layout.offset(i) + layout.block_dim(i));
    }
    let cols = factor.inverse_columns(&indices);
    let mut out = DMatrix::zeros(indices.len(), indices.len());
    for (r, &idx) in indices.iter().enumerate() {
        for c in 0..indices.len() {
            out[(r, c)] = cols[(idx, c)];
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}
