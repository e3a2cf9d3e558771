//! Event-ordered replay of a dataset through an estimator.
//!
//! Measurements sharing a stamp form one step; process measurements are fed
//! before update measurements. At every process stamp the real-time
//! estimate is recorded: the newest estimated state propagated through the
//! buffered process measurements. At every update stamp the estimator is
//! first asked for that propagated estimate, then fuses the updates.
//!
//! The consistency of an update step is the position distance between the
//! delayed estimate, the newest state as optimized once the step's updates
//! are fused, and the real-time estimate of the same stamp made just before.
//! The accuracy metrics use each state's final estimate: for the
//! moving-horizon estimator, its value after the last optimization it took
//! part in; for the filter, its posterior.

use std::collections::BTreeMap;
use std::time::Instant;

use mhe_core::engine::{CalibrationReport, EstimateMetadata, EstimateOutput, Measurement};
use mhe_core::problem::UpdateMeasurement;
use mhe_core::MheError;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::iekf::Belief;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::setup::Setup;
use crate::sim::Dataset;

const POSITION: &str = "base/position";
const HEADING: &str = "base/heading";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mhe,
    Iekf,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Mhe => "mhe",
            EstimatorKind::Iekf => "iekf",
        })
    }
}

/// Base pose at a stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub stamp: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl PoseEstimate {
    fn from_values(stamp: f64, values: &BTreeMap<String, Vec<f64>>) -> Option<Self> {
        let p = values.get(POSITION)?;
        let h = values.get(HEADING)?;
        Some(Self {
            stamp,
            x: p[0],
            y: p[1],
            heading: h[0],
        })
    }

    fn distance(&self, other: &PoseEstimate) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One row per process stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub stamp: f64,
    pub truth_x: f64,
    pub truth_y: f64,
    pub truth_heading: f64,
    /// Stamp of the newest estimated state.
    pub estimate_stamp: Option<f64>,
    pub estimate_x: Option<f64>,
    pub estimate_y: Option<f64>,
    pub estimate_heading: Option<f64>,
    /// Real-time estimate at `stamp`.
    pub propagated_x: Option<f64>,
    pub propagated_y: Option<f64>,
    pub propagated_heading: Option<f64>,
    pub position_error: Option<f64>,
    pub heading_error: Option<f64>,
}

/// Everything recorded during a replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub estimator: EstimatorKind,
    pub steps: Vec<StepRow>,
    /// Final estimate of every state, in stamp order.
    pub estimates: Vec<PoseEstimate>,
    /// Consistency distance of every update step with a real-time estimate.
    pub consistency: Vec<f64>,
    /// Wall-clock time of every optimization or filter update, milliseconds.
    pub solve_ms: Vec<f64>,
    pub dropped: u64,
    /// Newest-state estimate after every step with updates.
    pub stream: Vec<EstimateOutput>,
}

impl RunOutput {
    fn new(estimator: EstimatorKind) -> Self {
        Self {
            estimator,
            steps: Vec::new(),
            estimates: Vec::new(),
            consistency: Vec::new(),
            solve_ms: Vec::new(),
            dropped: 0,
            stream: Vec::new(),
        }
    }
}

/// Consecutive measurements with identical stamps.
fn steps(measurements: &[Measurement]) -> impl Iterator<Item = &[Measurement]> {
    let mut rest = measurements;
    std::iter::from_fn(move || {
        let first = rest.first()?;
        let n = rest.iter().take_while(|m| m.stamp() == first.stamp()).count();
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Some(head)
    })
}

fn row(config: &Config, dataset: &Dataset, stamp: f64, newest: Option<PoseEstimate>, propagated: Option<PoseEstimate>) -> Result<StepRow> {
    let truth = dataset
        .truth_at(stamp, config.sim.process_rate)
        .ok_or_else(|| HarnessError::Data(format!("no truth at t = {stamp}")))?;
    let truth_pose = truth.pose();
    Ok(StepRow {
        stamp,
        truth_x: truth.x,
        truth_y: truth.y,
        truth_heading: truth.heading,
        estimate_stamp: newest.map(|e| e.stamp),
        estimate_x: newest.map(|e| e.x),
        estimate_y: newest.map(|e| e.y),
        estimate_heading: newest.map(|e| e.heading),
        propagated_x: propagated.map(|e| e.x),
        propagated_y: propagated.map(|e| e.y),
        propagated_heading: propagated.map(|e| e.heading),
        position_error: propagated.map(|e| (e.x - truth.x).hypot(e.y - truth.y)),
        heading_error: propagated.map(|e| mhe_core::manifold::wrap_angle(e.heading - truth_pose.heading).abs()),
    })
}

fn failed(step: usize, stamp: f64) -> impl Fn(MheError) -> HarnessError {
    move |source| HarnessError::Estimator { step, stamp, source }
}

/// Replays the dataset through the moving-horizon estimator.
pub fn run_mhe(config: &Config, dataset: &Dataset) -> Result<RunOutput> {
    let setup = Setup::from_config(config, &dataset.landmarks)?;
    let mut engine = setup.engine(&config.estimator, true)?;
    let tol = engine.config().attach_tolerance;
    let mut out = RunOutput::new(EstimatorKind::Mhe);
    let mut finals: BTreeMap<u64, PoseEstimate> = BTreeMap::new();
    let mut newest: Option<PoseEstimate> = None;

    for (step, group) in steps(&dataset.measurements).enumerate() {
        let stamp = group[0].stamp();
        let err = failed(step, stamp);
        let mut has_process = false;
        let mut updates = Vec::new();
        for m in group {
            match m {
                Measurement::Process(_) => {
                    engine.ingest(m.clone()).map_err(&err)?;
                    has_process = true;
                }
                Measurement::Update(_) => updates.push(m.clone()),
            }
        }
        let propagated = if engine.window_len() > 0 {
            let p = engine.forward_propagate(stamp).map_err(&err)?.propagated;
            p.filter(|p| !p.truncated)
                .and_then(|p| PoseEstimate::from_values(p.stamp, &p.values))
        } else {
            None
        };
        if has_process {
            out.steps.push(row(config, dataset, stamp, newest, propagated)?);
        }
        if updates.is_empty() {
            continue;
        }
        for m in updates {
            engine.ingest(m).map_err(&err)?;
        }
        if !engine.newest().is_some_and(|s| (s.stamp - stamp).abs() <= tol) {
            continue;
        }
        let start = Instant::now();
        let estimate = engine.optimize_window().map_err(&err)?;
        out.solve_ms.push(start.elapsed().as_secs_f64() * 1e3);
        for s in engine.states() {
            let values = s
                .blocks
                .iter()
                .zip(&engine.layout().blocks)
                .map(|(b, spec)| (spec.name.clone(), b.value().as_slice().to_vec()))
                .collect();
            if let Some(e) = PoseEstimate::from_values(s.stamp, &values) {
                finals.insert(s.id, e);
            }
        }
        let current = PoseEstimate::from_values(estimate.stamp, &estimate.values);
        if let (Some(d), Some(f)) = (current, propagated) {
            out.consistency.push(d.distance(&f));
        }
        newest = current;
        out.stream.push(estimate);
    }
    engine.finish();
    out.dropped = engine.stats().updates_dropped;
    out.estimates = finals.into_values().collect();
    Ok(out)
}

/// Replays the dataset through the IEKF.
pub fn run_iekf(config: &Config, dataset: &Dataset) -> Result<RunOutput> {
    let setup = Setup::from_config(config, &dataset.landmarks)?;
    let mut filter = setup.iekf(&config.estimator)?;
    let mut out = RunOutput::new(EstimatorKind::Iekf);
    let pose = |b: &Belief, values: &BTreeMap<String, Vec<f64>>| PoseEstimate::from_values(b.stamp, values);

    for (step, group) in steps(&dataset.measurements).enumerate() {
        let stamp = group[0].stamp();
        let err = failed(step, stamp);
        let mut has_process = false;
        let mut updates: Vec<UpdateMeasurement> = Vec::new();
        for m in group {
            match m {
                Measurement::Process(p) => {
                    filter.ingest_process(p.clone()).map_err(&err)?;
                    has_process = true;
                }
                Measurement::Update(u) => updates.push(u.clone()),
            }
        }
        if has_process {
            let (newest, propagated) = match filter.belief() {
                Some(b) => {
                    let predicted = filter.predict(stamp).map_err(&err)?;
                    (pose(b, &filter.values(b)), pose(&predicted, &filter.values(&predicted)))
                }
                None => (None, None),
            };
            out.steps.push(row(config, dataset, stamp, newest, propagated)?);
        }
        if updates.is_empty() {
            continue;
        }
        let initialized = filter.belief().is_some();
        let start = Instant::now();
        let report = filter.update(stamp, &updates).map_err(&err)?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        out.solve_ms.push(solve_ms);
        let values = filter.values(&report.posterior);
        let d = pose(&report.posterior, &values);
        if initialized {
            let f = pose(&report.prior, &filter.values(&report.prior));
            if let (Some(d), Some(f)) = (d, f) {
                out.consistency.push(d.distance(&f));
            }
        }
        out.estimates.extend(d);
        out.stream.push(EstimateOutput {
            stamp,
            values,
            propagated: None,
            covariance: Some(report.posterior.covariance.clone()),
            metadata: EstimateMetadata {
                state_id: out.stream.len() as u64,
                window_len: 1,
                termination: None,
                accepted_steps: report.iterations,
                iterations: report.iterations,
                final_cost: 0.0,
                solve_ms,
                stalled: false,
            },
        });
    }
    Ok(out)
}

pub fn run(kind: EstimatorKind, config: &Config, dataset: &Dataset) -> Result<RunOutput> {
    match kind {
        EstimatorKind::Mhe => run_mhe(config, dataset),
        EstimatorKind::Iekf => run_iekf(config, dataset),
    }
}

/// Replays and scores a dataset.
pub fn evaluate(kind: EstimatorKind, config: &Config, dataset: &Dataset) -> Result<(RunOutput, MetricsReport)> {
    let out = run(kind, config, dataset)?;
    let metrics = compute_metrics(&out, dataset, config.sim.process_rate)?;
    Ok((out, metrics))
}

/// Ingests the whole dataset without marginalization and solves for all
/// states and the calibrated statics at once.
pub fn calibrate(config: &Config, dataset: &Dataset) -> Result<CalibrationReport> {
    let setup = Setup::from_config(config, &dataset.landmarks)?;
    let mut engine = setup.engine(&config.estimator, false)?;
    for (step, m) in dataset.measurements.iter().enumerate() {
        engine.ingest(m.clone()).map_err(failed(step, m.stamp()))?;
    }
    engine.finish();
    let last = dataset.measurements.last().map_or(0.0, |m| m.stamp());
    engine
        .batch_calibrate()
        .map_err(failed(dataset.measurements.len(), last))
}
