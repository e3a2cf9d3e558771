//! Residuals of a dataset evaluated at the ground truth.
//!
//! With zero sensor noise every residual vanishes at the truth, which
//! validates the simulator and the models against each other.

use mhe_core::engine::{cut_segments, Measurement};
use mhe_core::problem::{propagate, ProcessMeasurement, StaticSet};
use mhe_core::{MheError, ParameterBlock};

use crate::config::SimConfig;
use crate::config::EstimatorConfig;
use crate::error::{HarnessError, Result};
use crate::setup::{Setup, StaticValues};
use crate::sim::{Dataset, TruthRow};

/// Largest absolute residual component at the truth, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualCheck {
    pub max_update: f64,
    pub max_process: f64,
    pub updates: usize,
    pub process_intervals: usize,
}

/// State blocks of a setup's layout at a truth row.
pub fn truth_blocks(setup: &Setup, row: &TruthRow) -> Vec<ParameterBlock> {
    let b = setup.blocks;
    let mut blocks = vec![ParameterBlock::euclidean(&[0.0]); setup.layout.blocks.len()];
    let pose = row.pose();
    blocks[b.position] = pose.position_block();
    blocks[b.heading] = pose.heading_block();
    if let Some(v) = b.velocity {
        blocks[v] = ParameterBlock::euclidean(&[row.vx, row.vy]);
    }
    if let (Some(p), Some(h)) = (b.ee_position, b.ee_heading) {
        let ee = row.ee_pose();
        blocks[p] = ee.position_block();
        blocks[h] = ee.heading_block();
    }
    blocks
}

fn lookup<'a>(statics: &'a StaticSet, names: &[String]) -> Result<Vec<&'a ParameterBlock>> {
    names
        .iter()
        .map(|n| {
            statics
                .get(n)
                .ok_or_else(|| HarnessError::Data(format!("measurement needs unknown static `{n}`")))
        })
        .collect()
}

fn max_abs(v: &nalgebra::DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn estimator_error(step: usize, stamp: f64) -> impl Fn(MheError) -> HarnessError {
    move |source| HarnessError::Estimator { step, stamp, source }
}

/// Evaluates every update residual at its truth state and every process
/// model's prediction between consecutive update stamps against the truth.
pub fn residuals_at_truth(sim: &SimConfig, dataset: &Dataset) -> Result<ResidualCheck> {
    let setup = Setup::new(sim, &EstimatorConfig::default(), &dataset.landmarks, StaticValues::Truth)?;
    let statics: StaticSet = setup.statics.iter().map(|s| (s.name.clone(), s.block.clone())).collect();
    let truth = |t: f64| {
        dataset
            .truth_at(t, sim.process_rate)
            .ok_or_else(|| HarnessError::Data(format!("no truth at t = {t}")))
    };
    let mut check = ResidualCheck::default();
    let mut buffers: Vec<Vec<ProcessMeasurement>> = vec![Vec::new(); setup.process_models.len()];
    let mut update_stamps: Vec<f64> = Vec::new();

    for (step, m) in dataset.measurements.iter().enumerate() {
        let err = estimator_error(step, m.stamp());
        match m {
            Measurement::Process(p) => {
                if let Some(i) = setup.process_models.iter().position(|pm| pm.name() == p.source) {
                    buffers[i].push(p.clone());
                }
            }
            Measurement::Update(u) => {
                let model = setup
                    .update_models
                    .iter()
                    .find(|um| um.name() == u.source)
                    .ok_or_else(|| HarnessError::Data(format!("no update model for source `{}`", u.source)))?;
                let blocks = truth_blocks(&setup, truth(u.stamp)?);
                let state: Vec<&ParameterBlock> = model.state_blocks().iter().map(|&b| &blocks[b]).collect();
                let s = lookup(&statics, &model.statics(u))?;
                let out = model.error(&state, &s, u).map_err(&err)?;
                check.max_update = check.max_update.max(max_abs(&out.error));
                check.updates += 1;
                if update_stamps.last() != Some(&u.stamp) {
                    update_stamps.push(u.stamp);
                }
            }
        }
    }

    for (step, w) in update_stamps.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let start = truth_blocks(&setup, truth(a)?);
        let end = truth_blocks(&setup, truth(b)?);
        for (model, buffer) in setup.process_models.iter().zip(&buffers) {
            let (segments, covered) = cut_segments(buffer, a, b);
            if segments.is_empty() || covered < b {
                continue;
            }
            let portion: Vec<&ParameterBlock> = model.state_blocks().iter().map(|&i| &start[i]).collect();
            let s = lookup(&statics, &model.statics())?;
            let prop = propagate(model.as_ref(), &portion, &segments, &s, None).map_err(estimator_error(step, b))?;
            for (&i, predicted) in model.state_blocks().iter().zip(&prop.predicted) {
                let d = predicted.minus(&end[i]).map_err(estimator_error(step, b))?;
                check.max_process = check.max_process.max(max_abs(&d));
            }
            check.process_intervals += 1;
        }
    }
    Ok(check)
}
