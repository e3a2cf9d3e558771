//! Accuracy, consistency and timing summaries of a replay.

use mhe_core::manifold::wrap_angle;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::runner::RunOutput;
use crate::sim::Dataset;

/// Distribution of solve times in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Every statistic is zero when its sample is empty; the counts tell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Over the delayed estimate of every state.
    pub rms_position_error: f64,
    pub rms_heading_error: f64,
    /// Over the real-time estimate at every process stamp after the first state.
    pub rms_realtime_position_error: f64,
    pub consistency_median: f64,
    pub consistency_rms: f64,
    pub consistency_count: usize,
    pub timing: TimingStats,
    pub dropped_measurements: u64,
    pub estimates: usize,
}

fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Nearest-rank quantile of unsorted values; zero when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Median of unsorted values; zero when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let count = samples.len();
        let mean_ms = if count == 0 {
            0.0
        } else {
            samples.iter().sum::<f64>() / count as f64
        };
        Self {
            count,
            mean_ms,
            median_ms: median(samples),
            p95_ms: quantile(samples, 0.95),
            max_ms: samples.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub fn compute_metrics(run: &RunOutput, dataset: &Dataset, process_rate: f64) -> Result<MetricsReport> {
    let mut position = Vec::with_capacity(run.estimates.len());
    let mut heading = Vec::with_capacity(run.estimates.len());
    for e in &run.estimates {
        let truth = dataset
            .truth_at(e.stamp, process_rate)
            .ok_or_else(|| HarnessError::Data(format!("no truth at t = {}", e.stamp)))?;
        position.push((e.x - truth.x).hypot(e.y - truth.y));
        heading.push(wrap_angle(e.heading - truth.heading));
    }
    Ok(MetricsReport {
        rms_position_error: rms(position),
        rms_heading_error: rms(heading),
        rms_realtime_position_error: rms(run.steps.iter().filter_map(|s| s.position_error)),
        consistency_median: median(&run.consistency),
        consistency_rms: rms(run.consistency.iter().copied()),
        consistency_count: run.consistency.len(),
        timing: TimingStats::from_samples(&run.solve_ms),
        dropped_measurements: run.dropped,
        estimates: run.estimates.len(),
    })
}
