//! Ground-truth trajectories and noisy sensor streams.
//!
//! Time runs on an integer tick grid `t_k = k / process_rate`. The base
//! follows the differential-drive model exactly: the wheel speed stamped
//! `t_k` is held over `(t_{k-1}, t_k]`. The IMU inputs are the ones that move
//! the constant-velocity model exactly along the same truth, with the truth
//! velocity taken as the backward difference of positions. Update sensors
//! fire every `process_rate / update_rate` ticks, starting one update period
//! after `t = 0`.
//!
//! Noise for every sensor is drawn at every tick whether or not the sensor is
//! enabled, so datasets that differ only in their sensor flags share the same
//! truth and the same noise realisation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mhe_core::engine::io::write_ndjson;
use mhe_core::engine::Measurement;
use mhe_core::manifold::wrap_angle;
use mhe_core::models::{
    constvel_inverse, diffdrive_step, forward_kinematics, predict_relative, DiffDriveParams,
    PlanarKinematicState, PlanarPose,
};
use mhe_core::problem::{ProcessMeasurement, UpdateMeasurement};
use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{HarnessError, Result};

/// Source names of the simulated sensors.
pub mod source {
    pub const WHEELS: &str = "wheels";
    pub const IMU: &str = "imu";
    pub const ARM: &str = "arm";
    pub const BASE_TAG: &str = "base_tag";
    pub const EE_TAG: &str = "ee_tag";
}

/// Outliers carry this multiple of the nominal noise.
pub const OUTLIER_SCALE: f64 = 100.0;

/// Smallest standard deviation declared in a measurement's weight, so that
/// noise-free datasets still carry finite weights.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// True state at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub stamp: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub ee_x: f64,
    pub ee_y: f64,
    pub ee_heading: f64,
    pub q1: f64,
    pub q2: f64,
}

impl TruthRow {
    pub fn pose(&self) -> PlanarPose {
        PlanarPose::new(self.x, self.y, self.heading)
    }

    pub fn ee_pose(&self) -> PlanarPose {
        PlanarPose::new(self.ee_x, self.ee_y, self.ee_heading)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }
}

/// A simulated run: truth at every tick, the fiducial map and the
/// time-ordered measurement stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub truth: Vec<TruthRow>,
    pub landmarks: Vec<PlanarPose>,
    pub measurements: Vec<Measurement>,
}

impl Dataset {
    /// Truth at a tick stamp.
    pub fn truth_at(&self, stamp: f64, process_rate: f64) -> Option<&TruthRow> {
        let k = (stamp * process_rate).round();
        if k < 0.0 {
            return None;
        }
        self.truth.get(k as usize)
    }

    pub fn update_count(&self) -> usize {
        self.measurements
            .iter()
            .filter(|m| matches!(m, Measurement::Update(_)))
            .count()
    }

    /// Stamps carrying at least one process measurement, in order.
    pub fn process_stamps(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for m in &self.measurements {
            if let Measurement::Process(p) = m {
                if out.last() != Some(&p.stamp) {
                    out.push(p.stamp);
                }
            }
        }
        out
    }
}

struct Trajectory<'a>(&'a SimConfig);

impl Trajectory<'_> {
    fn body_rates(&self, t: f64) -> (f64, f64) {
        let c = &self.0.trajectory;
        let tau = std::f64::consts::TAU;
        let v = c.speed_mean + c.speed_amplitude * (tau * c.speed_frequency * t).sin();
        let w = c.turn_amplitude * (tau * c.turn_frequency * t + c.turn_phase).sin();
        (v, w)
    }

    fn wheel_speeds(&self, t: f64) -> (f64, f64) {
        let (v, w) = self.body_rates(t);
        let r = &self.0.robot;
        let half = 0.5 * w * r.track_width;
        ((v - half) / r.wheel_radius, (v + half) / r.wheel_radius)
    }

    fn joints(&self, t: f64) -> Vector2<f64> {
        let c = &self.0.trajectory;
        let tau = std::f64::consts::TAU;
        Vector2::from_fn(|i, _| c.joint_mean[i] + c.joint_amplitude[i] * (tau * c.joint_frequency[i] * t).sin())
    }
}

fn diffdrive_params(config: &SimConfig) -> DiffDriveParams {
    DiffDriveParams {
        wheel_radius: config.robot.wheel_radius,
        track_width: config.robot.track_width,
        ..DiffDriveParams::default()
    }
}

/// Truth at every tick `0..=ticks`.
pub fn generate_truth(config: &SimConfig) -> Vec<TruthRow> {
    let traj = Trajectory(config);
    let params = diffdrive_params(config);
    let dt = 1.0 / config.process_rate;
    let links = Vector2::new(config.robot.links[0], config.robot.links[1]);
    let row = |k: usize, pose: &PlanarPose, v: Vector2<f64>| {
        let t = config.tick_stamp(k);
        let q = traj.joints(t);
        let ee = pose.compose(&forward_kinematics(&links, &q));
        TruthRow {
            stamp: t,
            x: pose.position.x,
            y: pose.position.y,
            heading: pose.heading,
            vx: v.x,
            vy: v.y,
            ee_x: ee.position.x,
            ee_y: ee.position.y,
            ee_heading: ee.heading,
            q1: q[0],
            q2: q[1],
        }
    };
    let mut pose = PlanarPose::identity();
    let (v0, _) = traj.body_rates(0.0);
    let mut out = vec![row(0, &pose, Vector2::new(v0, 0.0))];
    for k in 1..=config.ticks() {
        let (wl, wr) = traj.wheel_speeds(config.tick_stamp(k));
        let next = diffdrive_step(&pose, wl, wr, dt, &params);
        let v = (next.position - pose.position) / dt;
        pose = next;
        out.push(row(k, &pose, v));
    }
    out
}

/// The fiducial map: explicit poses, or one every `spacing` seconds of truth.
pub fn generate_landmarks(config: &SimConfig, truth: &[TruthRow]) -> Vec<PlanarPose> {
    let l = &config.landmarks;
    if !l.poses.is_empty() {
        return l.poses.iter().map(|p| PlanarPose::new(p[0], p[1], p[2])).collect();
    }
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        let t = i as f64 * l.spacing;
        let k = (t * config.process_rate).round() as usize;
        let Some(row) = truth.get(k) else { break };
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let offset = PlanarPose::new(0.5 * l.spacing * config.trajectory.speed_mean, side * l.lateral_offset, -side * 1.2);
        out.push(row.pose().compose(&offset));
        i += 1;
    }
    out
}

fn nearest_visible(landmarks: &[PlanarPose], sensor: &PlanarPose, range: f64) -> Option<usize> {
    landmarks
        .iter()
        .enumerate()
        .map(|(i, l)| (i, (l.position - sensor.position).norm()))
        .filter(|(_, d)| *d <= range)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn floored(sigma: f64) -> f64 {
    sigma.max(SIGMA_FLOOR)
}

/// Simulates a dataset. Deterministic for a given configuration.
pub fn simulate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let truth = generate_truth(config);
    let landmarks = generate_landmarks(config, &truth);
    let traj = Trajectory(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = &config.noise;
    let sensors = &config.sensors;
    let dt = 1.0 / config.process_rate;
    let every = config.update_every();
    let camera = PlanarPose::new(
        config.robot.camera_offset[0],
        config.robot.camera_offset[1],
        config.robot.camera_offset[2],
    );
    let bias = Vector2::new(config.robot.joint_bias[0], config.robot.joint_bias[1]);
    let tag_sigmas = [floored(noise.tag_position), floored(noise.tag_position), floored(noise.tag_heading)];
    let joint_sigmas = [floored(noise.joint), floored(noise.joint), floored(noise.joint)];

    let mut out = Vec::new();
    for (k, row) in truth.iter().enumerate() {
        let t = row.stamp;
        let (wl, wr) = if k == 0 { (0.0, 0.0) } else { traj.wheel_speeds(t) };
        let wheel_noise = [gauss(&mut rng), gauss(&mut rng)];
        if sensors.wheels {
            let u = DVector::from_vec(vec![
                wl + noise.wheel_speed * wheel_noise[0],
                wr + noise.wheel_speed * wheel_noise[1],
            ]);
            out.push(Measurement::Process(ProcessMeasurement::new(source::WHEELS, t, u)));
        }
        let imu_noise = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
        if sensors.imu {
            let ideal = if k == 0 {
                nalgebra::Vector3::zeros()
            } else {
                let prev = &truth[k - 1];
                let from = PlanarKinematicState {
                    position: prev.pose().position,
                    heading: prev.heading,
                    velocity: prev.velocity(),
                };
                let to = PlanarKinematicState {
                    position: row.pose().position,
                    heading: row.heading,
                    velocity: row.velocity(),
                };
                constvel_inverse(&from, &to, dt)
            };
            let u = DVector::from_vec(vec![
                ideal[0] + noise.gyro * imu_noise[0],
                ideal[1] + noise.accel * imu_noise[1],
                ideal[2] + noise.accel * imu_noise[2],
            ]);
            out.push(Measurement::Process(ProcessMeasurement::new(source::IMU, t, u)));
        }
        if k == 0 || k % every != 0 {
            continue;
        }

        // Every update sensor draws its noise and outlier flag on every update tick.
        let base_draw = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
        let base_outlier = rng.random::<f64>() < config.outlier_fraction;
        let arm_draw = [gauss(&mut rng), gauss(&mut rng)];
        let arm_outlier = rng.random::<f64>() < config.outlier_fraction;
        let ee_draw = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
        let ee_outlier = rng.random::<f64>() < config.outlier_fraction;
        let scale = |outlier: bool| if outlier { OUTLIER_SCALE } else { 1.0 };

        let tag = |sensor: &PlanarPose, body: &PlanarPose, ext: &PlanarPose, draw: [f64; 3], outlier: bool| {
            let id = nearest_visible(&landmarks, sensor, config.landmarks.range)?;
            let z = predict_relative(body, ext, &landmarks[id]);
            let s = scale(outlier);
            let payload = DVector::from_vec(vec![
                z.position.x + s * noise.tag_position * draw[0],
                z.position.y + s * noise.tag_position * draw[1],
                wrap_angle(z.heading + s * noise.tag_heading * draw[2]),
            ]);
            Some((payload, id))
        };

        let body = row.pose();
        if sensors.base_tag && !config.in_blackout(t) {
            if let Some((payload, id)) = tag(&body.compose(&camera), &body, &camera, base_draw, base_outlier) {
                let m = UpdateMeasurement::with_sigmas(source::BASE_TAG, t, payload, &tag_sigmas)
                    .map_err(|e| HarnessError::Data(e.to_string()))?
                    .with_target(id.to_string());
                out.push(Measurement::Update(m));
            }
        }
        if sensors.arm {
            let s = scale(arm_outlier);
            let q = Vector2::new(row.q1, row.q2) - bias;
            let payload = DVector::from_vec(vec![
                q[0] + s * noise.joint * arm_draw[0],
                q[1] + s * noise.joint * arm_draw[1],
            ]);
            let m = UpdateMeasurement::with_sigmas(source::ARM, t, payload, &joint_sigmas)
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            out.push(Measurement::Update(m));
        }
        if sensors.ee_tag {
            let ee = row.ee_pose();
            if let Some((payload, id)) = tag(&ee, &ee, &PlanarPose::identity(), ee_draw, ee_outlier) {
                let m = UpdateMeasurement::with_sigmas(source::EE_TAG, t, payload, &tag_sigmas)
                    .map_err(|e| HarnessError::Data(e.to_string()))?
                    .with_target(id.to_string());
                out.push(Measurement::Update(m));
            }
        }
    }
    Ok(Dataset {
        truth,
        landmarks,
        measurements: out,
    })
}

const TRUTH_FILE: &str = "truth.csv";
const MEASUREMENTS_FILE: &str = "measurements.ndjson";
const LANDMARKS_FILE: &str = "landmarks.json";

/// Writes `truth.csv`, `measurements.ndjson` and `landmarks.json` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(TRUTH_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::io(&path, e))?;
    for row in &dataset.truth {
        w.serialize(row).map_err(|e| HarnessError::io(&path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join(MEASUREMENTS_FILE);
    let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for m in &dataset.measurements {
        write_ndjson(&mut w, m).map_err(|e| HarnessError::io(&path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join(LANDMARKS_FILE);
    let json = serde_json::to_string_pretty(&dataset.landmarks).map_err(|e| HarnessError::io(&path, e))?;
    std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(TRUTH_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| HarnessError::io(&path, e))?;
    let truth = r
        .deserialize()
        .collect::<std::result::Result<Vec<TruthRow>, _>>()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;

    let path = dir.join(MEASUREMENTS_FILE);
    let file = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut measurements = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: Measurement = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        measurements.push(m);
    }
    if measurements.windows(2).any(|w| w[1].stamp() < w[0].stamp()) {
        return Err(HarnessError::Data(format!("{} is not time ordered", path.display())));
    }

    let path = dir.join(LANDMARKS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let landmarks = serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    Ok(Dataset {
        truth,
        landmarks,
        measurements,
    })
}
