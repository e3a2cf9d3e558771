//! Linear-Gaussian fixture, an independent Kalman filter oracle and small
//! matrix helpers shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use mhe_core::engine::{BlockSpec, Engine, EngineConfig, Measurement, StateLayout};
use mhe_core::models::{ConstantVelocity, LinearObservation};
use mhe_core::problem::{ProcessMeasurement, UpdateMeasurement};
use mhe_core::ManifoldKind;
use mhe_harness::iekf::Iekf;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const Q: f64 = 0.2;
pub const SIGMA: f64 = 0.3;
pub const UPDATE_HZ: u32 = 10;
pub const PROCESS_HZ: u32 = 50;
pub const INFO: [f64; 4] = [4.0, 4.0, 1.0, 1.0];

/// Mean and covariance of the newest state after an update.
pub type Posterior = (f64, DVector<f64>, DMatrix<f64>);

/// 2-D constant-velocity target with noisy accelerations and position fixes.
pub fn linear_fixture(steps: u32, seed: u64) -> Vec<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut events = Vec::new();
    let ratio = PROCESS_HZ / UPDATE_HZ;
    let dt = 1.0 / PROCESS_HZ as f64;
    let mut p = [0.0f64; 2];
    let mut v = [0.5f64, -0.2];
    for j in 0..=(steps - 1) * ratio {
        let t = j as f64 * dt;
        let a = [unit.sample(&mut rng), unit.sample(&mut rng)];
        for i in 0..2 {
            p[i] += v[i] * dt + 0.5 * a[i] * dt * dt;
            v[i] += a[i] * dt;
        }
        events.push(Measurement::Process(ProcessMeasurement::new("cv", t, DVector::from_vec(a.to_vec()))));
        if j % ratio == 0 {
            let z = DVector::from_vec(vec![p[0] + SIGMA * unit.sample(&mut rng), p[1] + SIGMA * unit.sample(&mut rng)]);
            let stamp = (j / ratio) as f64 / UPDATE_HZ as f64;
            events.push(Measurement::Update(
                UpdateMeasurement::with_sigmas("gps", stamp, z, &[SIGMA, SIGMA]).unwrap(),
            ));
        }
    }
    events
}

fn linear_layout() -> StateLayout {
    StateLayout::new(vec![BlockSpec {
        name: "x".into(),
        kind: ManifoldKind::Euclidean(4),
        initial: None,
    }])
}

fn models() -> (Arc<ConstantVelocity>, Arc<LinearObservation>) {
    (
        Arc::new(ConstantVelocity::new("cv", 0, 2, Q)),
        Arc::new(LinearObservation::leading("gps", 0, 2, 4)),
    )
}

pub fn linear_engine(batch_size: usize, marginalize: bool) -> Engine {
    let config = EngineConfig {
        batch_size,
        spawn_sources: vec!["gps".into()],
        initial_information: INFO.to_vec(),
        marginalize,
        ..EngineConfig::default()
    };
    let mut engine = Engine::new(config, linear_layout()).unwrap();
    let (cv, gps) = models();
    engine.add_process_model(cv).unwrap();
    engine.add_update_model(gps).unwrap();
    engine
}

pub fn linear_iekf() -> Iekf {
    let mut f = Iekf::new(linear_layout(), INFO.to_vec(), 5).unwrap();
    let (cv, gps) = models();
    f.add_process_model(cv).unwrap();
    f.add_update_model(gps).unwrap();
    f
}

/// Replays the fixture through the engine, optimizing after every update.
pub fn mhe_posteriors(events: &[Measurement], batch_size: usize, marginalize: bool) -> Vec<Posterior> {
    let mut engine = linear_engine(batch_size, marginalize);
    let mut out = Vec::new();
    for e in events {
        let is_update = matches!(e, Measurement::Update(_));
        engine.ingest(e.clone()).unwrap();
        if is_update {
            let est = engine.optimize_window().unwrap();
            let x = DVector::from_vec(est.values["x"].clone());
            out.push((est.stamp, x, engine.newest_covariance().unwrap()));
        }
    }
    out
}

/// Replays the fixture through the harness IEKF.
pub fn iekf_posteriors(events: &[Measurement]) -> Vec<Posterior> {
    let mut f = linear_iekf();
    let mut out = Vec::new();
    for e in events {
        match e {
            Measurement::Process(p) => f.ingest_process(p.clone()).unwrap(),
            Measurement::Update(u) => {
                let report = f.update(u.stamp, std::slice::from_ref(u)).unwrap();
                let b = report.posterior;
                out.push((b.stamp, b.blocks[0].value().clone(), b.covariance));
            }
        }
    }
    out
}

/// Textbook Kalman filter for the fixture.
pub struct Kalman {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

impl Kalman {
    pub fn new(z0: &DVector<f64>, t0: f64) -> Self {
        let x = DVector::from_vec(vec![z0[0], z0[1], 0.0, 0.0]);
        let p = DMatrix::from_diagonal(&DVector::from_iterator(4, INFO.iter().map(|w| 1.0 / w)));
        Self { x, p, t: t0 }
    }

    pub fn predict(&mut self, a: &DVector<f64>, t: f64) {
        let dt = t - self.t;
        let mut f = DMatrix::identity(4, 4);
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let mut g = DMatrix::zeros(4, 2);
        g[(0, 0)] = 0.5 * dt * dt;
        g[(1, 1)] = 0.5 * dt * dt;
        g[(2, 0)] = dt;
        g[(3, 1)] = dt;
        let mut q = DMatrix::zeros(4, 4);
        for i in 0..2 {
            q[(i, i)] = Q * dt.powi(3) / 3.0;
            q[(i, i + 2)] = Q * dt * dt / 2.0;
            q[(i + 2, i)] = Q * dt * dt / 2.0;
            q[(i + 2, i + 2)] = Q * dt;
        }
        self.x = &f * &self.x + g * a;
        self.p = &f * &self.p * f.transpose() + q;
        self.t = t;
    }

    pub fn update(&mut self, z: &DVector<f64>) {
        let h = DMatrix::identity(2, 4);
        let r = DMatrix::identity(2, 2) * (SIGMA * SIGMA);
        let s = &h * &self.p * h.transpose() + &r;
        let k = &self.p * h.transpose() * s.try_inverse().unwrap();
        self.x = &self.x + &k * (z - &h * &self.x);
        let ikh = DMatrix::identity(4, 4) - &k * &h;
        // Joseph form
        self.p = &ikh * &self.p * ikh.transpose() + &k * r * k.transpose();
    }
}

/// Runs the filter over the fixture and returns the posterior after each update.
pub fn kalman_posteriors(events: &[Measurement]) -> Vec<Posterior> {
    let mut kf: Option<Kalman> = None;
    let mut out = Vec::new();
    for e in events {
        match e {
            Measurement::Process(m) => {
                if let Some(kf) = kf.as_mut() {
                    if m.stamp > kf.t {
                        kf.predict(&m.input, m.stamp);
                    }
                }
            }
            Measurement::Update(u) => {
                let kf = kf.get_or_insert_with(|| Kalman::new(&u.payload, u.stamp));
                kf.update(&u.payload);
                out.push((u.stamp, kf.x.clone(), kf.p.clone()));
            }
        }
    }
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Largest mean and covariance difference between two posterior sequences;
/// infinite when their lengths or stamps differ.
pub fn max_difference(got: &[Posterior], want: &[Posterior]) -> (f64, f64) {
    if got.len() != want.len() {
        return (f64::INFINITY, f64::INFINITY);
    }
    got.iter().zip(want).fold((0.0, 0.0), |(dx, dp), ((t, x, p), (tk, xk, pk))| {
        if t != tk {
            return (f64::INFINITY, f64::INFINITY);
        }
        (dx.max((x - xk).amax()), dp.max(max_abs(&(p - pk))))
    })
}
