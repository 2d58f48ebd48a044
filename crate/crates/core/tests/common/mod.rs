#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use msckf::filter::{FilterConfig, Msckf};
use msckf::geom::{attitude_error, correct_quat, Quat, RotMat, Vec3};
use msckf::propagation::{
    bias_compensate, continuous_jacobians, default_gravity, rk4_step, ErrorCov21, ImuErrorVec, ImuSample, ImuState,
    NoiseSpec, IMU_DIM,
};
use msckf::state::{augment, camera_pose_from_imu, camera_pose_jacobian, AugmentedState, CameraPose};
use msckf::strategies::{ekf_update, information_update_oracle, StrategyKind, UpdateReport};
use msckf::vision::{point_jacobians, project, MeasurementBlock, MeasurementNoise};

pub fn random_quat(rng: &mut impl Rng) -> Quat {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Quat::from_axis_angle(&axis.normalize(), rng.random_range(-3.0..3.0))
}

pub fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

pub fn random_imu_state(rng: &mut impl Rng) -> ImuState {
    ImuState {
        q_gi: random_quat(rng),
        v: random_vec(rng, 5.0),
        p: random_vec(rng, 30.0),
        bg: random_vec(rng, 0.01),
        ba: random_vec(rng, 0.05),
        q_ic: random_quat(rng),
        p_ic: random_vec(rng, 0.1),
    }
}

/// Largest entrywise relative error, with entries below a thousandth of the
/// largest analytic entry compared on that scale instead.
pub fn rel_err(num: &DMatrix<f64>, ana: &DMatrix<f64>) -> f64 {
    let floor = (ana.amax() * 1e-3).max(1e-12);
    num.iter().zip(ana.iter()).map(|(n, a)| (n - a).abs() / a.abs().max(floor)).fold(0.0, f64::max)
}

/// Central mixed difference of the error after an RK4 step of length `tau`
/// against the analytic continuous-time `F`. Returns the relative error.
pub fn f_jacobian_error(rng: &mut impl Rng) -> f64 {
    let est = random_imu_state(rng);
    let meas =
        ImuSample { t: 0.0, gyro: random_vec(rng, 1.0), accel: random_vec(rng, 3.0) + Vec3::new(0.0, 0.0, 9.81) };
    let g = default_gravity();
    let (h, tau) = (1e-4, 1e-4);
    let step = |x: &ImuState, dt: f64| {
        let u = bias_compensate(&meas, x);
        rk4_step(x, u, u, dt, &g)
    };
    let err = |s: f64, dt: f64, j: usize| -> ImuErrorVec {
        let mut e = ImuErrorVec::zeros();
        e[j] = s;
        step(&est.perturbed(&e), dt).error_from(&step(&est, dt))
    };
    let mut num = DMatrix::zeros(IMU_DIM, IMU_DIM);
    for j in 0..IMU_DIM {
        let col = (err(h, tau, j) - err(h, -tau, j) - err(-h, tau, j) + err(-h, -tau, j)) / (4.0 * h * tau);
        num.set_column(j, &col);
    }
    let (w, f) = bias_compensate(&meas, &est);
    let (fa, _) = continuous_jacobians(&est, &w, &f);
    rel_err(&num, &DMatrix::from_iterator(IMU_DIM, IMU_DIM, fa.iter().copied()))
}

/// Finite-difference check of the camera-pose Jacobian with respect to the
/// IMU error state and of the projection Jacobians with respect to the
/// camera pose and landmark.
pub fn measurement_jacobian_error(rng: &mut impl Rng) -> f64 {
    let h = 1e-6;
    let imu = random_imu_state(rng);
    let (q_gc, p_gc) = camera_pose_from_imu(&imu);
    let cam = CameraPose { id: 0, t: 0.0, q_gc, p_gc };

    let mut num_j = DMatrix::zeros(6, IMU_DIM);
    for j in 0..IMU_DIM {
        let pose = |s: f64| {
            let mut e = ImuErrorVec::zeros();
            e[j] = s;
            let (q, p) = camera_pose_from_imu(&imu.perturbed(&e));
            let mut out = DVector::zeros(6);
            out.rows_mut(0, 3).copy_from(&attitude_error(&q, &q_gc));
            out.rows_mut(3, 3).copy_from(&(p - p_gc));
            out
        };
        num_j.set_column(j, &((pose(h) - pose(-h)) / (2.0 * h)));
    }
    let ana_j = camera_pose_jacobian(&imu);
    let mut worst = rel_err(&num_j, &DMatrix::from_iterator(6, IMU_DIM, ana_j.iter().copied()));

    let c = cam.rotation();
    let pf = p_gc
        + c.transpose()
            * Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..20.0));
    let (hc, hf) = point_jacobians(&pf, &cam).expect("landmark in front");
    let mut num_c = DMatrix::zeros(2, 6);
    for k in 0..6 {
        let z = |s: f64| {
            let mut d = [0.0; 6];
            d[k] = s;
            let mut c2 = cam;
            c2.q_gc = correct_quat(&cam.q_gc, &Vec3::new(d[0], d[1], d[2]));
            c2.p_gc += Vec3::new(d[3], d[4], d[5]);
            project(&pf, &c2).expect("landmark in front")
        };
        num_c.set_column(k, &((z(h) - z(-h)) / (2.0 * h)));
    }
    let mut num_f = DMatrix::zeros(2, 3);
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        num_f.set_column(k, &((project(&(pf + e), &cam).unwrap() - project(&(pf - e), &cam).unwrap()) / (2.0 * h)));
    }
    worst = worst.max(rel_err(&num_c, &DMatrix::from_iterator(2, 6, hc.iter().copied())));
    worst.max(rel_err(&num_f, &DMatrix::from_iterator(2, 3, hf.iter().copied())))
}

pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() * 0.1 + DMatrix::identity(n, n) * 0.05
}

/// Largest difference between two states sharing a window layout.
pub fn state_diff(a: &AugmentedState, b: &AugmentedState) -> f64 {
    let mut d = a.imu.error_from(&b.imu).amax();
    for (pa, pb) in a.window.iter().zip(&b.window) {
        d = d.max(attitude_error(&pa.q_gc, &pb.q_gc).amax()).max((pa.p_gc - pb.p_gc).amax());
    }
    d
}

/// Runs the covariance-form update and the information-form oracle on one
/// random system; returns the largest deviation in state and covariance.
pub fn information_deviation(rng: &mut impl Rng) -> f64 {
    let poses = rng.random_range(0..=1usize);
    let mut st = AugmentedState::new(random_imu_state(rng), 20);
    let mut p = DMatrix::identity(IMU_DIM, IMU_DIM);
    for i in 0..poses {
        augment(&mut st, &mut p, i as u64, i as f64).expect("window has room");
    }
    let n = st.dim();
    let p = random_spd(rng, n);
    let m = rng.random_range(1..=10usize);
    let block = MeasurementBlock {
        h: DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)),
        resid: DVector::from_fn(m, |_, _| rng.random_range(-0.1..0.1)),
        noise: MeasurementNoise::Isotropic(rng.random_range(0.01..1.0)),
        pose_ids: vec![],
        constraints: 0,
        annihilation: 0.0,
    };
    let (mut s1, mut p1) = (st.clone(), p.clone());
    let (mut s2, mut p2) = (st, p);
    assert!(ekf_update(&mut s1, &mut p1, &block).expect("dimensions agree"));
    information_update_oracle(&mut s2, &mut p2, &block).expect("invertible");
    state_diff(&s1, &s2).max((&p1 - &p2).amax())
}

/// IMU moving at 1 m/s along global y, camera looking along +x.
pub fn line_truth(t: f64) -> ImuState {
    ImuState {
        v: Vec3::new(0.0, 1.0, 0.0),
        p: Vec3::new(0.0, t, 0.0),
        q_ic: Quat::from_rot(&RotMat::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)),
        p_ic: Vec3::new(0.05, 0.04, 0.03),
        ..ImuState::default()
    }
}

/// One landmark seen in frames `0..seen` of `frames` along the line. Returns
/// the filter and per-frame reports.
pub fn scripted_single_feature(strategy: StrategyKind, seen: usize, frames: usize) -> (Msckf, Vec<UpdateReport>) {
    let landmark = Vec3::new(6.0, 0.5, 0.3);
    let accel = Vec3::new(0.0, 0.0, 9.81);
    let mut cfg = FilterConfig::new(strategy);
    cfg.noise = NoiseSpec::zero();
    cfg.health_checks = true;
    let mut filter = Msckf::new(line_truth(0.0), ErrorCov21::identity() * 1e-6, cfg).expect("valid config");
    filter.propagate(&ImuSample { t: 0.0, gyro: Vec3::zeros(), accel }).unwrap();
    let mut reports = Vec::new();
    for frame in 0..frames {
        let t = frame as f64 / 10.0;
        if frame > 0 {
            for k in 1..=10 {
                filter.propagate(&ImuSample { t: t - 0.1 + k as f64 / 100.0, gyro: Vec3::zeros(), accel }).unwrap();
            }
        }
        let (q_gc, p_gc) = camera_pose_from_imu(&line_truth(t));
        let cam = CameraPose { id: 0, t, q_gc, p_gc };
        let obs = if frame < seen { vec![(0, project(&landmark, &cam).unwrap())] } else { Vec::new() };
        reports.push(filter.process_frame(t, &obs).unwrap());
    }
    (filter, reports)
}
