//! Strapdown IMU integration and error-state covariance propagation.
//!
//! Error-state layout (21): `δθ_I, δv, δp, δb_g, δb_a, δθ_C, δp_IC`.

use nalgebra::{SMatrix, SVector, Vector4};

use crate::error::{Error, Result};
use crate::geom::{attitude_error, correct_quat, omega_matrix, quat_to_rot, skew, Quat, RotMat, Vec3};

pub const IMU_DIM: usize = 21;
pub const NOISE_DIM: usize = 12;

// Block offsets inside the 21-dim IMU error state.
pub const TH: usize = 0;
pub const VEL: usize = 3;
pub const POS: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;
pub const TH_C: usize = 15;
pub const P_IC: usize = 18;

/// Largest accepted gap between consecutive IMU samples.
pub const MAX_IMU_DT: f64 = 0.05;

/// Standard gravity used for unit conversions.
pub const G0: f64 = 9.81;

pub type ErrorCov21 = SMatrix<f64, IMU_DIM, IMU_DIM>;
pub type Mat21 = SMatrix<f64, IMU_DIM, IMU_DIM>;
pub type Mat21x12 = SMatrix<f64, IMU_DIM, NOISE_DIM>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Measured angular rate, rad/s.
    pub gyro: Vec3,
    /// Measured specific force, m/s².
    pub accel: Vec3,
}

/// Navigation, bias and extrinsic state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuState {
    /// Global-to-body frame rotation (`C_G^I`).
    pub q_gi: Quat,
    /// Velocity in the global frame.
    pub v: Vec3,
    /// Position in the global frame.
    pub p: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
    /// IMU-to-camera frame rotation (`C_I^C`).
    pub q_ic: Quat,
    /// Camera position in the IMU frame.
    pub p_ic: Vec3,
}

pub type ImuErrorVec = SVector<f64, IMU_DIM>;

impl ImuState {
    /// `x̂ ⊞ δx`: attitudes corrected multiplicatively, the rest additively.
    pub fn perturbed(&self, dx: &ImuErrorVec) -> ImuState {
        let v3 = |o: usize| Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        ImuState {
            q_gi: correct_quat(&self.q_gi, &v3(TH)),
            v: self.v + v3(VEL),
            p: self.p + v3(POS),
            bg: self.bg + v3(BG),
            ba: self.ba + v3(BA),
            q_ic: correct_quat(&self.q_ic, &v3(TH_C)),
            p_ic: self.p_ic + v3(P_IC),
        }
    }

    /// `x ⊟ x̂` with `self` as the true state.
    pub fn error_from(&self, estimate: &ImuState) -> ImuErrorVec {
        let mut dx = ImuErrorVec::zeros();
        let mut put = |o: usize, v: Vec3| dx.fixed_rows_mut::<3>(o).copy_from(&v);
        put(TH, attitude_error(&self.q_gi, &estimate.q_gi));
        put(VEL, self.v - estimate.v);
        put(POS, self.p - estimate.p);
        put(BG, self.bg - estimate.bg);
        put(BA, self.ba - estimate.ba);
        put(TH_C, attitude_error(&self.q_ic, &estimate.q_ic));
        put(P_IC, self.p_ic - estimate.p_ic);
        dx
    }
}

impl Default for ImuState {
    fn default() -> Self {
        ImuState {
            q_gi: Quat::identity(),
            v: Vec3::zeros(),
            p: Vec3::zeros(),
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
            q_ic: Quat::identity(),
            p_ic: Vec3::zeros(),
        }
    }
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_bg: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
}

impl NoiseSpec {
    /// Consumer-grade IMU: 0.6 deg/√h angle random walk, 200 μg/√Hz
    /// accelerometer noise, small bias walks.
    pub fn consumer_grade() -> Self {
        NoiseSpec { sigma_g: 0.6f64.to_radians() / 60.0, sigma_a: 200e-6 * G0, sigma_bg: 1e-5, sigma_ba: 1e-4 }
    }

    pub fn zero() -> Self {
        NoiseSpec { sigma_g: 0.0, sigma_a: 0.0, sigma_bg: 0.0, sigma_ba: 0.0 }
    }

    /// `Q = E[w wᵀ]` for `w = [n_g, n_a, n_bg, n_ba]`.
    pub fn q_matrix(&self) -> SMatrix<f64, NOISE_DIM, NOISE_DIM> {
        let mut q = SMatrix::<f64, NOISE_DIM, NOISE_DIM>::zeros();
        for (block, s) in [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba].into_iter().enumerate() {
            for i in 0..3 {
                q[(3 * block + i, 3 * block + i)] = s * s;
            }
        }
        q
    }
}

pub fn default_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -G0)
}

/// Bias-compensated rate and specific force.
pub fn bias_compensate(sample: &ImuSample, state: &ImuState) -> (Vec3, Vec3) {
    (sample.gyro - state.bg, sample.accel - state.ba)
}

#[derive(Clone, Copy)]
struct Kinematic {
    q: Vector4<f64>,
    v: Vec3,
    p: Vec3,
}

fn derivative(k: &Kinematic, omega: &Vec3, f: &Vec3, g: &Vec3) -> Kinematic {
    let c = quat_to_rot(&Quat::from_vector(&k.q));
    Kinematic { q: 0.5 * omega_matrix(omega) * k.q, v: c.transpose() * f + g, p: k.v }
}

fn axpy(a: &Kinematic, h: f64, d: &Kinematic) -> Kinematic {
    Kinematic { q: a.q + h * d.q, v: a.v + h * d.v, p: a.p + h * d.p }
}

/// One RK4 step over `dt` (any sign) with bias-compensated inputs at both
/// ends; the mid-point input is the linear interpolation.
pub fn rk4_step(state: &ImuState, (w0, f0): (Vec3, Vec3), (w1, f1): (Vec3, Vec3), dt: f64, g: &Vec3) -> ImuState {
    let (wm, fm) = (0.5 * (w0 + w1), 0.5 * (f0 + f1));
    let y0 = Kinematic { q: state.q_gi.as_vector(), v: state.v, p: state.p };
    let k1 = derivative(&y0, &w0, &f0, g);
    let k2 = derivative(&axpy(&y0, 0.5 * dt, &k1), &wm, &fm, g);
    let k3 = derivative(&axpy(&y0, 0.5 * dt, &k2), &wm, &fm, g);
    let k4 = derivative(&axpy(&y0, dt, &k3), &w1, &f1, g);
    let s = dt / 6.0;
    let mut out = *state;
    out.q_gi = Quat::from_vector(&(y0.q + s * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q)));
    out.v = y0.v + s * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v);
    out.p = y0.p + s * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p);
    out
}

/// Integrates the nominal state from `s0` to `s1`. Biases and extrinsics are
/// held constant.
pub fn rk4_propagate(state: &ImuState, s0: &ImuSample, s1: &ImuSample, g: &Vec3) -> Result<ImuState> {
    let dt = s1.t - s0.t;
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::NonIncreasingTime { t0: s0.t, t1: s1.t });
    }
    if dt > MAX_IMU_DT + 1e-12 {
        return Err(Error::StepTooLarge { dt, max: MAX_IMU_DT });
    }
    Ok(rk4_step(state, bias_compensate(s0, state), bias_compensate(s1, state), dt, g))
}

/// Error-state Jacobians `F` (21×21) and `G` (21×12).
pub fn continuous_jacobians(state: &ImuState, omega_hat: &Vec3, f_hat: &Vec3) -> (Mat21, Mat21x12) {
    let ct: RotMat = quat_to_rot(&state.q_gi).transpose();
    let i3 = RotMat::identity();
    let mut f = Mat21::zeros();
    f.fixed_view_mut::<3, 3>(TH, TH).copy_from(&(-skew(omega_hat)));
    f.fixed_view_mut::<3, 3>(TH, BG).copy_from(&(-i3));
    f.fixed_view_mut::<3, 3>(VEL, TH).copy_from(&(-ct * skew(f_hat)));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-ct));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&i3);

    let mut g = Mat21x12::zeros();
    g.fixed_view_mut::<3, 3>(TH, 0).copy_from(&(-i3));
    g.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&(-ct));
    g.fixed_view_mut::<3, 3>(BG, 6).copy_from(&i3);
    g.fixed_view_mut::<3, 3>(BA, 9).copy_from(&i3);
    (f, g)
}

/// First-order transition matrix and trapezoidal discrete noise.
pub fn discretize(f: &Mat21, g: &Mat21x12, noise: &NoiseSpec, dt: f64) -> (Mat21, Mat21) {
    let phi = Mat21::identity() + f * dt;
    let gqg = g * noise.q_matrix() * g.transpose();
    let qd = (gqg + phi * gqg * phi.transpose()) * (0.5 * dt);
    (phi, symmetrize21(&qd))
}

pub fn propagate_cov(p: &ErrorCov21, phi: &Mat21, qd: &Mat21) -> ErrorCov21 {
    symmetrize21(&(phi * p * phi.transpose() + qd))
}

fn symmetrize21(m: &Mat21) -> Mat21 {
    (m + m.transpose()) * 0.5
}
