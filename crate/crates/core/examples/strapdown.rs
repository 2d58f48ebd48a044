//! Dead-reckons the simulated circle with RK4 and propagates the 21-state
//! error covariance alongside it.
//!
//!     cargo run --release --example strapdown

use msckf::geom::{attitude_error, Vec3};
use msckf::propagation::{
    bias_compensate, continuous_jacobians, default_gravity, discretize, propagate_cov, rk4_propagate, ErrorCov21,
    ImuSample, NoiseSpec, POS, TH,
};
use msckf::sim::{true_state, SimConfig};

fn main() -> msckf::Result<()> {
    let cfg = SimConfig::noiseless();
    let g = default_gravity();
    let noise = NoiseSpec::consumer_grade();
    let dt = 1.0 / cfg.imu_rate;
    let sample = |t: f64| {
        let s = cfg.truth(t);
        ImuSample { t, gyro: s.omega, accel: s.f }
    };

    let mut x = true_state(&cfg, 0.0, Vec3::zeros(), Vec3::zeros());
    let mut p = ErrorCov21::identity() * 1e-12;
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12}",
        "t [s]", "pos err [m]", "att err [deg]", "pos sd [m]", "att sd [deg]"
    );
    let steps = (60.0 * cfg.imu_rate) as usize;
    for k in 0..steps {
        let (s0, s1) = (sample(k as f64 * dt), sample((k + 1) as f64 * dt));
        let (w, f) = bias_compensate(&s0, &x);
        let (fc, gc) = continuous_jacobians(&x, &w, &f);
        let (phi, qd) = discretize(&fc, &gc, &noise, dt);
        p = propagate_cov(&p, &phi, &qd);
        x = rk4_propagate(&x, &s0, &s1, &g)?;
        if (k + 1) % 1000 == 0 {
            let t = (k + 1) as f64 * dt;
            let truth = cfg.truth(t);
            let pos_sd = (p[(POS, POS)] + p[(POS + 1, POS + 1)] + p[(POS + 2, POS + 2)]).sqrt();
            let att_sd = (p[(TH, TH)] + p[(TH + 1, TH + 1)] + p[(TH + 2, TH + 2)]).sqrt().to_degrees();
            println!(
                "{t:>6.1} {:>12.3e} {:>12.3e} {pos_sd:>12.3} {att_sd:>12.3}",
                (x.p - truth.p).norm(),
                attitude_error(&truth.q_gi, &x.q_gi).norm().to_degrees()
            );
        }
    }
    Ok(())
}
