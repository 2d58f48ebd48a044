//! One landmark seen in five consecutive frames and then lost, run through
//! each update strategy. Prints per-frame constraint and update counts.
//!
//!     cargo run --release --example feature_accounting

use msckf::filter::{FilterConfig, Msckf};
use msckf::geom::{Quat, RotMat, Vec3};
use msckf::propagation::{ErrorCov21, ImuSample, ImuState, NoiseSpec};
use msckf::state::{camera_pose_from_imu, CameraPose};
use msckf::strategies::StrategyKind;
use msckf::vision::project;

fn truth(t: f64) -> ImuState {
    ImuState {
        v: Vec3::new(0.0, 1.0, 0.0),
        p: Vec3::new(0.0, t, 0.0),
        q_ic: Quat::from_rot(&RotMat::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)),
        p_ic: Vec3::new(0.05, 0.04, 0.03),
        ..ImuState::default()
    }
}

fn main() -> msckf::Result<()> {
    let landmark = Vec3::new(6.0, 0.5, 0.3);
    let accel = Vec3::new(0.0, 0.0, 9.81);
    for strategy in [StrategyKind::Delayed, StrategyKind::ImmediateAll, StrategyKind::ImmediateK(3)] {
        let mut cfg = FilterConfig::new(strategy);
        cfg.noise = NoiseSpec::zero();
        let mut filter = Msckf::new(truth(0.0), ErrorCov21::identity() * 1e-6, cfg)?;
        filter.propagate(&ImuSample { t: 0.0, gyro: Vec3::zeros(), accel })?;
        let mut per_frame = Vec::new();
        for frame in 0..7 {
            let t = frame as f64 / 10.0;
            if frame > 0 {
                for k in 1..=10 {
                    filter.propagate(&ImuSample { t: t - 0.1 + k as f64 / 100.0, gyro: Vec3::zeros(), accel })?;
                }
            }
            let (q_gc, p_gc) = camera_pose_from_imu(&truth(t));
            let cam = CameraPose { id: 0, t, q_gc, p_gc };
            let obs = if frame < 5 { vec![(0, project(&landmark, &cam)?)] } else { Vec::new() };
            per_frame.push(filter.process_frame(t, &obs)?.constraints);
        }
        let totals = filter.totals();
        println!(
            "{:<14} constraints {:>3}  updates {}  IMU corrections {}  per frame {:?}",
            strategy.label(),
            totals.constraints,
            totals.update_events,
            totals.imu_corrections,
            per_frame
        );
    }
    Ok(())
}
