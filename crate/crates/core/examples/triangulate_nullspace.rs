//! Triangulates one landmark from a growing set of noisy views on the
//! simulated circle, then projects its stacked measurement onto the left
//! null space of the landmark Jacobian.
//!
//!     cargo run --release --example triangulate_nullspace

use nalgebra::{DMatrix, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use msckf::geom::Vec3;
use msckf::propagation::IMU_DIM;
use msckf::sim::{true_state, SimConfig};
use msckf::state::{augment, AugmentedState};
use msckf::vision::{nullspace_project, project, stack_feature, triangulate, Observation, TriangulationParams};

fn main() -> msckf::Result<()> {
    let cfg = SimConfig::default();
    let landmark = Vec3::new(48.0, 12.0, 1.5);
    let params = TriangulationParams::for_focal_length(cfg.fx);
    let pixel = Normal::new(0.0, cfg.pixel_sigma / cfg.fx).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut state = AugmentedState::new(true_state(&cfg, 0.0, Vec3::zeros(), Vec3::zeros()), 20);
    let mut cov = DMatrix::<f64>::identity(IMU_DIM, IMU_DIM) * 1e-6;
    let mut obs = Vec::new();

    println!("{:>5} {:>12} {:>6} {:>14}", "views", "error [m]", "rows", "max|A'H_f|");
    for id in 0..10u64 {
        let t = id as f64 / cfg.cam_rate;
        state.imu = true_state(&cfg, t, Vec3::zeros(), Vec3::zeros());
        augment(&mut state, &mut cov, id, t)?;
        let z = project(&landmark, state.window.last().expect("just augmented"))?;
        obs.push(Observation { pose_id: id, z: z + Vector2::new(pixel.sample(&mut rng), pixel.sample(&mut rng)) });
        if obs.len() < 2 {
            continue;
        }
        match triangulate(&obs, &state, &params) {
            Ok(p_f) => {
                let block = nullspace_project(&stack_feature(&obs, &state, &p_f)?, cfg.pixel_sigma / cfg.fx)?;
                println!(
                    "{:>5} {:>12.4} {:>6} {:>14.2e}",
                    obs.len(),
                    (p_f - landmark).norm(),
                    block.rows(),
                    block.annihilation
                );
            }
            Err(e) => println!("{:>5} rejected: {e}", obs.len()),
        }
    }
    Ok(())
}
