//! Exports simulated sensor sets as CSV, loads them back through the replay
//! path and compares the strategies on them.
//!
//!     cargo run --release --example export_and_replay -- [runs] [duration_s] [dir]

use std::path::PathBuf;

use msckf::bench::{export_sensor_sets, replay, BenchConfig};

fn main() -> msckf::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let duration = args.next().and_then(|a| a.parse().ok()).unwrap_or(30.0);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("msckf_replay"));

    let mut cfg = BenchConfig { runs, ..BenchConfig::default() };
    cfg.sim.duration = duration;
    let sets = export_sensor_sets(&cfg, &dir)?;
    println!("exported {} sets under {}", sets.len(), dir.display());

    for &s in &cfg.strategies {
        let a = replay(&cfg, s, &dir)?;
        println!(
            "{:<14} pos {:>7.3} m  att {:>7.3} deg  constraints {}",
            s.label(),
            a.pos_rmse_avg,
            a.att_rmse_avg_deg,
            a.constraints_total
        );
    }
    Ok(())
}
