//! Compares the three update strategies over a few seeded runs of the
//! simulated world and writes the CSVs.
//!
//!     cargo run --release --example monte_carlo_compare -- [runs] [duration_s] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use msckf::bench::{emit_csv, run_monte_carlo, BenchConfig};

fn main() -> msckf::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let duration = args.next().and_then(|a| a.parse().ok()).unwrap_or(120.0);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("msckf_compare"));

    let mut cfg = BenchConfig { runs, ..BenchConfig::default() };
    cfg.sim.duration = duration;

    println!("{runs} runs of {duration} s");
    println!(
        "{:<16} {:>10} {:>10} {:>12} {:>8} {:>9} {:>8}",
        "strategy", "pos [m]", "att [deg]", "constraints", "updates", "diverged", "wall [s]"
    );
    let mut aggs = Vec::new();
    for &s in &cfg.strategies {
        let start = Instant::now();
        let a = run_monte_carlo(&cfg, s)?;
        println!(
            "{:<16} {:>10.3} {:>10.3} {:>12} {:>8} {:>9} {:>8.1}",
            s.label(),
            a.pos_rmse_avg,
            a.att_rmse_avg_deg,
            a.constraints_total,
            a.updates_total,
            a.diverged_runs,
            start.elapsed().as_secs_f64()
        );
        aggs.push(a);
    }
    emit_csv(&aggs, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
