use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use msckf::bench::{self, BenchConfig, FileConfig, StrategyList};

/// Monte-Carlo comparison of MSCKF update strategies.
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
struct Cli {
    /// Flat TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// delayed | immediate-all | immediate-k (repeatable).
    #[arg(long)]
    strategy: Vec<String>,
    /// Views per update for immediate-k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each simulated sensor set under <out>/sensors.
    #[arg(long)]
    export_sensors: bool,
    /// Run on exported sensor sets instead of simulating.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Cli {
    fn merged(&self) -> msckf::Result<FileConfig> {
        let mut f = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        match self.strategy.len() {
            0 => {}
            1 => f.strategy = Some(StrategyList::One(self.strategy[0].clone())),
            _ => f.strategy = Some(StrategyList::Many(self.strategy.clone())),
        }
        f.k = self.k.or(f.k);
        f.runs = self.runs.or(f.runs);
        f.seed = self.seed.or(f.seed);
        f.out = self.out.clone().or(f.out);
        f.threads = self.threads.or(f.threads);
        Ok(f)
    }
}

fn run(cli: &Cli) -> msckf::Result<()> {
    let cfg = cli.merged()?.apply(BenchConfig::default())?;
    cfg.validate()?;
    if cli.export_sensors {
        let dir = cfg.out.join("sensors");
        let sets = bench::export_sensor_sets(&cfg, &dir)?;
        eprintln!("exported {} sensor sets to {}", sets.len(), dir.display());
    }
    let mut aggs = Vec::with_capacity(cfg.strategies.len());
    for &s in &cfg.strategies {
        let a = match &cli.replay {
            Some(dir) => bench::replay(&cfg, s, dir)?,
            None => bench::run_monte_carlo(&cfg, s)?,
        };
        println!(
            "{:<14} runs {:>3}  pos {:>8.3} m  att {:>7.3} deg  constraints {:>9}  updates {:>6}  diverged {}{}",
            s.label(),
            a.runs,
            a.pos_rmse_avg,
            a.att_rmse_avg_deg,
            a.constraints_total,
            a.updates_total,
            a.diverged_runs,
            if a.unreliable { "  UNRELIABLE" } else { "" }
        );
        aggs.push(a);
    }
    bench::emit_csv(&aggs, &cfg.out)?;
    eprintln!("wrote {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
