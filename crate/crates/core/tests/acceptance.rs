//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `MSCKF_ACCEPT_RUNS` (default 50) and `MSCKF_ACCEPT_REPLAY_SETS` (default
//! 10) scale the Monte-Carlo parts. `MSCKF_ACCEPT_STRICT=1` turns any FAIL
//! into a non-zero exit.

mod common;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msckf::bench::{
    aggregate, emit_csv, export_sensor_sets, replay, rmse_file_name, run_monte_carlo_runs, run_once, Aggregate,
    BenchConfig, RunResult, SUMMARY_FILE,
};
use msckf::sim::SimConfig;
use msckf::strategies::StrategyKind;

const STRATEGIES: [StrategyKind; 3] = [StrategyKind::Delayed, StrategyKind::ImmediateAll, StrategyKind::ImmediateK(3)];

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

struct Comparison {
    delayed: (f64, f64),
    all: (f64, f64),
    k3: (f64, f64),
}

impl Comparison {
    fn from(aggs: &[Aggregate]) -> Self {
        let get = |s| aggs.iter().find(|a| a.strategy == s).map(|a| (a.pos_rmse_avg, a.att_rmse_avg_deg)).unwrap();
        Comparison {
            delayed: get(StrategyKind::Delayed),
            all: get(StrategyKind::ImmediateAll),
            k3: get(StrategyKind::ImmediateK(3)),
        }
    }

    fn gain(base: f64, x: f64) -> f64 {
        (base - x) / base
    }

    fn ordering_holds(&self) -> bool {
        self.delayed.0 > self.k3.0 && self.k3.0 >= self.all.0
    }

    fn describe(&self) -> String {
        format!(
            "pos m: delayed {:.3}, all {:.3} ({:+.1}%), k3 {:.3} ({:+.1}%); att deg: delayed {:.3}, all {:.3} ({:+.1}%), k3 {:.3} ({:+.1}%)",
            self.delayed.0,
            self.all.0,
            100.0 * Self::gain(self.delayed.0, self.all.0),
            self.k3.0,
            100.0 * Self::gain(self.delayed.0, self.k3.0),
            self.delayed.1,
            self.all.1,
            100.0 * Self::gain(self.delayed.1, self.all.1),
            self.k3.1,
            100.0 * Self::gain(self.delayed.1, self.k3.1),
        )
    }
}

fn criterion_1(rep: &mut Report) -> Vec<(StrategyKind, Vec<RunResult>)> {
    let runs = env_usize("MSCKF_ACCEPT_RUNS", 50);
    let cfg = BenchConfig { runs, ..BenchConfig::default() };
    let start = Instant::now();
    let results: Vec<_> = STRATEGIES.iter().map(|&s| (s, run_monte_carlo_runs(&cfg, s).unwrap())).collect();
    let aggs: Vec<_> = results.iter().map(|(s, r)| aggregate(*s, r).unwrap()).collect();
    let c = Comparison::from(&aggs);
    let pass = Comparison::gain(c.delayed.0, c.all.0) >= 0.15
        && Comparison::gain(c.delayed.0, c.k3.0) >= 0.10
        && Comparison::gain(c.delayed.1, c.all.1) >= 0.10
        && Comparison::gain(c.delayed.1, c.k3.1) >= 0.10
        && c.ordering_holds()
        && aggs.iter().all(|a| !a.unreliable);
    let diverged: Vec<_> = aggs.iter().map(|a| a.diverged_runs).collect();
    rep.line(
        1,
        pass,
        format!(
            "{runs} runs, {}; ordering delayed > k3 >= all {}; diverged {diverged:?}; {:.0} s",
            c.describe(),
            if c.ordering_holds() { "holds" } else { "violated" },
            start.elapsed().as_secs_f64()
        ),
    );
    results
}

fn criterion_2(rep: &mut Report) {
    let (d, _) = common::scripted_single_feature(StrategyKind::Delayed, 5, 7);
    let (a, _) = common::scripted_single_feature(StrategyKind::ImmediateAll, 5, 7);
    let d = (d.totals().constraints, d.totals().update_events);
    let a = (a.totals().constraints, a.totals().update_events, a.totals().imu_corrections);
    rep.line(
        2,
        d == (5, 1) && a == (12, 3, 3),
        format!("delayed constraints/updates {d:?} (want (5, 1)); all-cam constraints/updates/IMU corrections {a:?} (want (12, 3, 3))"),
    );
}

fn criterion_3(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = (0..100).map(|_| common::information_deviation(&mut rng)).fold(0.0, f64::max);
    rep.line(3, worst < 1e-9, format!("100 systems, max deviation {worst:.2e} (limit 1e-9)"));
}

fn criterion_4(rep: &mut Report, results: &[(StrategyKind, Vec<RunResult>)]) {
    let mut worst = 0.0f64;
    let mut row_mismatch = 0;
    let mut runs = 0;
    for (_, rs) in results {
        for r in rs {
            runs += 1;
            worst = worst.max(r.totals.max_annihilation);
            if r.totals.rows != 2 * r.totals.constraints - 3 * r.totals.features_used {
                row_mismatch += 1;
            }
        }
    }
    rep.line(
        4,
        worst < 1e-10 && row_mismatch == 0 && runs > 0,
        format!("{runs} full runs, max |A'H_f| {worst:.2e} (limit 1e-10), runs violating rows = 2M-3: {row_mismatch}"),
    );
}

fn criterion_5(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = (0..60).map(|_| common::f_jacobian_error(&mut rng)).fold(0.0, f64::max);
    let h = (0..60).map(|_| common::measurement_jacobian_error(&mut rng)).fold(0.0, f64::max);
    rep.line(
        5,
        f < 1e-4 && h < 1e-4,
        format!("60 states each, max relative error F {f:.2e}, measurement {h:.2e} (limit 1e-4)"),
    );
}

fn criterion_6(rep: &mut Report) {
    let cfg = BenchConfig::noiseless();
    let finals: Vec<f64> = STRATEGIES.iter().map(|&s| *run_once(&cfg, s, 0).unwrap().pos_err.last().unwrap()).collect();
    let worst = finals.iter().copied().fold(0.0, f64::max);
    rep.line(
        6,
        worst < 1e-2,
        format!(
            "final position error m {:?} (limit 1e-2)",
            finals.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    );
}

fn criterion_7(rep: &mut Report) {
    let cfg = BenchConfig { health_checks: true, ..BenchConfig::default() };
    let mut pass = true;
    let mut parts = Vec::new();
    for s in STRATEGIES {
        let h = run_once(&cfg, s, 0).unwrap().health;
        pass &= h.is_healthy() && h.checks > 0;
        parts.push(format!(
            "{}: {} checks, asym {:.1e}, indefinite {}, trace increases {}/{}",
            s.label(),
            h.checks,
            h.max_asymmetry,
            h.indefinite_steps,
            h.trace_increases,
            h.updates_checked
        ));
    }
    rep.line(7, pass, parts.join("; "));
}

fn emit_small(threads: usize, dir: &Path) {
    let cfg = BenchConfig {
        runs: 4,
        seed: 8,
        threads: Some(threads),
        sim: SimConfig { duration: 20.0, ..SimConfig::default() },
        ..BenchConfig::default()
    };
    let aggs: Vec<_> = STRATEGIES.iter().map(|&s| msckf::bench::run_monte_carlo(&cfg, s).unwrap()).collect();
    emit_csv(&aggs, dir).unwrap();
}

fn criterion_8(rep: &mut Report) {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    emit_small(1, dirs[0].path());
    emit_small(1, dirs[1].path());
    emit_small(2, dirs[2].path());
    let mut names = vec![SUMMARY_FILE.to_string()];
    names.extend(STRATEGIES.iter().map(|&s| rmse_file_name(s)));
    let read = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
    let identical = names.iter().all(|n| {
        let a = read(dirs[0].path(), n);
        a == read(dirs[1].path(), n) && a == read(dirs[2].path(), n)
    });
    rep.line(8, identical, format!("{} CSVs compared over two repeats and 1 vs 2 threads", names.len()));
}

fn criterion_9(rep: &mut Report, sim_results: &[(StrategyKind, Vec<RunResult>)]) {
    let sets = env_usize("MSCKF_ACCEPT_REPLAY_SETS", 10);
    let cfg = BenchConfig { runs: sets, ..BenchConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    export_sensor_sets(&cfg, dir.path()).unwrap();
    let aggs: Vec<_> = STRATEGIES.iter().map(|&s| replay(&cfg, s, dir.path()).unwrap()).collect();
    let replayed = Comparison::from(&aggs);
    let sim_aggs: Vec<_> = sim_results.iter().map(|(s, r)| aggregate(*s, r).unwrap()).collect();
    let simulated = Comparison::from(&sim_aggs);
    let rank = |c: &Comparison| {
        let mut v = [("delayed", c.delayed.0), ("all", c.all.0), ("k3", c.k3.0)];
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.map(|x| x.0)
    };
    rep.line(
        9,
        replayed.ordering_holds(),
        format!(
            "{sets} replayed sets, {}; worst-to-best replay {:?}, simulation {:?}",
            replayed.describe(),
            rank(&replayed),
            rank(&simulated)
        ),
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut rep = Report { failed: Vec::new() };
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    criterion_8(&mut rep);
    criterion_7(&mut rep);
    let results = criterion_1(&mut rep);
    criterion_4(&mut rep, &results);
    criterion_9(&mut rep, &results);
    println!("acceptance: {} of 9 criteria pass; failing {:?}", 9 - rep.failed.len(), rep.failed);
    if !rep.failed.is_empty() && std::env::var("MSCKF_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
