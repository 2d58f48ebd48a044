//! Monte-Carlo benchmark: seeded runs of the simulated world through each
//! update strategy, RMSE aggregation and CSV output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{CovarianceHealth, FilterConfig, Msckf};
use crate::geom::{attitude_error, Vec3};
use crate::propagation::{ErrorCov21, ImuErrorVec, ImuState, NoiseSpec, BA, BG, G0, POS, P_IC, TH, TH_C, VEL};
use crate::sim::{rng_for, simulate, streams, SensorSet, SimConfig, TruthPose, IMU_FILE};
use crate::state::DEFAULT_MAX_WINDOW;
use crate::strategies::{StrategyKind, UpdateReport};

/// Position error beyond which a run counts as diverged, m.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

/// Share of diverged runs above which an aggregate is unreliable.
pub const UNRELIABLE_FRACTION: f64 = 0.2;

/// Initial error-state standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialSigmas {
    /// rad
    pub attitude: f64,
    pub velocity: f64,
    pub position: f64,
    /// rad/s
    pub gyro_bias: f64,
    /// m/s²
    pub accel_bias: f64,
    /// rad
    pub extrinsic_attitude: f64,
    pub lever_arm: f64,
}

impl Default for InitialSigmas {
    fn default() -> Self {
        InitialSigmas {
            attitude: 3f64.to_radians(),
            velocity: 0.1,
            position: 0.1,
            gyro_bias: (100.0f64 / 3600.0).to_radians(),
            accel_bias: 200e-6 * G0,
            extrinsic_attitude: 0.5f64.to_radians(),
            lever_arm: 0.01,
        }
    }
}

impl InitialSigmas {
    fn per_block(&self) -> [(usize, f64); 7] {
        [
            (TH, self.attitude),
            (VEL, self.velocity),
            (POS, self.position),
            (BG, self.gyro_bias),
            (BA, self.accel_bias),
            (TH_C, self.extrinsic_attitude),
            (P_IC, self.lever_arm),
        ]
    }

    pub fn covariance(&self) -> ErrorCov21 {
        let mut p = ErrorCov21::zeros();
        for (offset, sigma) in self.per_block() {
            for i in 0..3 {
                p[(offset + i, offset + i)] = sigma * sigma;
            }
        }
        p
    }

    /// One draw of the initial error.
    pub fn sample(&self, rng: &mut impl Rng) -> ImuErrorVec {
        let mut dx = ImuErrorVec::zeros();
        for (offset, sigma) in self.per_block() {
            for i in 0..3 {
                let n: f64 = rng.sample(StandardNormal);
                dx[offset + i] = sigma * n;
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub strategies: Vec<StrategyKind>,
    pub runs: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub max_window: usize,
    pub initial: InitialSigmas,
    /// Draw the initial estimate around the truth; otherwise start on it.
    pub perturb_initial: bool,
    /// IMU noise assumed by the filter.
    pub filter_noise: NoiseSpec,
    /// Pixel noise assumed by the filter.
    pub filter_pixel_sigma: f64,
    pub chi2_gating: bool,
    pub health_checks: bool,
    /// Record wall time per frame. Timings make outputs non-reproducible.
    pub measure_time: bool,
    /// Worker threads for the Monte-Carlo loop; `None` uses rayon's default.
    pub threads: Option<usize>,
    pub out: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            strategies: vec![StrategyKind::Delayed, StrategyKind::ImmediateAll, StrategyKind::ImmediateK(3)],
            runs: 50,
            seed: 0,
            sim: SimConfig::default(),
            max_window: DEFAULT_MAX_WINDOW,
            initial: InitialSigmas::default(),
            perturb_initial: true,
            filter_noise: NoiseSpec::consumer_grade(),
            filter_pixel_sigma: 1.0,
            chi2_gating: false,
            health_checks: false,
            measure_time: false,
            threads: None,
            out: PathBuf::from("bench_out"),
        }
    }
}

impl BenchConfig {
    /// Noise-free sensors and an exact initial estimate.
    pub fn noiseless() -> Self {
        BenchConfig { sim: SimConfig::noiseless(), perturb_initial: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("no strategy selected".into()));
        }
        if !(self.filter_pixel_sigma > 0.0) {
            return Err(Error::InvalidConfig("filter_pixel_sigma must be positive".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        self.sim.validate()?;
        self.filter_config(StrategyKind::Delayed).validate()
    }

    pub fn filter_config(&self, strategy: StrategyKind) -> FilterConfig {
        let mut cfg = FilterConfig::new(strategy);
        cfg.max_window = self.max_window;
        cfg.noise = self.filter_noise;
        cfg.meas_sigma = self.filter_pixel_sigma / self.sim.fx;
        cfg.triangulation = crate::vision::TriangulationParams::for_focal_length(self.sim.fx);
        cfg.chi2_gating = self.chi2_gating;
        cfg.health_checks = self.health_checks;
        cfg
    }
}

/// Errors of one filter run, sampled at camera epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub times: Vec<f64>,
    pub pos_err: Vec<f64>,
    /// Attitude error angle, deg.
    pub att_err_deg: Vec<f64>,
    pub totals: UpdateReport,
    /// Mean wall time per camera frame, s. Zero unless timing is enabled.
    pub mean_frame_time_s: f64,
    pub diverged: bool,
    pub health: CovarianceHealth,
}

fn nearest_truth(truth: &[TruthPose], t: f64) -> Option<&TruthPose> {
    let i = truth.partition_point(|s| s.t < t);
    let after = truth.get(i);
    let before = i.checked_sub(1).and_then(|j| truth.get(j));
    match (before, after) {
        (Some(b), Some(a)) => Some(if t - b.t <= a.t - t { b } else { a }),
        (b, a) => b.or(a),
    }
}

/// Feeds a sensor set through a filter started at `init`.
pub fn run_sensors(
    sensors: &SensorSet,
    init: ImuState,
    cov0: ErrorCov21,
    filter_cfg: FilterConfig,
    measure_time: bool,
) -> Result<RunResult> {
    let strategy = filter_cfg.strategy;
    let mut filter = Msckf::new(init, cov0, filter_cfg)?;
    let mut result = RunResult {
        seed: 0,
        strategy,
        times: Vec::with_capacity(sensors.frames.len()),
        pos_err: Vec::with_capacity(sensors.frames.len()),
        att_err_deg: Vec::with_capacity(sensors.frames.len()),
        totals: UpdateReport::default(),
        mean_frame_time_s: 0.0,
        diverged: false,
        health: CovarianceHealth::default(),
    };
    let mut next_imu = 0;
    let mut elapsed = 0.0;
    for frame in &sensors.frames {
        let start = measure_time.then(Instant::now);
        while next_imu < sensors.imu.len() && sensors.imu[next_imu].t <= frame.t {
            filter.propagate(&sensors.imu[next_imu])?;
            next_imu += 1;
        }
        if filter.time().is_none() {
            continue;
        }
        filter.process_frame(frame.t, &frame.observations)?;
        if let Some(start) = start {
            elapsed += start.elapsed().as_secs_f64();
        }
        let Some(truth) = nearest_truth(&sensors.truth, frame.t) else {
            return Err(Error::InvalidConfig("no ground truth to score against".into()));
        };
        let est = &filter.state.imu;
        let pos = (est.p - truth.p).norm();
        let att = attitude_error(&truth.q_gi, &est.q_gi).norm().to_degrees();
        result.times.push(frame.t);
        result.pos_err.push(pos);
        result.att_err_deg.push(att);
        if !(pos <= DIVERGENCE_THRESHOLD) || !att.is_finite() {
            result.diverged = true;
            break;
        }
    }
    if measure_time && !result.times.is_empty() {
        result.mean_frame_time_s = elapsed / result.times.len() as f64;
    }
    result.totals = filter.totals().clone();
    result.health = filter.health().clone();
    Ok(result)
}

/// Simulates `seed` and runs `strategy` on it.
pub fn run_once(cfg: &BenchConfig, strategy: StrategyKind, seed: u64) -> Result<RunResult> {
    let world = simulate(&cfg.sim, seed)?;
    let truth0 = world.true_state(&cfg.sim, 0);
    let init = if cfg.perturb_initial {
        truth0.perturbed(&cfg.initial.sample(&mut rng_for(seed, streams::INITIAL_ERROR)))
    } else {
        truth0
    };
    let mut r =
        run_sensors(&world.sensors, init, cfg.initial.covariance(), cfg.filter_config(strategy), cfg.measure_time)?;
    r.seed = seed;
    Ok(r)
}

/// Per-epoch RMSE across runs and its time average.
pub fn rmse(series: &[&[f64]]) -> Result<(Vec<f64>, f64)> {
    let Some(first) = series.first() else {
        return Err(Error::InvalidConfig("rmse of no series".into()));
    };
    let len = first.len();
    if len == 0 {
        return Err(Error::InvalidConfig("rmse of empty series".into()));
    }
    if let Some(bad) = series.iter().find(|s| s.len() != len) {
        return Err(Error::DimensionMismatch { expected: len, got: bad.len() });
    }
    let n = series.len() as f64;
    let per_epoch: Vec<f64> = (0..len).map(|t| (series.iter().map(|s| s[t] * s[t]).sum::<f64>() / n).sqrt()).collect();
    let avg = per_epoch.iter().sum::<f64>() / len as f64;
    Ok((per_epoch, avg))
}

/// Monte-Carlo summary for one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub times: Vec<f64>,
    pub pos_rmse: Vec<f64>,
    pub att_rmse_deg: Vec<f64>,
    pub pos_rmse_avg: f64,
    pub att_rmse_avg_deg: f64,
    pub constraints_total: usize,
    pub updates_total: usize,
    pub mean_frame_time_s: f64,
    pub diverged_runs: usize,
    pub unreliable: bool,
    /// Largest `|AᵀH_f|` entry over every block of every run.
    pub max_annihilation: f64,
}

/// Reduces runs (in the given order) into an aggregate. Diverged runs are
/// counted and left out of the RMSE.
pub fn aggregate(strategy: StrategyKind, runs: &[RunResult]) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no runs to aggregate".into()));
    }
    let kept: Vec<&RunResult> = runs.iter().filter(|r| !r.diverged).collect();
    let diverged_runs = runs.len() - kept.len();
    let (times, pos_rmse, att_rmse_deg, pos_avg, att_avg) = if kept.is_empty() {
        (Vec::new(), Vec::new(), Vec::new(), f64::NAN, f64::NAN)
    } else {
        let pos: Vec<&[f64]> = kept.iter().map(|r| r.pos_err.as_slice()).collect();
        let att: Vec<&[f64]> = kept.iter().map(|r| r.att_err_deg.as_slice()).collect();
        let (p, pa) = rmse(&pos)?;
        let (a, aa) = rmse(&att)?;
        (kept[0].times.clone(), p, a, pa, aa)
    };
    Ok(Aggregate {
        strategy,
        runs: runs.len(),
        times,
        pos_rmse,
        att_rmse_deg,
        pos_rmse_avg: pos_avg,
        att_rmse_avg_deg: att_avg,
        constraints_total: runs.iter().map(|r| r.totals.constraints).sum(),
        updates_total: runs.iter().map(|r| r.totals.update_events).sum(),
        mean_frame_time_s: runs.iter().map(|r| r.mean_frame_time_s).sum::<f64>() / runs.len() as f64,
        diverged_runs,
        unreliable: diverged_runs as f64 > UNRELIABLE_FRACTION * runs.len() as f64,
        max_annihilation: runs.iter().map(|r| r.totals.max_annihilation).fold(0.0, f64::max),
    })
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs seeds `seed..seed + runs` for one strategy in parallel and reduces
/// them in seed order.
pub fn run_monte_carlo_runs(cfg: &BenchConfig, strategy: StrategyKind) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|i| cfg.seed + i).collect();
    in_pool(cfg.threads, || seeds.par_iter().map(|&s| run_once(cfg, strategy, s)).collect())?
}

pub fn run_monte_carlo(cfg: &BenchConfig, strategy: StrategyKind) -> Result<Aggregate> {
    aggregate(strategy, &run_monte_carlo_runs(cfg, strategy)?)
}

/// Finds sensor sets under `dir`: either `dir` itself or its immediate
/// subdirectories, in name order.
pub fn find_sensor_sets(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(IMU_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut sets: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(IMU_FILE).is_file())
        .collect();
    sets.sort();
    if sets.is_empty() {
        return Err(Error::InvalidConfig(format!("no {IMU_FILE} in {} or its subdirectories", dir.display())));
    }
    Ok(sets)
}

/// Initial estimate for a replayed set: first truth pose, velocity from the
/// first two truth rows, zero biases and the configured extrinsics.
pub fn replay_initial_state(sensors: &SensorSet, sim: &SimConfig) -> Result<ImuState> {
    let (Some(a), Some(b)) = (sensors.truth.first(), sensors.truth.get(1)) else {
        return Err(Error::InvalidConfig("replay needs at least two truth rows".into()));
    };
    let v = if b.t > a.t { (b.p - a.p) / (b.t - a.t) } else { Vec3::zeros() };
    Ok(ImuState { q_gi: a.q_gi, v, p: a.p, bg: Vec3::zeros(), ba: Vec3::zeros(), q_ic: sim.q_ic, p_ic: sim.p_ic })
}

/// Runs one strategy over every sensor set found under `dir`.
pub fn replay_runs(cfg: &BenchConfig, strategy: StrategyKind, dir: &Path) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let sets = find_sensor_sets(dir)?;
    let loaded: Vec<SensorSet> = sets.iter().map(|p| SensorSet::load(p)).collect::<Result<_>>()?;
    let run = |(i, sensors): (usize, &SensorSet)| -> Result<RunResult> {
        let init = replay_initial_state(sensors, &cfg.sim)?;
        let mut r =
            run_sensors(sensors, init, cfg.initial.covariance(), cfg.filter_config(strategy), cfg.measure_time)?;
        r.seed = i as u64;
        Ok(r)
    };
    in_pool(cfg.threads, || loaded.par_iter().enumerate().map(run).collect())?
}

pub fn replay(cfg: &BenchConfig, strategy: StrategyKind, dir: &Path) -> Result<Aggregate> {
    aggregate(strategy, &replay_runs(cfg, strategy, dir)?)
}

/// Writes one simulated sensor set per seed into `dir/seed_<n>/`.
pub fn export_sensor_sets(cfg: &BenchConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    (0..cfg.runs as u64)
        .map(|i| {
            let seed = cfg.seed + i;
            let sub = dir.join(format!("seed_{seed:04}"));
            simulate(&cfg.sim, seed)?.sensors.export(&sub)?;
            Ok(sub)
        })
        .collect()
}

pub const SUMMARY_FILE: &str = "summary.csv";

pub fn rmse_file_name(strategy: StrategyKind) -> String {
    format!("rmse_{}.csv", strategy.label())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub t: f64,
    pub pos_rmse_m: f64,
    pub att_rmse_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub pos_rmse_m: f64,
    pub att_rmse_deg: f64,
    pub constraints_total: usize,
    pub updates_total: usize,
    pub mean_frame_time_s: f64,
    pub diverged_runs: usize,
}

impl From<&Aggregate> for SummaryRow {
    fn from(a: &Aggregate) -> Self {
        SummaryRow {
            strategy: a.strategy.label(),
            pos_rmse_m: a.pos_rmse_avg,
            att_rmse_deg: a.att_rmse_avg_deg,
            constraints_total: a.constraints_total,
            updates_total: a.updates_total,
            mean_frame_time_s: a.mean_frame_time_s,
            diverged_runs: a.diverged_runs,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse { path: path.to_path_buf(), line, msg: format!("{kind:?}") },
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes `rmse_<strategy>.csv` per aggregate and one `summary.csv`.
pub fn emit_csv(aggregates: &[Aggregate], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for a in aggregates {
        let rows: Vec<RmseRow> = a
            .times
            .iter()
            .zip(a.pos_rmse.iter().zip(&a.att_rmse_deg))
            .map(|(t, (p, q))| RmseRow { t: *t, pos_rmse_m: *p, att_rmse_deg: *q })
            .collect();
        write_csv(&dir.join(rmse_file_name(a.strategy)), &rows)?;
    }
    let summary: Vec<SummaryRow> = aggregates.iter().map(SummaryRow::from).collect();
    write_csv(&dir.join(SUMMARY_FILE), &summary)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn read_rmse_csv(path: &Path) -> Result<Vec<RmseRow>> {
    read_csv(path)
}

/// Either one strategy name or a list of them.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum StrategyList {
    One(String),
    Many(Vec<String>),
}

/// Flat `key = value` configuration file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub strategy: Option<StrategyList>,
    pub k: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub window: Option<usize>,
    pub threads: Option<usize>,
    pub measure_time: Option<bool>,
    pub chi2_gating: Option<bool>,
    pub duration: Option<f64>,
    pub imu_rate: Option<f64>,
    pub cam_rate: Option<f64>,
    pub n_features: Option<usize>,
    pub cylinder_radius: Option<f64>,
    pub pixel_sigma: Option<f64>,
    pub filter_pixel_sigma: Option<f64>,
    pub noiseless: Option<bool>,
    pub perturb_initial: Option<bool>,
    pub init_attitude_deg: Option<f64>,
    pub init_velocity: Option<f64>,
    pub init_position: Option<f64>,
    pub init_gyro_bias_deg_h: Option<f64>,
    pub init_accel_bias_ug: Option<f64>,
    pub init_extrinsic_attitude_deg: Option<f64>,
    pub init_lever_arm: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
            Error::Parse { path: path.to_path_buf(), line, msg: e.message().to_string() }
        })
    }

    /// Applies the file on top of `base`.
    pub fn apply(&self, mut cfg: BenchConfig) -> Result<BenchConfig> {
        if self.noiseless == Some(true) {
            let out = cfg.out.clone();
            cfg = BenchConfig { out, strategies: cfg.strategies, ..BenchConfig::noiseless() };
        }
        let k = self.k.unwrap_or(3);
        match &self.strategy {
            Some(StrategyList::One(s)) => cfg.strategies = vec![StrategyKind::parse_with_k(s, k)?],
            Some(StrategyList::Many(v)) => {
                cfg.strategies = v.iter().map(|s| StrategyKind::parse_with_k(s, k)).collect::<Result<_>>()?
            }
            None => {}
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            runs => runs,
            seed => seed,
            out => out,
            window => max_window,
            measure_time => measure_time,
            chi2_gating => chi2_gating,
            duration => sim.duration,
            imu_rate => sim.imu_rate,
            cam_rate => sim.cam_rate,
            n_features => sim.n_features,
            cylinder_radius => sim.cylinder_radius,
            pixel_sigma => sim.pixel_sigma,
            filter_pixel_sigma => filter_pixel_sigma,
            perturb_initial => perturb_initial,
            init_velocity => initial.velocity,
            init_position => initial.position,
            init_lever_arm => initial.lever_arm,
        );
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(v) = self.init_attitude_deg {
            cfg.initial.attitude = v.to_radians();
        }
        if let Some(v) = self.init_gyro_bias_deg_h {
            cfg.initial.gyro_bias = (v / 3600.0).to_radians();
        }
        if let Some(v) = self.init_accel_bias_ug {
            cfg.initial.accel_bias = v * 1e-6 * G0;
        }
        if let Some(v) = self.init_extrinsic_attitude_deg {
            cfg.initial.extrinsic_attitude = v.to_radians();
        }
        Ok(cfg)
    }
}
