//! Synthetic world: a circular trajectory inside a cylinder of point
//! features, a consumer-grade IMU and a 640×640 pinhole camera.
//!
//! Sensor streams can be written to and read back from CSV so recorded or
//! externally generated tracks can be replayed through the filter.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Quat, RotMat, Vec3};
use crate::propagation::{default_gravity, ImuSample, ImuState, NoiseSpec, G0};
use crate::state::camera_pose_from_imu;
use crate::vision::FeatureId;

/// RNG stream ids, so each random quantity is independent of the others.
pub mod streams {
    pub const FEATURES: u64 = 1;
    pub const IMU: u64 = 2;
    pub const CAMERA: u64 = 3;
    pub const INITIAL_ERROR: u64 = 4;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Circle of `radius` around the origin at `angular_rate`, with a vertical
/// sinusoid. The body x axis points away from the circle centre, y along the
/// direction of travel and z up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleTrajectory {
    pub radius: f64,
    pub angular_rate: f64,
    pub height_amplitude: f64,
    pub height_period: f64,
}

impl Default for CircleTrajectory {
    fn default() -> Self {
        CircleTrajectory {
            radius: 25.0,
            angular_rate: 2.0 * std::f64::consts::PI / 60.0,
            height_amplitude: 2.0,
            height_period: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    /// Global-to-body rotation.
    pub q_gi: Quat,
    pub p: Vec3,
    pub v: Vec3,
    /// Body angular rate.
    pub omega: Vec3,
    /// Specific force in the body frame.
    pub f: Vec3,
}

impl CircleTrajectory {
    pub fn sample(&self, t: f64) -> TruthSample {
        let (r, w) = (self.radius, self.angular_rate);
        let psi = w * t;
        let (s, c) = psi.sin_cos();
        let wh = if self.height_period > 0.0 { 2.0 * std::f64::consts::PI / self.height_period } else { 0.0 };
        let a_h = self.height_amplitude;
        let p = Vec3::new(r * c, r * s, a_h * (wh * t).sin());
        let v = Vec3::new(-r * w * s, r * w * c, a_h * wh * (wh * t).cos());
        let a = Vec3::new(-r * w * w * c, -r * w * w * s, -a_h * wh * wh * (wh * t).sin());
        let rot = RotMat::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        TruthSample {
            t,
            q_gi: Quat::from_rot(&rot),
            p,
            v,
            omega: Vec3::new(0.0, 0.0, w),
            f: rot * (a - default_gravity()),
        }
    }
}

/// Simulation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub duration: f64,
    pub n_features: usize,
    pub cylinder_radius: f64,
    pub cylinder_z: (f64, f64),
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub pixel_sigma: f64,
    pub p_ic: Vec3,
    /// IMU-to-camera rotation.
    pub q_ic: Quat,
    pub noise: NoiseSpec,
    /// Constant gyro bias magnitude, rad/s.
    pub gyro_bias: f64,
    /// Constant accelerometer bias magnitude, m/s².
    pub accel_bias: f64,
    pub trajectory: CircleTrajectory,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            imu_rate: 100.0,
            cam_rate: 10.0,
            duration: 120.0,
            n_features: 300,
            cylinder_radius: 50.0,
            cylinder_z: (-10.0, 10.0),
            fx: 460.0,
            fy: 460.0,
            cx: 255.0,
            cy: 255.0,
            width: 640.0,
            height: 640.0,
            pixel_sigma: 1.0,
            p_ic: Vec3::new(0.05, 0.04, 0.03),
            // Optical axis along IMU +x, image x along IMU −y, image y along IMU −z.
            q_ic: Quat::from_rot(&RotMat::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)),
            noise: NoiseSpec::consumer_grade(),
            gyro_bias: (50.0f64 / 3600.0).to_radians(),
            accel_bias: 100e-6 * G0,
            trajectory: CircleTrajectory::default(),
        }
    }
}

impl SimConfig {
    /// Default world with every noise source and bias switched off.
    pub fn noiseless() -> Self {
        SimConfig { pixel_sigma: 0.0, noise: NoiseSpec::zero(), gyro_bias: 0.0, accel_bias: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("imu_rate", self.imu_rate),
            ("cam_rate", self.cam_rate),
            ("duration", self.duration),
            ("cylinder_radius", self.cylinder_radius),
            ("fx", self.fx),
            ("fy", self.fy),
            ("width", self.width),
            ("height", self.height),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let ratio = self.imu_rate / self.cam_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidConfig("imu_rate must be a multiple of cam_rate".into()));
        }
        if self.cylinder_z.0 > self.cylinder_z.1 {
            return Err(Error::InvalidConfig("cylinder_z is inverted".into()));
        }
        if self.pixel_sigma < 0.0 || self.gyro_bias < 0.0 || self.accel_bias < 0.0 {
            return Err(Error::InvalidConfig("noise magnitudes must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn imu_steps(&self) -> usize {
        (self.duration * self.imu_rate).round() as usize
    }

    pub fn imu_per_frame(&self) -> usize {
        (self.imu_rate / self.cam_rate).round() as usize
    }

    pub fn truth(&self, t: f64) -> TruthSample {
        self.trajectory.sample(t)
    }
}

/// Points uniform in the cylinder volume.
pub fn gen_features(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..cfg.n_features)
        .map(|_| {
            let r = cfg.cylinder_radius * rng.random::<f64>().sqrt();
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(cfg.cylinder_z.0..=cfg.cylinder_z.1);
            Vec3::new(r * th.cos(), r * th.sin(), z)
        })
        .collect()
}

fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn random_direction(rng: &mut impl Rng) -> Vec3 {
    let d: [f64; 3] = UnitSphere.sample(rng);
    Vec3::from(d)
}

/// IMU samples at `imu_rate` from `t = 0` to `duration`, with the true bias
/// at each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vec3>,
    pub accel_bias: Vec<Vec3>,
}

pub fn synth_imu(cfg: &SimConfig, rng: &mut impl Rng) -> ImuStream {
    let n = cfg.imu_steps();
    let dt = 1.0 / cfg.imu_rate;
    let mut bg = random_direction(rng) * cfg.gyro_bias;
    let mut ba = random_direction(rng) * cfg.accel_bias;
    let sg = cfg.noise.sigma_g * cfg.imu_rate.sqrt();
    let sa = cfg.noise.sigma_a * cfg.imu_rate.sqrt();
    let mut out = ImuStream {
        samples: Vec::with_capacity(n + 1),
        gyro_bias: Vec::with_capacity(n + 1),
        accel_bias: Vec::with_capacity(n + 1),
    };
    for k in 0..=n {
        let t = k as f64 / cfg.imu_rate;
        let truth = cfg.truth(t);
        let gyro = truth.omega + bg + gaussian3(rng) * sg;
        let accel = truth.f + ba + gaussian3(rng) * sa;
        out.samples.push(ImuSample { t, gyro, accel });
        out.gyro_bias.push(bg);
        out.accel_bias.push(ba);
        bg += gaussian3(rng) * (cfg.noise.sigma_bg * dt.sqrt());
        ba += gaussian3(rng) * (cfg.noise.sigma_ba * dt.sqrt());
    }
    out
}

/// True IMU state at `t`, given the biases at that time.
pub fn true_state(cfg: &SimConfig, t: f64, bg: Vec3, ba: Vec3) -> ImuState {
    let s = cfg.truth(t);
    ImuState { q_gi: s.q_gi, v: s.v, p: s.p, bg, ba, q_ic: cfg.q_ic, p_ic: cfg.p_ic }
}

/// Feature observations at one camera epoch, sorted by feature id.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub observations: Vec<(FeatureId, Vector2<f64>)>,
}

/// Projects every feature at every camera epoch, keeping those in front of
/// the camera and inside the image, with pixel noise.
pub fn synth_camera_frames(cfg: &SimConfig, features: &[Vec3], rng: &mut impl Rng) -> Vec<CameraFrame> {
    let frames = (cfg.duration * cfg.cam_rate).round() as usize;
    (0..=frames)
        .map(|k| {
            let t = (k * cfg.imu_per_frame()) as f64 / cfg.imu_rate;
            let (q_gc, p_gc) = camera_pose_from_imu(&true_state(cfg, t, Vec3::zeros(), Vec3::zeros()));
            let c = q_gc.to_rot();
            let mut observations = Vec::new();
            for (id, pf) in features.iter().enumerate() {
                let pc = c * (pf - p_gc);
                if pc.z <= 0.0 {
                    continue;
                }
                let u = cfg.fx * pc.x / pc.z + cfg.cx;
                let v = cfg.fy * pc.y / pc.z + cfg.cy;
                if !(0.0..cfg.width).contains(&u) || !(0.0..cfg.height).contains(&v) {
                    continue;
                }
                let (nu, nv): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (u, v) = (u + cfg.pixel_sigma * nu, v + cfg.pixel_sigma * nv);
                observations.push((id as FeatureId, Vector2::new((u - cfg.cx) / cfg.fx, (v - cfg.cy) / cfg.fy)));
            }
            CameraFrame { t, observations }
        })
        .collect()
}

/// Ground-truth pose row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthPose {
    pub t: f64,
    pub q_gi: Quat,
    pub p: Vec3,
}

/// Everything a filter run consumes, plus the truth to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<CameraFrame>,
    /// Truth at every IMU sample time.
    pub truth: Vec<TruthPose>,
}

/// A generated world and its sensor streams.
#[derive(Clone, Debug)]
pub struct World {
    pub features: Vec<Vec3>,
    pub imu: ImuStream,
    pub sensors: SensorSet,
}

impl World {
    /// Full true IMU state (including biases) at IMU sample `k`.
    pub fn true_state(&self, cfg: &SimConfig, k: usize) -> ImuState {
        true_state(cfg, self.sensors.imu[k].t, self.imu.gyro_bias[k], self.imu.accel_bias[k])
    }
}

/// Generates the world for `seed`. A pure function of its inputs.
pub fn simulate(cfg: &SimConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let features = gen_features(cfg, &mut rng_for(seed, streams::FEATURES));
    let imu = synth_imu(cfg, &mut rng_for(seed, streams::IMU));
    let frames = synth_camera_frames(cfg, &features, &mut rng_for(seed, streams::CAMERA));
    let truth = imu
        .samples
        .iter()
        .map(|s| {
            let tr = cfg.truth(s.t);
            TruthPose { t: s.t, q_gi: tr.q_gi, p: tr.p }
        })
        .collect();
    let sensors = SensorSet { imu: imu.samples.clone(), frames, truth };
    Ok(World { features, imu, sensors })
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    t: f64,
    feature_id: FeatureId,
    zx: f64,
    zy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    t: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
    px: f64,
    py: f64,
    pz: f64,
}

pub const IMU_FILE: &str = "imu.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const TRUTH_FILE: &str = "truth.csv";

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse { path: path.to_path_buf(), line, msg: format!("{kind:?}") },
    }
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_rows(
        path,
        samples.iter().map(|s| ImuRow {
            t: s.t,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        }),
    )
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows: Vec<ImuRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| ImuSample { t: r.t, gyro: Vec3::new(r.gx, r.gy, r.gz), accel: Vec3::new(r.ax, r.ay, r.az) })
        .collect())
}

pub fn write_tracks_csv(path: &Path, frames: &[CameraFrame]) -> Result<()> {
    write_rows(
        path,
        frames
            .iter()
            .flat_map(|f| f.observations.iter().map(|(id, z)| TrackRow { t: f.t, feature_id: *id, zx: z.x, zy: z.y })),
    )
}

/// Reads tracks and groups consecutive rows with equal `t` into frames.
/// Epochs without observations do not appear.
pub fn read_tracks_csv(path: &Path) -> Result<Vec<CameraFrame>> {
    let rows: Vec<TrackRow> = read_rows(path)?;
    let mut frames: Vec<CameraFrame> = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        match frames.last_mut() {
            Some(f) if f.t == r.t => f.observations.push((r.feature_id, Vector2::new(r.zx, r.zy))),
            Some(f) if f.t > r.t => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    msg: format!("time {} goes backwards", r.t),
                })
            }
            _ => frames.push(CameraFrame { t: r.t, observations: vec![(r.feature_id, Vector2::new(r.zx, r.zy))] }),
        }
    }
    for f in &mut frames {
        f.observations.sort_by_key(|(id, _)| *id);
    }
    Ok(frames)
}

pub fn write_truth_csv(path: &Path, truth: &[TruthPose]) -> Result<()> {
    write_rows(
        path,
        truth.iter().map(|s| TruthRow {
            t: s.t,
            qx: s.q_gi.x,
            qy: s.q_gi.y,
            qz: s.q_gi.z,
            qw: s.q_gi.w,
            px: s.p.x,
            py: s.p.y,
            pz: s.p.z,
        }),
    )
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthPose>> {
    let rows: Vec<TruthRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| TruthPose { t: r.t, q_gi: Quat::new(r.qx, r.qy, r.qz, r.qw), p: Vec3::new(r.px, r.py, r.pz) })
        .collect())
}

impl SensorSet {
    /// Writes `imu.csv`, `tracks.csv` and `truth.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_imu_csv(&dir.join(IMU_FILE), &self.imu)?;
        write_tracks_csv(&dir.join(TRACKS_FILE), &self.frames)?;
        write_truth_csv(&dir.join(TRUTH_FILE), &self.truth)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(SensorSet {
            imu: read_imu_csv(&dir.join(IMU_FILE))?,
            frames: read_tracks_csv(&dir.join(TRACKS_FILE))?,
            truth: read_truth_csv(&dir.join(TRUTH_FILE))?,
        })
    }

    /// Truth pose at time `t`, if a row with that exact time exists.
    pub fn truth_at(&self, t: f64) -> Option<&TruthPose> {
        let i = self.truth.partition_point(|s| s.t < t);
        self.truth.get(i).filter(|s| s.t == t)
    }
}
