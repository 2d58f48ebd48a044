//! The sliding-window filter: IMU propagation, pose cloning, feature
//! bookkeeping and the per-frame update schedule.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector2};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::propagation::{
    bias_compensate, continuous_jacobians, default_gravity, discretize, propagate_cov, rk4_propagate, ErrorCov21,
    ImuSample, ImuState, NoiseSpec, IMU_DIM,
};
use crate::state::{augment, marginalize, AugmentedState, PoseId, DEFAULT_MAX_WINDOW};
use crate::strategies::{ekf_update, select_views_kcam, StrategyKind, UpdateReport, MIN_TRACK_LEN};
use crate::vision::{
    chi2_gate, nullspace_project, stack_feature, triangulate, FeatureId, FeatureTrack, MeasurementBlock, Observation,
    TrackStatus, TriangulationParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub strategy: StrategyKind,
    pub max_window: usize,
    /// Oldest poses dropped at once when the window fills up.
    pub prune_count: usize,
    pub noise: NoiseSpec,
    pub gravity: Vec3,
    /// Feature measurement sigma in normalized image units.
    pub meas_sigma: f64,
    pub triangulation: TriangulationParams,
    pub min_track_len: usize,
    pub chi2_gating: bool,
    /// Check covariance health after every step. Costs one Cholesky per step.
    pub health_checks: bool,
}

impl FilterConfig {
    pub fn new(strategy: StrategyKind) -> Self {
        FilterConfig {
            strategy,
            max_window: DEFAULT_MAX_WINDOW,
            prune_count: 2,
            noise: NoiseSpec::consumer_grade(),
            gravity: default_gravity(),
            meas_sigma: 1.0 / 460.0,
            triangulation: TriangulationParams::default(),
            min_track_len: MIN_TRACK_LEN,
            chi2_gating: false,
            health_checks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if self.max_window < 3 || self.prune_count == 0 || self.prune_count >= self.max_window {
            return Err(Error::InvalidConfig(format!(
                "window of {} with prune count {} is unusable",
                self.max_window, self.prune_count
            )));
        }
        if self.min_track_len < 2 {
            return Err(Error::InvalidConfig("tracks need at least two views".into()));
        }
        if !(self.meas_sigma > 0.0) {
            return Err(Error::InvalidConfig("measurement sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Worst covariance conditions seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CovarianceHealth {
    pub checks: usize,
    pub max_asymmetry: f64,
    /// Steps where `P + 1e-9·tr(P)·I` failed a Cholesky factorization.
    pub indefinite_steps: usize,
    pub updates_checked: usize,
    /// Updates after which the trace grew.
    pub trace_increases: usize,
    pub max_trace_growth: f64,
}

impl CovarianceHealth {
    pub fn is_healthy(&self) -> bool {
        self.max_asymmetry <= 1e-9 && self.indefinite_steps == 0 && self.trace_increases == 0
    }

    fn check(&mut self, cov: &DMatrix<f64>) {
        self.checks += 1;
        let asym = (cov - cov.transpose()).amax();
        self.max_asymmetry = self.max_asymmetry.max(asym);
        let mut shifted = cov.clone();
        let eps = 1e-9 * cov.trace().abs();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += eps;
        }
        if shifted.cholesky().is_none() {
            self.indefinite_steps += 1;
        }
    }

    fn check_update(&mut self, before: f64, after: f64) {
        self.updates_checked += 1;
        let growth = after - before;
        if growth > 1e-12 * before.abs() {
            self.trace_increases += 1;
            self.max_trace_growth = self.max_trace_growth.max(growth);
        }
    }
}

pub struct Msckf {
    pub state: AugmentedState,
    pub cov: DMatrix<f64>,
    cfg: FilterConfig,
    tracks: BTreeMap<FeatureId, FeatureTrack>,
    last_imu: Option<ImuSample>,
    next_pose_id: PoseId,
    totals: UpdateReport,
    health: CovarianceHealth,
}

impl Msckf {
    pub fn new(imu: ImuState, cov: ErrorCov21, cfg: FilterConfig) -> Result<Self> {
        cfg.validate()?;
        let cov = DMatrix::from_fn(IMU_DIM, IMU_DIM, |r, c| cov[(r, c)]);
        Ok(Msckf {
            state: AugmentedState::new(imu, cfg.max_window),
            cov,
            cfg,
            tracks: BTreeMap::new(),
            last_imu: None,
            next_pose_id: 0,
            totals: UpdateReport::default(),
            health: CovarianceHealth::default(),
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn totals(&self) -> &UpdateReport {
        &self.totals
    }

    pub fn health(&self) -> &CovarianceHealth {
        &self.health
    }

    pub fn tracks(&self) -> &BTreeMap<FeatureId, FeatureTrack> {
        &self.tracks
    }

    /// Time of the last IMU sample consumed.
    pub fn time(&self) -> Option<f64> {
        self.last_imu.map(|s| s.t)
    }

    /// Consumes one IMU sample. The first sample only sets the clock.
    pub fn propagate(&mut self, sample: &ImuSample) -> Result<()> {
        let Some(prev) = self.last_imu else {
            self.last_imu = Some(*sample);
            return Ok(());
        };
        let next = rk4_propagate(&self.state.imu, &prev, sample, &self.cfg.gravity)?;
        let (w, f) = bias_compensate(&prev, &self.state.imu);
        let (fm, gm) = continuous_jacobians(&self.state.imu, &w, &f);
        let (phi, qd) = discretize(&fm, &gm, &self.cfg.noise, sample.t - prev.t);

        let n = self.cov.nrows();
        let pii: ErrorCov21 = self.cov.fixed_view::<IMU_DIM, IMU_DIM>(0, 0).into_owned();
        self.cov.fixed_view_mut::<IMU_DIM, IMU_DIM>(0, 0).copy_from(&propagate_cov(&pii, &phi, &qd));
        if n > IMU_DIM {
            let pic = phi * self.cov.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM));
            self.cov.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&pic.transpose());
            self.cov.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&pic);
        }
        self.state.imu = next;
        self.last_imu = Some(*sample);
        if self.cfg.health_checks {
            self.health.check(&self.cov);
        }
        Ok(())
    }

    /// Clones the current pose for an image taken at `t`, records the
    /// observations and runs the configured update. The filter must already
    /// be propagated to `t`.
    pub fn process_frame(&mut self, t: f64, observations: &[(FeatureId, Vector2<f64>)]) -> Result<UpdateReport> {
        let id = self.next_pose_id;
        augment(&mut self.state, &mut self.cov, id, t)?;
        self.next_pose_id += 1;
        if self.cfg.health_checks {
            self.health.check(&self.cov);
        }

        for track in self.tracks.values_mut() {
            track.status = TrackStatus::Lost;
        }
        for (fid, z) in observations {
            let track = self.tracks.entry(*fid).or_insert_with(|| FeatureTrack::new(*fid));
            if track.observations.last().is_some_and(|o| o.pose_id == id) {
                continue;
            }
            track.push(id, *z);
            track.status = TrackStatus::Active;
        }

        let mut report = UpdateReport::default();
        let blocks = match self.cfg.strategy {
            StrategyKind::Delayed => self.delayed_blocks(&mut report),
            kind => self.immediate_blocks(kind, &mut report),
        };
        self.apply(blocks, &mut report)?;

        self.tracks.retain(|_, t| t.status == TrackStatus::Active);
        if self.state.is_full() {
            self.prune()?;
        }
        self.totals.merge(&report);
        Ok(report)
    }

    /// Lost tracks with all their observations, plus the part of live tracks
    /// seen by poses about to be marginalized.
    fn delayed_blocks(&self, report: &mut UpdateReport) -> Vec<(FeatureId, MeasurementBlock)> {
        let mut blocks = Vec::new();
        let pruning: Vec<PoseId> = if self.state.is_full() {
            self.state.window.iter().take(self.cfg.prune_count).map(|p| p.id).collect()
        } else {
            Vec::new()
        };
        for (fid, track) in &self.tracks {
            let chosen: Vec<Observation> = match track.status {
                TrackStatus::Lost if track.len() >= self.cfg.min_track_len => track.observations.clone(),
                TrackStatus::Lost => continue,
                TrackStatus::Active if !pruning.is_empty() => {
                    let involved: Vec<_> =
                        track.observations.iter().filter(|o| pruning.contains(&o.pose_id)).copied().collect();
                    if involved.len() < 2 || track.len() < self.cfg.min_track_len {
                        continue;
                    }
                    involved
                }
                TrackStatus::Active => continue,
            };
            match self.feature_block(&track.observations, &chosen) {
                Some(b) => blocks.push((*fid, b)),
                None => report.features_skipped += 1,
            }
        }
        blocks
    }

    fn immediate_blocks(&self, kind: StrategyKind, report: &mut UpdateReport) -> Vec<(FeatureId, MeasurementBlock)> {
        let mut blocks = Vec::new();
        for (fid, track) in &self.tracks {
            if track.status != TrackStatus::Active || track.len() < self.cfg.min_track_len {
                continue;
            }
            let chosen: Vec<Observation> = match kind {
                StrategyKind::ImmediateK(k) => {
                    select_views_kcam(track.len(), k).into_iter().map(|i| track.observations[i]).collect()
                }
                _ => track.observations.clone(),
            };
            match self.feature_block(&track.observations, &chosen) {
                Some(b) => blocks.push((*fid, b)),
                None => report.features_skipped += 1,
            }
        }
        blocks
    }

    /// Triangulates from `all`, then builds the projected block from `used`.
    fn feature_block(&self, all: &[Observation], used: &[Observation]) -> Option<MeasurementBlock> {
        let p_f = triangulate(all, &self.state, &self.cfg.triangulation).ok()?;
        let stacked = stack_feature(used, &self.state, &p_f).ok()?;
        let block = nullspace_project(&stacked, self.cfg.meas_sigma).ok()?;
        if self.cfg.chi2_gating && !chi2_gate(&block, &self.cov) {
            return None;
        }
        Some(block)
    }

    fn apply(&mut self, blocks: Vec<(FeatureId, MeasurementBlock)>, report: &mut UpdateReport) -> Result<()> {
        if blocks.is_empty() {
            return Ok(());
        }
        for (fid, b) in &blocks {
            report.record_block(*fid, b);
        }
        let parts: Vec<MeasurementBlock> = blocks.into_iter().map(|(_, b)| b).collect();
        let Some(stacked) = MeasurementBlock::stack(&parts) else {
            return Err(Error::InvalidConfig("feature blocks disagree on noise".into()));
        };
        let trace = self.cov.trace();
        if ekf_update(&mut self.state, &mut self.cov, &stacked)? {
            report.record_update(self.state.window.iter().map(|p| p.id));
            if self.cfg.health_checks {
                self.health.check_update(trace, self.cov.trace());
                self.health.check(&self.cov);
            }
        }
        Ok(())
    }

    fn prune(&mut self) -> Result<()> {
        let ids: Vec<PoseId> = self.state.window.iter().take(self.cfg.prune_count).map(|p| p.id).collect();
        marginalize(&mut self.state, &mut self.cov, &ids)?;
        for track in self.tracks.values_mut() {
            track.retain_poses(|p| !ids.contains(&p));
        }
        self.tracks.retain(|_, t| !t.is_empty());
        if self.cfg.health_checks {
            self.health.check(&self.cov);
        }
        Ok(())
    }
}
