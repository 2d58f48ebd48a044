//! Feature measurements: pinhole projection in normalized coordinates, its
//! Jacobians, multi-view triangulation, per-feature stacking and the
//! left-null-space projection that removes the feature position.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geom::{skew, Vec3};
use crate::state::{AugmentedState, CameraPose, PoseId};

/// Smallest accepted camera-frame depth, m.
pub const DEPTH_MIN: f64 = 0.01;

pub type FeatureId = u64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub pose_id: PoseId,
    /// Normalized image coordinates `(x/z, y/z)`.
    pub z: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Lost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: FeatureId,
    /// Ordered by pose id, one per pose.
    pub observations: Vec<Observation>,
    pub status: TrackStatus,
}

impl FeatureTrack {
    pub fn new(feature_id: FeatureId) -> Self {
        FeatureTrack { feature_id, observations: Vec::new(), status: TrackStatus::Active }
    }

    /// Appends an observation. Pose ids must increase.
    pub fn push(&mut self, pose_id: PoseId, z: Vector2<f64>) {
        debug_assert!(self.observations.last().is_none_or(|o| o.pose_id < pose_id));
        self.observations.push(Observation { pose_id, z });
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn retain_poses(&mut self, f: impl Fn(PoseId) -> bool) {
        self.observations.retain(|o| f(o.pose_id));
    }
}

fn camera_point(p_f: &Vec3, cam: &CameraPose) -> Vec3 {
    cam.rotation() * (p_f - cam.p_gc)
}

fn projection_jacobian(pc: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz)
}

/// Projects a global point into the camera's normalized image plane.
pub fn project(p_f: &Vec3, cam: &CameraPose) -> Result<Vector2<f64>> {
    project_camera_point(&camera_point(p_f, cam))
}

pub fn project_camera_point(pc: &Vec3) -> Result<Vector2<f64>> {
    if !(pc.z > DEPTH_MIN) {
        return Err(Error::BehindCamera(pc.z));
    }
    Ok(Vector2::new(pc.x / pc.z, pc.y / pc.z))
}

/// Jacobians of the projection with respect to the camera pose error
/// `(δθ_C, δp_GC)` and the feature position.
pub fn point_jacobians(p_f: &Vec3, cam: &CameraPose) -> Result<(SMatrix<f64, 2, 6>, Matrix2x3<f64>)> {
    let c = cam.rotation();
    let pc = c * (p_f - cam.p_gc);
    if !(pc.z > DEPTH_MIN) {
        return Err(Error::BehindCamera(pc.z));
    }
    let j = projection_jacobian(&pc);
    let mut h_c = SMatrix::<f64, 2, 6>::zeros();
    h_c.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j * skew(&pc)));
    let h_f = j * c;
    h_c.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-h_f));
    Ok((h_c, h_f))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationParams {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub min_parallax_deg: f64,
    /// Mean reprojection error bound in normalized units.
    pub max_mean_reprojection: f64,
    pub min_depth: f64,
}

impl Default for TriangulationParams {
    fn default() -> Self {
        TriangulationParams {
            max_iterations: 10,
            step_tolerance: 1e-8,
            min_parallax_deg: 1.0,
            max_mean_reprojection: 5.0 / 460.0,
            min_depth: DEPTH_MIN,
        }
    }
}

impl TriangulationParams {
    /// Defaults with the reprojection bound set to 5 px at focal length `fx`.
    pub fn for_focal_length(fx: f64) -> Self {
        TriangulationParams { max_mean_reprojection: 5.0 / fx, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
pub enum TriangulationError {
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error("parallax {0:.3} deg below threshold")]
    InsufficientParallax(f64),
    #[error("point lies behind an observing camera")]
    NegativeDepth,
    #[error("Gauss-Newton refinement diverged")]
    Diverged,
    #[error("mean reprojection error {0:.2e} above threshold")]
    LargeReprojection(f64),
}

/// Linear least-squares ray intersection refined by Gauss-Newton on the
/// reprojection error.
pub fn triangulate_views(
    views: &[(&CameraPose, Vector2<f64>)],
    params: &TriangulationParams,
) -> Result<Vec3, TriangulationError> {
    if views.len() < 2 {
        return Err(TriangulationError::TooFewViews(views.len()));
    }
    let rays: Vec<(nalgebra::Matrix3<f64>, Vec3)> = views
        .iter()
        .map(|(cam, z)| {
            let c = cam.rotation();
            (c, (c.transpose() * Vec3::new(z.x, z.y, 1.0)).normalize())
        })
        .collect();

    let mut max_cos: f64 = 1.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            max_cos = max_cos.min(rays[i].1.dot(&rays[j].1));
        }
    }
    let parallax = max_cos.clamp(-1.0, 1.0).acos().to_degrees();
    if parallax < params.min_parallax_deg {
        return Err(TriangulationError::InsufficientParallax(parallax));
    }

    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for ((_, d), (cam, _)) in rays.iter().zip(views) {
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * cam.p_gc;
    }
    let mut p = a.lu().solve(&b).ok_or(TriangulationError::InsufficientParallax(parallax))?;

    for _ in 0..params.max_iterations {
        let mut jtj = Matrix3::zeros();
        let mut jte = Vec3::zeros();
        for ((c, _), (cam, z)) in rays.iter().zip(views) {
            let pc = c * (p - cam.p_gc);
            if !(pc.z > params.min_depth) {
                return Err(TriangulationError::NegativeDepth);
            }
            let e = Vector2::new(pc.x / pc.z, pc.y / pc.z) - z;
            let j = projection_jacobian(&pc) * c;
            jtj += j.transpose() * j;
            jte += j.transpose() * e;
        }
        let step = jtj.cholesky().ok_or(TriangulationError::Diverged)?.solve(&(-jte));
        p += step;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(TriangulationError::Diverged);
        }
        if step.norm() < params.step_tolerance {
            break;
        }
    }

    let mut total = 0.0;
    for ((c, _), (cam, z)) in rays.iter().zip(views) {
        let pc = c * (p - cam.p_gc);
        if !(pc.z > params.min_depth) {
            return Err(TriangulationError::NegativeDepth);
        }
        total += (Vector2::new(pc.x / pc.z, pc.y / pc.z) - z).norm();
    }
    let mean = total / views.len() as f64;
    if mean > params.max_mean_reprojection {
        return Err(TriangulationError::LargeReprojection(mean));
    }
    Ok(p)
}

/// Triangulates a feature from those of its observations whose poses are
/// in the window.
pub fn triangulate(
    observations: &[Observation],
    state: &AugmentedState,
    params: &TriangulationParams,
) -> Result<Vec3, TriangulationError> {
    let views: Vec<_> = observations.iter().filter_map(|o| state.pose(o.pose_id).map(|c| (c, o.z))).collect();
    triangulate_views(&views, params)
}

/// One feature's linearized measurements over `M` views.
#[derive(Clone, Debug)]
pub struct StackedFeature {
    /// `2M × dim` Jacobian with respect to the full error state.
    pub h_c: DMatrix<f64>,
    /// `2M × 3` Jacobian with respect to the feature position.
    pub h_f: DMatrix<f64>,
    pub dz: DVector<f64>,
    pub pose_ids: Vec<PoseId>,
}

impl StackedFeature {
    pub fn views(&self) -> usize {
        self.pose_ids.len()
    }
}

/// Stacks the per-view Jacobians and residuals `z̃ − h(p̂_f, x̂_C)`.
pub fn stack_feature(observations: &[Observation], state: &AugmentedState, p_f: &Vec3) -> Result<StackedFeature> {
    let mut used: Vec<(usize, &Observation)> =
        observations.iter().filter_map(|o| state.pose_index(o.pose_id).map(|i| (i, o))).collect();
    used.sort_by_key(|(i, _)| *i);
    if used.len() < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: used.len() });
    }
    let m = used.len();
    let mut h_c = DMatrix::zeros(2 * m, state.dim());
    let mut h_f = DMatrix::zeros(2 * m, 3);
    let mut dz = DVector::zeros(2 * m);
    let mut pose_ids = Vec::with_capacity(m);
    for (row, (idx, obs)) in used.iter().enumerate() {
        let cam = &state.window[*idx];
        let zhat = project(p_f, cam)?;
        let (hc, hf) = point_jacobians(p_f, cam)?;
        let r = 2 * row;
        h_c.view_mut((r, AugmentedState::pose_offset(*idx)), (2, 6)).copy_from(&hc);
        h_f.view_mut((r, 0), (2, 3)).copy_from(&hf);
        dz.rows_mut(r, 2).copy_from(&(obs.z - zhat));
        pose_ids.push(obs.pose_id);
    }
    Ok(StackedFeature { h_c, h_f, dz, pose_ids })
}

/// Householder reflectors triangularizing a tall `n × 3` matrix.
struct Reflectors {
    vs: Vec<DVector<f64>>,
    betas: Vec<f64>,
}

impl Reflectors {
    fn new(h_f: &DMatrix<f64>) -> Result<Self> {
        let n = h_f.nrows();
        let scale = h_f.norm().max(f64::MIN_POSITIVE);
        let mut work = h_f.clone();
        let mut vs = Vec::with_capacity(3);
        let mut betas = Vec::with_capacity(3);
        for k in 0..3 {
            let x = work.view((k, k), (n - k, 1)).into_owned();
            let alpha = x.norm();
            if alpha <= 1e-10 * scale {
                return Err(Error::DegenerateGeometry);
            }
            let mut v = DVector::zeros(n);
            v.rows_mut(k, n - k).copy_from(&x.column(0));
            v[k] += if x[0] >= 0.0 { alpha } else { -alpha };
            let vn2 = v.norm_squared();
            let beta = 2.0 / vn2;
            vs.push(v);
            betas.push(beta);
            apply_one(&mut work, vs.last().unwrap(), beta);
            if work[(k, k)].abs() <= 1e-10 * scale {
                return Err(Error::DegenerateGeometry);
            }
        }
        Ok(Reflectors { vs, betas })
    }

    /// `m ← Qᵀ m`.
    fn apply_transpose(&self, m: &mut DMatrix<f64>) {
        for (v, &beta) in self.vs.iter().zip(&self.betas) {
            apply_one(m, v, beta);
        }
    }
}

fn apply_one(m: &mut DMatrix<f64>, v: &DVector<f64>, beta: f64) {
    // (I − β v vᵀ) m; v is zero above its pivot.
    let start = v.iter().position(|x| *x != 0.0).unwrap_or(v.len());
    let vs = v.rows(start, v.len() - start);
    for mut col in m.column_iter_mut() {
        let mut tail = col.rows_mut(start, vs.len());
        let d = beta * vs.dot(&tail);
        if d != 0.0 {
            tail.axpy(-d, &vs, 1.0);
        }
    }
}

/// Orthonormal basis `A` (`n × (n−3)`) of the left null space of `h_f`.
pub fn left_nullspace_basis(h_f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h_f.nrows();
    if n < 4 {
        return Err(Error::TooFewObservations { needed: 2, got: n / 2 });
    }
    let refl = Reflectors::new(h_f)?;
    // Q = H₁H₂H₃, so Qᵀ = H₃H₂H₁ and its last n−3 rows are Aᵀ.
    let mut qt = DMatrix::identity(n, n);
    refl.apply_transpose(&mut qt);
    Ok(qt.rows(3, n - 3).transpose())
}

/// Measurement noise of a projected block.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementNoise {
    /// `σ² I`.
    Isotropic(f64),
    Full(DMatrix<f64>),
}

/// Linearized measurements ready for a Kalman update.
#[derive(Clone, Debug)]
pub struct MeasurementBlock {
    pub h: DMatrix<f64>,
    pub resid: DVector<f64>,
    pub noise: MeasurementNoise,
    pub pose_ids: Vec<PoseId>,
    /// Per-view constraints that went into this block.
    pub constraints: usize,
    /// `max |Aᵀ H_f|` over the features in this block.
    pub annihilation: f64,
}

impl MeasurementBlock {
    pub fn rows(&self) -> usize {
        self.resid.len()
    }

    pub fn noise_matrix(&self) -> DMatrix<f64> {
        match &self.noise {
            MeasurementNoise::Isotropic(var) => DMatrix::identity(self.rows(), self.rows()) * *var,
            MeasurementNoise::Full(r) => r.clone(),
        }
    }

    /// Concatenates blocks row-wise. All blocks must share the same column
    /// count and isotropic noise variance.
    pub fn stack(blocks: &[MeasurementBlock]) -> Option<MeasurementBlock> {
        let first = blocks.first()?;
        let var = match first.noise {
            MeasurementNoise::Isotropic(v) => v,
            MeasurementNoise::Full(_) => return None,
        };
        let cols = first.h.ncols();
        let rows: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut h = DMatrix::zeros(rows, cols);
        let mut resid = DVector::zeros(rows);
        let mut pose_ids = Vec::new();
        let mut r = 0;
        for b in blocks {
            if b.h.ncols() != cols || b.noise != MeasurementNoise::Isotropic(var) {
                return None;
            }
            h.view_mut((r, 0), (b.rows(), cols)).copy_from(&b.h);
            resid.rows_mut(r, b.rows()).copy_from(&b.resid);
            pose_ids.extend_from_slice(&b.pose_ids);
            r += b.rows();
        }
        pose_ids.sort_unstable();
        pose_ids.dedup();
        Some(MeasurementBlock {
            h,
            resid,
            noise: MeasurementNoise::Isotropic(var),
            pose_ids,
            constraints: blocks.iter().map(|b| b.constraints).sum(),
            annihilation: blocks.iter().map(|b| b.annihilation).fold(0.0, f64::max),
        })
    }
}

/// Projects a stacked feature onto the left null space of its position
/// Jacobian: `H = AᵀH_C`, `r = Aᵀδz`, `R = σ² I`.
pub fn nullspace_project(stacked: &StackedFeature, sigma: f64) -> Result<MeasurementBlock> {
    let n = stacked.h_f.nrows();
    if n < 4 {
        return Err(Error::TooFewObservations { needed: 2, got: n / 2 });
    }
    let refl = Reflectors::new(&stacked.h_f)?;
    let mut hc = stacked.h_c.clone();
    let mut dz = DMatrix::from_column_slice(n, 1, stacked.dz.as_slice());
    let mut hf = stacked.h_f.clone();
    refl.apply_transpose(&mut hc);
    refl.apply_transpose(&mut dz);
    refl.apply_transpose(&mut hf);
    let annihilation = hf.rows(3, n - 3).amax();
    Ok(MeasurementBlock {
        h: hc.rows(3, n - 3).into_owned(),
        resid: dz.rows(3, n - 3).column(0).into_owned(),
        noise: MeasurementNoise::Isotropic(sigma * sigma),
        pose_ids: stacked.pose_ids.clone(),
        constraints: stacked.views(),
        annihilation,
    })
}

/// 95% chi-square quantile.
pub fn chi2_threshold(dof: usize) -> f64 {
    ChiSquared::new(dof as f64).map(|d| d.inverse_cdf(0.95)).unwrap_or(f64::INFINITY)
}

/// Mahalanobis gate at the 95% level.
pub fn chi2_gate(block: &MeasurementBlock, cov: &DMatrix<f64>) -> bool {
    if block.rows() == 0 {
        return true;
    }
    let s = &block.h * cov * block.h.transpose() + block.noise_matrix();
    let Some(chol) = s.cholesky() else {
        return false;
    };
    let m = block.resid.dot(&chol.solve(&block.resid));
    m <= chi2_threshold(block.rows())
}
