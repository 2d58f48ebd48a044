//! Sliding-window state: IMU state plus cloned camera poses, and the
//! operations that grow, correct and shrink it together with its covariance.
//!
//! The full error state is the 21-dim IMU error followed by one
//! `(δθ_C, δp_GC)` pair per window pose, oldest first.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::geom::{correct_quat, quat_to_rot, skew, Quat, RotMat, Vec3};
use crate::propagation::{ImuErrorVec, ImuState, IMU_DIM, POS, P_IC, TH, TH_C};

pub type PoseId = u64;

pub const POSE_DIM: usize = 6;
pub const DEFAULT_MAX_WINDOW: usize = 20;

/// Camera pose cloned into the window at image time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub id: PoseId,
    pub t: f64,
    /// Global-to-camera frame rotation (`C_G^C`).
    pub q_gc: Quat,
    /// Camera position in the global frame.
    pub p_gc: Vec3,
}

impl CameraPose {
    pub fn rotation(&self) -> RotMat {
        quat_to_rot(&self.q_gc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub imu: ImuState,
    /// Ordered by time, oldest first.
    pub window: Vec<CameraPose>,
    pub max_window: usize,
}

impl AugmentedState {
    pub fn new(imu: ImuState, max_window: usize) -> Self {
        AugmentedState { imu, window: Vec::with_capacity(max_window), max_window }
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.window.len()
    }

    pub fn is_full(&self) -> bool {
        self.window.len() >= self.max_window
    }

    pub fn pose_index(&self, id: PoseId) -> Option<usize> {
        // Ids are handed out in increasing order.
        self.window.binary_search_by_key(&id, |p| p.id).ok()
    }

    pub fn pose(&self, id: PoseId) -> Option<&CameraPose> {
        self.pose_index(id).map(|i| &self.window[i])
    }

    /// Column offset of the pose at window position `index`.
    pub fn pose_offset(index: usize) -> usize {
        IMU_DIM + POSE_DIM * index
    }
}

/// Camera pose implied by the IMU pose and extrinsics.
pub fn camera_pose_from_imu(imu: &ImuState) -> (Quat, Vec3) {
    let c_gi = quat_to_rot(&imu.q_gi);
    let q_gc = crate::geom::quat_mul(&imu.q_ic, &imu.q_gi);
    (q_gc, imu.p + c_gi.transpose() * imu.p_ic)
}

/// Jacobian of the camera pose error with respect to the IMU error state.
///
/// Besides the attitude and position couplings this includes the lever-arm
/// column `Ĉ_G^Iᵀ`, so the in-state lever arm is observable.
pub fn camera_pose_jacobian(imu: &ImuState) -> SMatrix<f64, POSE_DIM, IMU_DIM> {
    let c_gi_t = quat_to_rot(&imu.q_gi).transpose();
    let c_ic = quat_to_rot(&imu.q_ic);
    let mut j = SMatrix::<f64, POSE_DIM, IMU_DIM>::zeros();
    j.fixed_view_mut::<3, 3>(0, TH).copy_from(&c_ic);
    j.fixed_view_mut::<3, 3>(0, TH_C).copy_from(&RotMat::identity());
    j.fixed_view_mut::<3, 3>(3, TH).copy_from(&(-c_gi_t * skew(&imu.p_ic)));
    j.fixed_view_mut::<3, 3>(3, POS).copy_from(&RotMat::identity());
    j.fixed_view_mut::<3, 3>(3, P_IC).copy_from(&c_gi_t);
    j
}

/// Clones the current camera pose into the window and grows the covariance
/// by `P ← [I; J] P [I; J]ᵀ`.
pub fn augment(state: &mut AugmentedState, cov: &mut DMatrix<f64>, id: PoseId, t: f64) -> Result<()> {
    if state.is_full() {
        return Err(Error::WindowFull(state.window.len()));
    }
    let n = state.dim();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cov.nrows() });
    }
    if let Some(last) = state.window.last() {
        if id <= last.id {
            return Err(Error::InvalidConfig(format!("pose id {id} is not newer than {}", last.id)));
        }
    }
    let j = camera_pose_jacobian(&state.imu);
    // J only touches the IMU block, so J·P = J·P[0..21, :].
    let jp: DMatrix<f64> = DMatrix::from_fn(POSE_DIM, n, |r, c| (0..IMU_DIM).map(|k| j[(r, k)] * cov[(k, c)]).sum());
    let mut grown = cov.clone().resize(n + POSE_DIM, n + POSE_DIM, 0.0);
    grown.view_mut((n, 0), (POSE_DIM, n)).copy_from(&jp);
    grown.view_mut((0, n), (n, POSE_DIM)).copy_from(&jp.transpose());
    let jpj = jp.columns(0, IMU_DIM) * j.transpose();
    let jpj = (&jpj + jpj.transpose()) * 0.5;
    grown.view_mut((n, n), (POSE_DIM, POSE_DIM)).copy_from(&jpj);
    *cov = grown;

    let (q_gc, p_gc) = camera_pose_from_imu(&state.imu);
    state.window.push(CameraPose { id, t, q_gc, p_gc });
    Ok(())
}

/// Injects a full error-state correction.
pub fn apply_correction(state: &mut AugmentedState, dx: &DVector<f64>) -> Result<()> {
    if dx.len() != state.dim() {
        return Err(Error::DimensionMismatch { expected: state.dim(), got: dx.len() });
    }
    let imu_dx = ImuErrorVec::from_iterator(dx.rows(0, IMU_DIM).iter().copied());
    state.imu = state.imu.perturbed(&imu_dx);
    for (i, pose) in state.window.iter_mut().enumerate() {
        let o = AugmentedState::pose_offset(i);
        let dth = Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        pose.q_gc = correct_quat(&pose.q_gc, &dth);
        pose.p_gc += Vec3::new(dx[o + 3], dx[o + 4], dx[o + 5]);
    }
    Ok(())
}

/// Removes the given poses and their covariance rows and columns.
pub fn marginalize(state: &mut AugmentedState, cov: &mut DMatrix<f64>, ids: &[PoseId]) -> Result<()> {
    let mut indices = Vec::with_capacity(ids.len());
    for &id in ids {
        indices.push(state.pose_index(id).ok_or(Error::UnknownPose(id))?);
    }
    if indices.is_empty() {
        return Ok(());
    }
    indices.sort_unstable();
    indices.dedup();
    let keep: Vec<usize> =
        (0..state.dim()).filter(|&k| k < IMU_DIM || !indices.contains(&((k - IMU_DIM) / POSE_DIM))).collect();
    *cov = cov.select_rows(&keep).select_columns(&keep);
    let mut idx = 0;
    state.window.retain(|_| {
        let drop = indices.contains(&idx);
        idx += 1;
        !drop
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::attitude_error;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
        Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn random_imu(rng: &mut ChaCha8Rng) -> ImuState {
        ImuState {
            q_gi: random_quat(rng),
            v: random_vec(rng, 2.0),
            p: random_vec(rng, 10.0),
            bg: random_vec(rng, 0.01),
            ba: random_vec(rng, 0.1),
            q_ic: random_quat(rng),
            p_ic: random_vec(rng, 0.1),
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn homogeneous(r: &RotMat, t: &Vec3) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        m
    }

    #[test]
    fn camera_pose_identity_extrinsics() {
        let imu = ImuState { p: Vec3::new(1.0, 2.0, 3.0), ..Default::default() };
        let (q, p) = camera_pose_from_imu(&imu);
        assert_eq!(q, Quat::identity());
        assert_eq!(p, imu.p);
        let imu = ImuState { p_ic: Vec3::new(0.05, 0.04, 0.03), ..imu };
        let (_, p) = camera_pose_from_imu(&imu);
        assert!((p - (imu.p + Vec3::new(0.05, 0.04, 0.03))).norm() < 1e-15);
    }

    #[test]
    fn camera_pose_matches_homogeneous_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let imu = random_imu(&mut rng);
            let c_gi = quat_to_rot(&imu.q_gi);
            let c_ic = quat_to_rot(&imu.q_ic);
            // body-to-global and camera-to-body transforms.
            let t_gb = homogeneous(&c_gi.transpose(), &imu.p);
            let t_bc = homogeneous(&c_ic.transpose(), &imu.p_ic);
            let t_gc = t_gb * t_bc;
            let (q, p) = camera_pose_from_imu(&imu);
            let r_cg: RotMat = t_gc.fixed_view::<3, 3>(0, 0).into_owned();
            assert!((quat_to_rot(&q) - r_cg.transpose()).amax() < 1e-12);
            assert!((p - t_gc.fixed_view::<3, 1>(0, 3)).norm() < 1e-12);
        }
    }

    #[test]
    fn camera_pose_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..20 {
            let imu = random_imu(&mut rng);
            let j = camera_pose_jacobian(&imu);
            let (q0, p0) = camera_pose_from_imu(&imu);
            for k in 0..IMU_DIM {
                let mut dx = ImuErrorVec::zeros();
                dx[k] = h;
                let (qp, pp) = camera_pose_from_imu(&imu.perturbed(&dx));
                dx[k] = -h;
                let (qm, pm) = camera_pose_from_imu(&imu.perturbed(&dx));
                let dth = (attitude_error(&qp, &q0) - attitude_error(&qm, &q0)) / (2.0 * h);
                let dp = (pp - pm) / (2.0 * h);
                for r in 0..3 {
                    assert!((dth[r] - j[(r, k)]).abs() < 1e-6, "att row {r} col {k}");
                    assert!((dp[r] - j[(3 + r, k)]).abs() < 1e-6, "pos row {r} col {k}");
                }
                let _ = p0;
            }
        }
    }

    #[test]
    fn augment_grows_covariance() {
        let mut st = AugmentedState::new(ImuState::default(), 5);
        let mut p = DMatrix::identity(IMU_DIM, IMU_DIM);
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        assert_eq!(p.nrows(), 27);
        assert_eq!(st.window.len(), 1);
    }

    #[test]
    fn augment_identity_extrinsics_copies_imu_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = AugmentedState::new(ImuState { q_gi: random_quat(&mut rng), ..Default::default() }, 5);
        let p0 = random_spd(&mut rng, IMU_DIM);
        let mut p = p0.clone();
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        // Camera attitude error = δθ_I + δθ_C, position = δp.
        for r in 0..3 {
            for c in 0..IMU_DIM {
                let expect = p0[(TH + r, c)] + p0[(TH_C + r, c)];
                assert!((p[(IMU_DIM + r, c)] - expect).abs() < 1e-12);
                let expect_p =
                    p0[(POS + r, c)] + (quat_to_rot(&st.imu.q_gi).transpose().row(r) * p0.view((P_IC, c), (3, 1)))[0];
                assert!((p[(IMU_DIM + 3 + r, c)] - expect_p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augment_block_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = AugmentedState::new(random_imu(&mut rng), 5);
        let mut p = random_spd(&mut rng, IMU_DIM);
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        st.imu = random_imu(&mut rng);
        let before = p.clone();
        augment(&mut st, &mut p, 1, 0.1).unwrap();
        let j = camera_pose_jacobian(&st.imu);
        let jd = DMatrix::from_fn(POSE_DIM, IMU_DIM, |r, c| j[(r, c)]);
        let pii = before.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
        let expected = &jd * pii * jd.transpose();
        assert!((p.view((27, 27), (6, 6)) - expected).amax() < 1e-10);
        // Pre-existing principal block untouched.
        assert_eq!(p.view((0, 0), (27, 27)).into_owned(), before);
        assert!((&p - p.transpose()).amax() < 1e-12);
    }

    #[test]
    fn augment_refuses_full_window() {
        let mut st = AugmentedState::new(ImuState::default(), 1);
        let mut p = DMatrix::identity(IMU_DIM, IMU_DIM);
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        assert!(matches!(augment(&mut st, &mut p, 1, 0.1), Err(Error::WindowFull(1))));
    }

    #[test]
    fn correction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = AugmentedState::new(random_imu(&mut rng), 5);
        let mut p = DMatrix::identity(IMU_DIM, IMU_DIM);
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        let orig = st.clone();
        apply_correction(&mut st, &DVector::zeros(27)).unwrap();
        assert_eq!(st.imu, orig.imu);
        assert_eq!(st.window, orig.window);

        let mut dx = DVector::zeros(27);
        dx[POS] = 1.0;
        apply_correction(&mut st, &dx).unwrap();
        assert_eq!(st.imu.p - orig.imu.p, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(st.imu.q_gi, orig.imu.q_gi);
        assert_eq!(st.window, orig.window);

        assert!(matches!(apply_correction(&mut st, &DVector::zeros(21)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn correction_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = AugmentedState::new(random_imu(&mut rng), 5);
        let mut p = DMatrix::identity(IMU_DIM, IMU_DIM);
        augment(&mut st, &mut p, 0, 0.0).unwrap();
        let orig = st.clone();
        let dir = DVector::from_fn(27, |_, _| rng.random_range(-1.0..1.0));
        let dx = dir.normalize() * 1e-4;
        apply_correction(&mut st, &dx).unwrap();
        let back = st.imu.error_from(&orig.imu);
        for k in 0..IMU_DIM {
            assert!((back[k] - dx[k]).abs() < 1e-6);
        }
        let cam = attitude_error(&st.window[0].q_gc, &orig.window[0].q_gc);
        for r in 0..3 {
            assert!((cam[r] - dx[IMU_DIM + r]).abs() < 1e-6);
        }
    }

    #[test]
    fn marginalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut st = AugmentedState::new(random_imu(&mut rng), 10);
        let mut p = random_spd(&mut rng, IMU_DIM);
        for id in 0..4 {
            augment(&mut st, &mut p, id, id as f64).unwrap();
        }
        // Remove-newest undoes augment exactly.
        let before = p.clone();
        let st_before = st.clone();
        augment(&mut st, &mut p, 4, 4.0).unwrap();
        marginalize(&mut st, &mut p, &[4]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.window, st_before.window);

        marginalize(&mut st, &mut p, &[]).unwrap();
        assert_eq!(p, before);

        augment(&mut st, &mut p, 4, 4.0).unwrap();
        let full = p.clone();
        marginalize(&mut st, &mut p, &[1, 3]).unwrap();
        assert_eq!(p.nrows(), 21 + 18);
        let keep: Vec<usize> = (0..21).chain(21..27).chain(33..39).chain(45..51).collect();
        let oracle = DMatrix::from_fn(keep.len(), keep.len(), |r, c| full[(keep[r], keep[c])]);
        assert_eq!(p, oracle);
        assert_eq!(st.window.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 2, 4]);

        assert!(matches!(marginalize(&mut st, &mut p, &[99]), Err(Error::UnknownPose(99))));
    }
}
