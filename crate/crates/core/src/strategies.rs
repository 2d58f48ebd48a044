//! Update schedules, the covariance-form EKF update, its information-form
//! counterpart and constraint accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::state::{apply_correction, AugmentedState, PoseId};
use crate::vision::{MeasurementBlock, MeasurementNoise};

/// Tracks shorter than this are never used by the immediate strategies.
pub const MIN_TRACK_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Delayed,
    ImmediateAll,
    /// Immediate update with `k ≥ 3` views selected per feature.
    ImmediateK(usize),
}

impl StrategyKind {
    /// File-friendly name, e.g. `immediate-k3`.
    pub fn label(&self) -> String {
        match self {
            StrategyKind::Delayed => "delayed".into(),
            StrategyKind::ImmediateAll => "immediate-all".into(),
            StrategyKind::ImmediateK(k) => format!("immediate-k{k}"),
        }
    }

    pub fn is_immediate(&self) -> bool {
        !matches!(self, StrategyKind::Delayed)
    }

    /// Parses a CLI name; `immediate-k` takes its view count from `k`.
    pub fn parse_with_k(s: &str, k: usize) -> Result<Self> {
        let kind = match s {
            "immediate-k" => StrategyKind::ImmediateK(k),
            other => other.parse()?,
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StrategyKind::ImmediateK(k) if *k < 3 => {
                Err(Error::InvalidConfig(format!("k-cam strategy needs k >= 3, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "delayed" => StrategyKind::Delayed,
            "immediate-all" => StrategyKind::ImmediateAll,
            "immediate-k" => StrategyKind::ImmediateK(3),
            other => match other.strip_prefix("immediate-k").map(str::parse::<usize>) {
                Some(Ok(k)) => StrategyKind::ImmediateK(k),
                _ => return Err(Error::InvalidConfig(format!("unknown strategy `{s}`"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// What one or more update steps did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Per-camera constraints built, one per view of each used feature.
    pub constraints: usize,
    pub feature_constraints: BTreeMap<u64, usize>,
    pub features_used: usize,
    /// Features that failed triangulation, projection or gating.
    pub features_skipped: usize,
    /// Rows stacked before compression.
    pub rows: usize,
    pub update_events: usize,
    pub imu_corrections: usize,
    pub pose_corrections: BTreeMap<PoseId, usize>,
    pub max_annihilation: f64,
}

impl UpdateReport {
    pub fn merge(&mut self, other: &UpdateReport) {
        self.constraints += other.constraints;
        for (f, c) in &other.feature_constraints {
            *self.feature_constraints.entry(*f).or_default() += c;
        }
        self.features_used += other.features_used;
        self.features_skipped += other.features_skipped;
        self.rows += other.rows;
        self.update_events += other.update_events;
        self.imu_corrections += other.imu_corrections;
        for (p, c) in &other.pose_corrections {
            *self.pose_corrections.entry(*p).or_default() += c;
        }
        self.max_annihilation = self.max_annihilation.max(other.max_annihilation);
    }

    /// Records a feature block that went into the frame's update.
    pub fn record_block(&mut self, feature_id: u64, block: &MeasurementBlock) {
        self.constraints += block.constraints;
        *self.feature_constraints.entry(feature_id).or_default() += block.constraints;
        self.features_used += 1;
        self.rows += block.rows();
        self.max_annihilation = self.max_annihilation.max(block.annihilation);
    }

    /// Records an applied update that corrected the IMU and every pose in
    /// `window`.
    pub fn record_update(&mut self, window: impl IntoIterator<Item = PoseId>) {
        self.update_events += 1;
        self.imu_corrections += 1;
        for id in window {
            *self.pose_corrections.entry(id).or_default() += 1;
        }
    }
}

/// Sums a stream of reports.
pub fn constraint_counter<'a>(reports: impl IntoIterator<Item = &'a UpdateReport>) -> UpdateReport {
    let mut total = UpdateReport::default();
    for r in reports {
        total.merge(r);
    }
    total
}

/// Picks `k` views spread evenly over `m` ordered views: first, last, and
/// the rounded intermediate positions (ties to the earlier view). Returns
/// 0-based indices in increasing order.
pub fn select_views_kcam(m: usize, k: usize) -> Vec<usize> {
    if m <= k {
        return (0..m).collect();
    }
    if k <= 1 {
        return (0..k).map(|_| m - 1).collect();
    }
    let mut picked: Vec<usize> = (0..k)
        .map(|i| {
            let pos = i as f64 * (m - 1) as f64 / (k - 1) as f64;
            (pos - 0.5).ceil().max(0.0) as usize
        })
        .collect();
    picked.dedup();
    let mut unused: Vec<usize> = (0..m).filter(|i| !picked.contains(i)).collect();
    while picked.len() < k {
        // Backfill with the unused view closest to an already picked one.
        let (at, _) = unused
            .iter()
            .enumerate()
            .min_by_key(|(_, u)| picked.iter().map(|p| p.abs_diff(**u)).min().unwrap_or(usize::MAX))
            .expect("m > k leaves unused views");
        picked.push(unused.remove(at));
    }
    picked.sort_unstable();
    picked
}

/// Replaces a tall isotropic system by an equivalent square one through a
/// QR factorization of `[H | r]`, restricted to the columns `H` touches.
fn compress(h: &DMatrix<f64>, r: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.ncols();
    let c0 = (0..n).find(|&c| h.column(c).iter().any(|v| *v != 0.0)).unwrap_or(n);
    let w = n - c0;
    if h.nrows() <= w {
        return (h.clone(), r.clone());
    }
    let mut aug = DMatrix::zeros(h.nrows(), w + 1);
    aug.columns_mut(0, w).copy_from(&h.columns(c0, w));
    aug.set_column(w, r);
    let tri = aug.qr().r();
    let mut hc = DMatrix::zeros(w, n);
    hc.columns_mut(c0, w).copy_from(&tri.view((0, 0), (w, w)));
    let rc = tri.view((0, w), (w, 1)).column(0).into_owned();
    (hc, rc)
}

fn check_dims(state: &AugmentedState, cov: &DMatrix<f64>, block: &MeasurementBlock) -> Result<()> {
    let n = state.dim();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cov.nrows() });
    }
    if block.h.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: block.h.ncols() });
    }
    if block.h.nrows() != block.resid.len() {
        return Err(Error::DimensionMismatch { expected: block.h.nrows(), got: block.resid.len() });
    }
    if let MeasurementNoise::Full(r) = &block.noise {
        if r.nrows() != block.rows() || r.ncols() != block.rows() {
            return Err(Error::DimensionMismatch { expected: block.rows(), got: r.nrows() });
        }
    }
    Ok(())
}

/// Covariance-form EKF update with Joseph-form covariance. Returns `false`
/// and leaves everything untouched when the innovation covariance is not
/// positive definite.
pub fn ekf_update(state: &mut AugmentedState, cov: &mut DMatrix<f64>, block: &MeasurementBlock) -> Result<bool> {
    check_dims(state, cov, block)?;
    if block.rows() == 0 {
        return Ok(false);
    }
    let n = state.dim();
    let (h, r) = match block.noise {
        MeasurementNoise::Isotropic(_) if block.rows() > n => compress(&block.h, &block.resid),
        _ => (block.h.clone(), block.resid.clone()),
    };
    let m = h.nrows();
    let pht = &*cov * h.transpose();
    let mut s = &h * &pht;
    match &block.noise {
        MeasurementNoise::Isotropic(var) => {
            for i in 0..m {
                s[(i, i)] += var;
            }
        }
        MeasurementNoise::Full(rm) => s += rm,
    }
    let Some(chol) = s.cholesky() else {
        return Ok(false);
    };
    let k = chol.solve(&pht.transpose()).transpose();
    let dx = &k * &r;
    if !dx.iter().all(|v| v.is_finite()) {
        return Ok(false);
    }
    let mut ikh = -&k * &h;
    for i in 0..n {
        ikh[(i, i)] += 1.0;
    }
    let mut p = &ikh * &*cov * ikh.transpose();
    match &block.noise {
        MeasurementNoise::Isotropic(var) => p += (&k * k.transpose()) * *var,
        MeasurementNoise::Full(rm) => p += &k * rm * k.transpose(),
    }
    *cov = (&p + p.transpose()) * 0.5;
    apply_correction(state, &dx)?;
    Ok(true)
}

/// Information-form reference update: `P⁺ = (P⁻¹ + HᵀR⁻¹H)⁻¹`,
/// `δx = P⁺HᵀR⁻¹r`.
pub fn information_update_oracle(
    state: &mut AugmentedState,
    cov: &mut DMatrix<f64>,
    block: &MeasurementBlock,
) -> Result<()> {
    check_dims(state, cov, block)?;
    let info = cov.clone().try_inverse().ok_or(Error::Singular)?;
    let r_inv = block.noise_matrix().try_inverse().ok_or(Error::Singular)?;
    let ht_rinv = block.h.transpose() * r_inv;
    let post = (info + &ht_rinv * &block.h).try_inverse().ok_or(Error::Singular)?;
    let dx = &post * (ht_rinv * &block.resid);
    *cov = (&post + post.transpose()) * 0.5;
    apply_correction(state, &dx)
}
