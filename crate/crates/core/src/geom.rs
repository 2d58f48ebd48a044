//! Rotation and quaternion algebra.
//!
//! Quaternions are stored scalar-last, `[x, y, z, w]`, and follow the
//! frame-rotation (JPL) convention: the quaternion `q_G^I` maps to the matrix
//! `C_G^I` that takes global-frame coordinates into body-frame coordinates.
//! Products compose like their matrices:
//! `quat_to_rot(a ⊗ b) == quat_to_rot(a) * quat_to_rot(b)`.
//!
//! A small attitude error `δθ` is defined by `q = δq(δθ) ⊗ q̂` with
//! `δq ≈ [δθ/2, 1]`, so `C ≈ (I − [δθ×]) Ĉ`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type RotMat = Matrix3<f64>;

/// Unit quaternion, scalar-last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Quat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 }
    }

    /// Builds a quaternion from raw components and normalizes it.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Quat { x, y, z, w }.normalized()
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.w)
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Normalizes, also flipping sign so the scalar part is non-negative.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat { x: self.x * s, y: self.y * s, z: self.z * s, w: self.w * s }
    }

    pub fn conjugate(&self) -> Self {
        Quat { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    /// Frame rotation by `angle` radians about the unit `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let k = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(k.x * s, k.y * s, k.z * s, c)
    }

    /// Exact rotation for a rotation vector (axis times angle).
    pub fn from_rotation_vector(rv: &Vec3) -> Self {
        let angle = rv.norm();
        if angle < 1e-12 {
            return small_angle_quat(rv);
        }
        Self::from_axis_angle(rv, angle)
    }

    /// Inverse of [`quat_to_rot`] (Shepperd's method).
    pub fn from_rot(r: &RotMat) -> Self {
        // Under this convention C(q) is the transpose of the Hamilton matrix.
        let m = r.transpose();
        let tr = m.trace();
        let q = if tr > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
            let s = 2.0 * (1.0 + tr).sqrt();
            Quat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Quat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Quat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Quat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    pub fn to_rot(&self) -> RotMat {
        quat_to_rot(self)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vec().norm().atan2(self.w.abs())
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let (av, bv) = (a.vec(), b.vec());
    let v = a.w * bv + b.w * av - av.cross(&bv);
    let w = a.w * b.w - av.dot(&bv);
    Quat::new(v.x, v.y, v.z, w)
}

pub fn quat_to_rot(q: &Quat) -> RotMat {
    let v = q.vec();
    (2.0 * q.w * q.w - 1.0) * RotMat::identity() - 2.0 * q.w * skew(&v) + 2.0 * v * v.transpose()
}

/// First-order error quaternion `[δθ/2, 1]`, normalized.
pub fn small_angle_quat(dtheta: &Vec3) -> Quat {
    let h = 0.5 * dtheta;
    Quat::new(h.x, h.y, h.z, 1.0)
}

/// Injects an attitude error: `q = δq(δθ) ⊗ q̂`.
pub fn correct_quat(qhat: &Quat, dtheta: &Vec3) -> Quat {
    if *dtheta == Vec3::zeros() {
        return *qhat;
    }
    quat_mul(&small_angle_quat(dtheta), qhat)
}

/// Attitude error `δθ` such that `q ≈ δq(δθ) ⊗ q̂`, exact for any size.
pub fn attitude_error(q: &Quat, qhat: &Quat) -> Vec3 {
    let dq = quat_mul(q, &qhat.conjugate());
    let s = dq.vec().norm();
    if s < 1e-15 {
        return 2.0 * dq.vec();
    }
    dq.vec() * (2.0 * s.atan2(dq.w) / s)
}

/// `Ω(ω)` in `q̇ = ½ Ω(ω) q` for scalar-last quaternions.
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}
