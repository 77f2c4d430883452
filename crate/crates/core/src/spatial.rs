//! Fixed-size rotation and linear-algebra kernel.
//!
//! Quaternions are scalar-first Hamilton quaternions `(w, v)`. The rotation
//! matrix of a quaternion maps vectors expressed in the rotated (end-effector)
//! frame into the reference (base) frame, so composition follows
//! `R(p ∘ q) = R(p) R(q)`.

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;
pub type MatMN = DMatrix<f64>;

/// A 3x3 matrix expected to be a proper rotation.
pub type RotationMatrix = Mat3;

/// Condition number of `J Jᵀ` above which the pseudoinverse is refused.
pub const MAX_GRAM_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("quaternion norm {0:e} is too small to normalize")]
    ZeroQuaternion(f64),
    #[error("rotation axis is not unit length (norm {0})")]
    NonUnitAxis(f64),
    #[error("Jacobian is near singular: cond(J Jᵀ) = {0:e}")]
    NearSingular(f64),
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub v: Vec3,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self { w: 1.0, v: Vec3::zeros() }
    }

    /// Builds a quaternion from raw components, renormalizing.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, MathError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-9 {
            return Err(MathError::ZeroQuaternion(n));
        }
        Ok(Self { w: w / n, v: Vec3::new(x, y, z) / n })
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    pub fn renormalized(&self) -> Result<Self, MathError> {
        Self::new(self.w, self.v.x, self.v.y, self.v.z)
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, v: -self.v }
    }

    /// Hamilton product `self ∘ rhs`.
    pub fn mul(&self, rhs: &Self) -> Self {
        Self {
            w: self.w * rhs.w - self.v.dot(&rhs.v),
            v: self.w * rhs.v + rhs.w * self.v + self.v.cross(&rhs.v),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.v.norm().atan2(self.w.abs())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.v.x, self.v.y, self.v.z]
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation(r: &RotationMatrix) -> Self {
        let tr = r.trace();
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let q = Self { w, v: Vec3::new(x, y, z) };
        let n = q.norm();
        Self { w: q.w / n, v: q.v / n }
    }
}

/// Rotation matrix of a (renormalized) unit quaternion.
pub fn quat_to_rotation(q: &UnitQuaternion) -> Result<RotationMatrix, MathError> {
    let q = q.renormalized()?;
    let (w, x, y, z) = (q.w, q.v.x, q.v.y, q.v.z);
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `(cos(θ/2), sin(θ/2)·n)` for a unit axis `n`.
pub fn quat_from_axis_angle(axis: &Vec3, angle: f64) -> Result<UnitQuaternion, MathError> {
    let n = axis.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(MathError::NonUnitAxis(n));
    }
    let half = 0.5 * angle;
    Ok(UnitQuaternion { w: half.cos(), v: axis * half.sin() })
}

/// Attitude error `qd⁻¹ ∘ q`:
/// `e0 = q0·qd0 + qᵀqd`, `e = qd0·q − q0·qd + q × qd`.
pub fn quat_error(qd: &UnitQuaternion, q: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion {
        w: q.w * qd.w + q.v.dot(&qd.v),
        v: qd.w * q.v - q.w * qd.v + q.v.cross(&qd.v),
    }
}

/// Rotation about a principal-agnostic unit axis (Rodrigues).
pub fn axis_angle_rotation(axis: &Vec3, angle: f64) -> RotationMatrix {
    let k = skew(axis);
    Mat3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k
}

/// Right pseudoinverse `Jᵀ (J Jᵀ)⁻¹` of a full-row-rank 6×n Jacobian.
pub fn pseudoinverse(j: &MatMN) -> Result<MatMN, MathError> {
    let gram = j * j.transpose();
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(min > 0.0) || max / min > MAX_GRAM_CONDITION {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(MathError::NearSingular(cond));
    }
    let chol = gram
        .cholesky()
        .ok_or(MathError::NearSingular(f64::INFINITY))?;
    // J⁺ = Jᵀ G⁻¹  <=>  J⁺ᵀ = G⁻¹ J
    Ok(chol.solve(j).transpose())
}

/// Block-diagonal `diag(R, R)`.
pub fn block_rotation(r: &RotationMatrix) -> Mat6 {
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    out
}

pub fn vec6(top: &Vec3, bottom: &Vec3) -> Vec6 {
    Vec6::new(top.x, top.y, top.z, bottom.x, bottom.y, bottom.z)
}

pub fn top3(v: &Vec6) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn bottom3(v: &Vec6) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

pub fn diag3(d: [f64; 3]) -> Mat3 {
    Mat3::from_diagonal(&Vec3::new(d[0], d[1], d[2]))
}
