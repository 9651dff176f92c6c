//! Rigid reference-to-camera transforms and their Euler-angle views.
//!
//! Euler angles follow the intrinsic Z-Y-X order: `R = Rz(yaw) Ry(pitch) Rx(roll)`.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHO_TOL: f64 = 1e-9;
const GIMBAL_LOCK_DEG: f64 = 89.99;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("matrix is not a proper rotation (orthonormality residual {residual:e}, det {det})")]
    NotARotation { residual: f64, det: f64 },
    #[error("gimbal lock: |pitch| = {0} deg")]
    GimbalLock(f64),
    #[error("non-finite pose component")]
    NonFinite,
}

/// `X_c = R X_r + T`, with `T` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_euler_deg(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Result<Self, PoseError> {
        Self::new(rotation_from_euler(yaw, pitch, roll), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `(yaw, pitch, roll)` in degrees.
    pub fn euler_deg(&self) -> Result<(f64, f64, f64), PoseError> {
        euler_from_rotation(&self.rotation)
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Scale the translation, as when the scene's metric units change.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            r: self.rotation_row_major(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    pub fn from_record(rec: &PoseRecord) -> Result<Self, PoseError> {
        let r = Matrix3::from_row_slice(&rec.r);
        Self::new(r, Vector3::new(rec.t[0], rec.t[1], rec.t[2]))
    }
}

/// Serialized pose: `R` row-major, `T` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), PoseError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(PoseError::NonFinite);
    }
    let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if residual > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
        return Err(PoseError::NotARotation { residual, det });
    }
    Ok(())
}

pub fn rotation_from_euler(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let (sr, cr) = roll_deg.to_radians().sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Inverse of [`rotation_from_euler`]; fails within 0.01 deg of gimbal lock.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Result<(f64, f64, f64), PoseError> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin().to_degrees();
    if pitch.abs() >= GIMBAL_LOCK_DEG {
        return Err(PoseError::GimbalLock(pitch.abs()));
    }
    let yaw = r[(1, 0)].atan2(r[(0, 0)]).to_degrees();
    let roll = r[(2, 1)].atan2(r[(2, 2)]).to_degrees();
    Ok((yaw, pitch, roll))
}

/// Geodesic angle between two rotations, in degrees.
///
/// Uses `atan2(|axis part|, cos part)` so tiny angles keep full precision.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    let s = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm() / 2.0;
    let c = (d.trace() - 1.0) / 2.0;
    s.atan2(c).to_degrees()
}

/// Nearest proper rotation to `m` in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested u");
    let vt = svd.v_t.expect("requested v_t");
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    u * fix * vt
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_zero_angles() {
        let (y, p, r) = euler_from_rotation(&Matrix3::identity()).unwrap();
        assert_eq!((y, p, r), (0.0, 0.0, 0.0));
    }

    #[test]
    fn yaw_ninety_maps_x_to_y() {
        let r = rotation_from_euler(90.0, 0.0, 0.0);
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn gimbal_lock_is_flagged() {
        let r = rotation_from_euler(10.0, 89.995, 3.0);
        assert!(matches!(euler_from_rotation(&r), Err(PoseError::GimbalLock(_))));
    }

    #[test]
    fn rejects_reflections_and_skew() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        m[(2, 2)] = 1.0;
        m[(0, 1)] = 1e-6;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn geodesic_angle_of_small_yaw() {
        let a = rotation_from_euler(12.0, -7.0, 33.0);
        let b = a * rotation_from_euler(2.0, 0.0, 0.0);
        assert!((rotation_angle_deg(&a, &b) - 2.0).abs() < 1e-9);
        let tiny = a * rotation_from_euler(1e-8, 0.0, 0.0);
        assert!((rotation_angle_deg(&a, &tiny) - 1e-8).abs() < 1e-14);
    }

    #[test]
    fn record_roundtrip() {
        let p = Pose::from_euler_deg(5.0, 6.0, 7.0, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let back = Pose::from_record(&p.to_record()).unwrap();
        assert_eq!(p, back);
    }

    proptest! {
        #[test]
        fn euler_roundtrip(yaw in -179.0..179.0f64, pitch in -88.9..88.9f64, roll in -179.0..179.0f64) {
            let r = rotation_from_euler(yaw, pitch, roll);
            prop_assert!(check_rotation(&r).is_ok());
            let (y, p, rl) = euler_from_rotation(&r).unwrap();
            let back = rotation_from_euler(y, p, rl);
            prop_assert!((back - r).abs().max() < 1e-9);
            prop_assert!((y - yaw).abs() < 1e-7 && (p - pitch).abs() < 1e-7 && (rl - roll).abs() < 1e-7);
        }

        #[test]
        fn orthonormalize_is_proper(vals in proptest::collection::vec(-1.0..1.0f64, 9)) {
            let m = Matrix3::from_row_slice(&vals) + Matrix3::identity() * 2.0;
            let r = orthonormalize(&m);
            prop_assert!(check_rotation(&r).is_ok());
        }
    }
}
