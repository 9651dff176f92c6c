//! Pinhole intrinsics and the reference-to-image projection.

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z_c = {0})")]
    PointBehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics: `u = k_x x + k_theta y + u_0`, `v = k_y y + v_0` on
/// normalized camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub k_x: f64,
    pub k_y: f64,
    #[serde(default)]
    pub k_theta: f64,
    pub u_0: f64,
    pub v_0: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraIntrinsics {
    pub fn new(k_x: f64, k_y: f64, u_0: f64, v_0: f64, width: usize, height: usize) -> Self {
        Self {
            k_x,
            k_y,
            k_theta: 0.0,
            u_0,
            v_0,
            image_width: width,
            image_height: height,
        }
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let finite = [self.k_x, self.k_y, self.k_theta, self.u_0, self.v_0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(CameraError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.k_x <= 0.0 || self.k_y <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "scale factors must be positive (k_x = {}, k_y = {})",
                self.k_x, self.k_y
            )));
        }
        if !(0.0..self.image_width as f64).contains(&self.u_0) || !(0.0..self.image_height as f64).contains(&self.v_0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.u_0, self.v_0, self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.k_x, self.k_theta, self.u_0, 0.0, self.k_y, self.v_0, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image-plane coordinates (`K^-1 [u v 1]^T`).
    pub fn normalize(&self, p: &Point2<f64>) -> Point2<f64> {
        let y = (p.y - self.v_0) / self.k_y;
        let x = (p.x - self.u_0 - self.k_theta * y) / self.k_x;
        Point2::new(x, y)
    }

    /// Normalized image-plane coordinates back to pixels.
    pub fn denormalize(&self, n: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            self.k_x * n.x + self.k_theta * n.y + self.u_0,
            self.k_y * n.y + self.v_0,
        )
    }

    /// Unit-length viewing ray through a pixel.
    pub fn ray(&self, p: &Point2<f64>) -> Vector3<f64> {
        let n = self.normalize(p);
        Vector3::new(n.x, n.y, 1.0).normalize()
    }

    pub fn project_camera(&self, pc: &Point3<f64>) -> Result<Point2<f64>, CameraError> {
        if pc.z <= 0.0 {
            return Err(CameraError::PointBehindCamera(pc.z));
        }
        Ok(self.denormalize(&Point2::new(pc.x / pc.z, pc.y / pc.z)))
    }

    /// Whether a pixel position falls on the image (pixel centers at integers).
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.image_width as f64 - 1.0 && p.y <= self.image_height as f64 - 1.0
    }
}

/// Project a reference-frame point through `K [R | T]`.
pub fn project(point_r: &Point3<f64>, intr: &CameraIntrinsics, pose: &Pose) -> Result<Point2<f64>, CameraError> {
    intr.project_camera(&pose.transform(point_r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0, 640, 480)
    }

    fn pose_ahead(z: f64) -> Pose {
        Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z)).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project(&Point3::origin(), &cam(), &pose_ahead(3000.0)).unwrap();
        assert_eq!((p.x, p.y), (320.0, 240.0));
    }

    #[test]
    fn offset_point_hand_evaluated() {
        let p = project(&Point3::new(600.0, 0.0, 0.0), &cam(), &pose_ahead(3000.0)).unwrap();
        assert_eq!((p.x, p.y), (480.0, 240.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        let err = project(&Point3::new(0.0, 0.0, -3000.0), &cam(), &pose_ahead(0.0)).unwrap_err();
        assert!(matches!(err, CameraError::PointBehindCamera(_)));
        let err = project(&Point3::origin(), &cam(), &pose_ahead(0.0)).unwrap_err();
        assert!(matches!(err, CameraError::PointBehindCamera(_)));
    }

    #[test]
    fn normalize_inverts_denormalize_with_skew() {
        let mut k = cam();
        k.k_theta = 3.5;
        let p = Point2::new(101.25, 377.5);
        let back = k.denormalize(&k.normalize(&p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(cam().validate().is_ok());
        let mut bad = cam();
        bad.k_x = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cam();
        bad.u_0 = 640.0;
        assert!(bad.validate().is_err());
    }
}
