//! Levenberg-Marquardt polish of a pose on the pixel reprojection error.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, SMatrix, SVector, Vector3};

use super::Correspondence;
use crate::camera::CameraIntrinsics;
use crate::pose::{orthonormalize, Pose};

const MAX_ITERS: usize = 30;

fn sum_sq(corr: &[Correspondence], intr: &CameraIntrinsics, r: &Matrix3<f64>, t: &Vector3<f64>) -> Option<f64> {
    let mut s = 0.0;
    for c in corr {
        let uv = intr.project_camera(&(r * c.world + t)).ok()?;
        s += (uv - c.image).norm_squared();
    }
    Some(s)
}

/// Minimize the summed squared reprojection error starting at `pose`.
/// Rotation updates are left-multiplied `exp([w]x)`; steps that do not lower
/// the cost are rejected, so the result is never worse than the start.
pub fn refine_pose(corr: &[Correspondence], intr: &CameraIntrinsics, pose: &Pose) -> Pose {
    let mut r = *pose.rotation();
    let mut t = *pose.translation();
    let Some(mut cost) = sum_sq(corr, intr, &r, &t) else {
        return *pose;
    };
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for c in corr {
            let rp = r * c.world.coords;
            let xc = rp + t;
            let z = xc.z;
            if z <= 0.0 {
                return *pose;
            }
            let uv = intr.project_camera(&xc.into()).expect("positive depth");
            let res = uv - c.image;
            let d_proj = Matrix2x3::new(
                intr.k_x / z,
                intr.k_theta / z,
                -(intr.k_x * xc.x + intr.k_theta * xc.y) / (z * z),
                0.0,
                intr.k_y / z,
                -intr.k_y * xc.y / (z * z),
            );
            let d_rot = -d_proj * rp.cross_matrix();
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                mu *= 10.0;
                continue;
            };
            let w = Vector3::new(step[0], step[1], step[2]);
            let r_new = orthonormalize(&(Rotation3::new(w).into_inner() * r));
            let t_new = t + Vector3::new(step[3], step[4], step[5]);
            match sum_sq(corr, intr, &r_new, &t_new) {
                Some(c) if c < cost => {
                    let gain = cost - c;
                    r = r_new;
                    t = t_new;
                    cost = c;
                    mu = (mu * 0.3).max(1e-12);
                    improved = gain > 1e-14 * cost.max(1e-300);
                    break;
                }
                _ => mu *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Pose::new(r, t).unwrap_or(*pose)
}
