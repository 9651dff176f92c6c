//! Robust non-iterative perspective-n-point pose recovery (RPnP).
//!
//! The `n` correspondences are split into `n - 2` triples sharing the edge
//! that spans the widest image distance. Each triple yields a quartic in a
//! common depth-ratio parameter; the local minima of the summed squared
//! quartics are the pose hypotheses. For each hypothesis the camera-frame
//! direction of the axis edge is known, which leaves the rotation about that
//! axis and the translation as a small linear problem over all points. The
//! recovered camera-frame points are then aligned to the reference points
//! (orthogonal Procrustes). For coplanar points each hypothesis is paired
//! with its mirror image about the line of sight; every start is polished on
//! the reprojection error and the smallest reprojection RMSE wins.

pub mod poly;
pub mod refine;
pub mod subsets;

use nalgebra::{DMatrix, Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project, CameraError, CameraIntrinsics};
use crate::pose::{Pose, PoseError};

pub use poly::{real_roots, Poly};
pub use refine::refine_pose;
pub use subsets::{build_subsets, cost_polynomial, subset_to_quartic, CostPolynomial, QuarticCoeffs, SubsetTriple};

#[derive(Debug, Error, PartialEq)]
pub enum PnpError {
    #[error("need more than three correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("cost derivative has no real root with non-negative curvature")]
    NoMinimumFound,
    #[error("no pose hypothesis placed every point in front of the camera")]
    NoValidCandidate,
    #[error("polynomial is identically zero")]
    ZeroPolynomial,
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

/// A reference-frame point (mm) and its observed pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    #[serde(rename = "P", with = "point3_serde")]
    pub world: Point3<f64>,
    #[serde(rename = "p", with = "point2_serde")]
    pub image: Point2<f64>,
}

impl Correspondence {
    pub fn new(world: Point3<f64>, image: Point2<f64>) -> Self {
        Self { world, image }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    pub reprojection_rmse: f64,
    /// Local minima of the cost that were turned into pose hypotheses.
    pub candidate_count: usize,
    /// Reprojection RMSE of every hypothesis that produced a valid pose.
    pub candidate_rmse: Vec<f64>,
}

/// Correspondence file accepted by the `pnp` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnpInput {
    pub intrinsics: CameraIntrinsics,
    pub points: Vec<Correspondence>,
}

/// Solver output: `R` row-major, `T` in world units, Euler angles
/// (yaw, pitch, roll) in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnpOutput {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    pub euler: [f64; 3],
    pub rmse: f64,
    pub schema_version: u32,
}

impl PnpOutput {
    pub fn from_solution(sol: &PnpSolution) -> Result<Self, PnpError> {
        let r = sol.pose.rotation();
        let t = sol.pose.translation();
        let (yaw, pitch, roll) = sol.pose.euler_deg()?;
        Ok(Self {
            r: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            t: [t.x, t.y, t.z],
            euler: [yaw, pitch, roll],
            rmse: sol.reprojection_rmse,
            schema_version: crate::scene::SCHEMA_VERSION,
        })
    }
}

/// Curvature below this (relative to the cost's scale) counts as flat.
const FLAT_CURVATURE: f64 = 1e-12;

pub fn rpnp_solve(corr: &[Correspondence], intr: &CameraIntrinsics) -> Result<PnpSolution, PnpError> {
    let triples = build_subsets(corr, intr)?;
    let (ia, ja, _) = triples[0].indices;

    // Collinear triples carry no constraint; keep the rest.
    let mut quartics = Vec::with_capacity(triples.len());
    for t in &triples {
        match subset_to_quartic(t) {
            Ok(q) => quartics.push(q),
            Err(PnpError::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if quartics.is_empty() {
        return Err(PnpError::DegenerateGeometry(
            "all reference points are collinear".into(),
        ));
    }
    let cost = cost_polynomial(&quartics)?;
    let minima = local_minima(&cost)?;
    if minima.is_empty() {
        return Err(PnpError::NoMinimumFound);
    }

    let rays: Vec<Vector3<f64>> = corr.iter().map(|c| intr.ray(&c.image)).collect();
    let normalized: Vec<Point2<f64>> = corr.iter().map(|c| intr.normalize(&c.image)).collect();
    let frame = AxisFrame::new(&corr[ia].world, &corr[ja].world);
    let local: Vec<Vector3<f64>> = corr.iter().map(|c| frame.to_local(&c.world)).collect();
    let cos_gamma = rays[ia].dot(&rays[ja]);

    let plane = reference_plane(corr);
    let mut best: Option<(Pose, f64)> = None;
    let mut candidate_rmse = Vec::with_capacity(minima.len());
    for &x in &minima {
        let ratio = cos_gamma + x;
        let axis_cam = rays[ja] * ratio - rays[ia];
        if axis_cam.norm() < 1e-15 {
            continue;
        }
        let Some(pose) = pose_from_axis(&axis_cam.normalize(), &local, &normalized, &rays, corr) else {
            continue;
        };
        let mirrored = plane.as_ref().and_then(|pl| mirrored_pose(&pose, pl));
        for start in std::iter::once(pose).chain(mirrored) {
            let pose = refine_pose(corr, intr, &start);
            let Ok(rmse) = reprojection_rmse(corr, intr, &pose) else {
                continue;
            };
            candidate_rmse.push(rmse);
            if best.as_ref().is_none_or(|(_, b)| rmse < *b) {
                best = Some((pose, rmse));
            }
        }
    }
    let (pose, rmse) = best.ok_or(PnpError::NoValidCandidate)?;
    Ok(PnpSolution {
        pose,
        reprojection_rmse: rmse,
        candidate_count: minima.len(),
        candidate_rmse,
    })
}

/// Centroid and unit normal of coplanar reference points.
struct Plane {
    centroid: Vector3<f64>,
    normal: Vector3<f64>,
}

const PLANARITY_TOL: f64 = 1e-9;

fn reference_plane(corr: &[Correspondence]) -> Option<Plane> {
    let n = corr.len() as f64;
    let centroid = corr.iter().map(|c| c.world.coords).sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for c in corr {
        let d = c.world.coords - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let (imin, &smallest) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let largest = eig.eigenvalues.max();
    (smallest <= PLANARITY_TOL * largest).then(|| Plane {
        centroid,
        normal: eig.eigenvectors.column(imin).into_owned(),
    })
}

/// The other pose a planar target nearly shares under noise: rotate about
/// the target centroid so the plane normal is mirrored about the line of
/// sight.
fn mirrored_pose(pose: &Pose, plane: &Plane) -> Option<Pose> {
    let r = pose.rotation();
    let c = r * plane.centroid + pose.translation();
    let view = c.try_normalize(1e-12)?;
    let n = r * plane.normal;
    let n_mirror = view * (2.0 * n.dot(&view)) - n;
    let q = nalgebra::Rotation3::rotation_between(&n, &n_mirror)?.into_inner();
    Pose::new(q * r, c - q * (c - pose.translation())).ok()
}

/// Roots of `H'` where `H''` is positive (or flat).
fn local_minima(cost: &CostPolynomial) -> Result<Vec<f64>, PnpError> {
    let roots = match real_roots(&cost.first) {
        Ok(r) => r,
        Err(PnpError::ZeroPolynomial) => return Err(PnpError::NoMinimumFound),
        Err(e) => return Err(e),
    };
    let scale = cost.second.coeffs().iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut out: Vec<f64> = roots
        .into_iter()
        .filter(|&x| {
            let curv = cost.second.eval(x);
            curv > 0.0 || curv.abs() < FLAT_CURVATURE * scale
        })
        .collect();
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(out)
}

/// Frame with its origin at the axis-edge midpoint and x along the edge.
struct AxisFrame {
    origin: Vector3<f64>,
    basis: Matrix3<f64>,
}

impl AxisFrame {
    fn new(p1: &Point3<f64>, p2: &Point3<f64>) -> Self {
        let origin = (p1.coords + p2.coords) / 2.0;
        Self {
            origin,
            basis: basis_from_x(&(p2.coords - origin).normalize()),
        }
    }

    fn to_local(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.basis.transpose() * (p.coords - self.origin)
    }
}

/// Orthonormal basis `[x y z]` completing a unit vector `x`.
fn basis_from_x(x: &Vector3<f64>) -> Matrix3<f64> {
    let (y, z) = if x.y.abs() < x.z.abs() {
        let z = x.cross(&Vector3::y()).normalize();
        (z.cross(x).normalize(), z)
    } else {
        let y = Vector3::z().cross(x).normalize();
        (y, x.cross(&y).normalize())
    };
    Matrix3::from_columns(&[*x, y, z])
}

/// Given the camera-frame axis direction, solve the rotation angle about it
/// and the translation linearly, lift every ray to its implied depth and
/// align the lifted points with the reference points.
fn pose_from_axis(
    axis_cam: &Vector3<f64>,
    local: &[Vector3<f64>],
    normalized: &[Point2<f64>],
    rays: &[Vector3<f64>],
    corr: &[Correspondence],
) -> Option<Pose> {
    let rx = basis_from_x(axis_cam);
    let n = local.len();
    // X_c = Rx Rot_x(theta) X_a + t, unknowns (cos, sin, tx, ty, tz, 1)
    let mut sys = DMatrix::<f64>::zeros(2 * n, 6);
    for (k, (xa, uv)) in local.iter().zip(normalized).enumerate() {
        for (row, obs, comp) in [(2 * k, uv.x, 0usize), (2 * k + 1, uv.y, 1usize)] {
            let coef_c = |r: usize| rx[(r, 1)] * xa.y + rx[(r, 2)] * xa.z;
            let coef_s = |r: usize| rx[(r, 2)] * xa.y - rx[(r, 1)] * xa.z;
            sys[(row, 0)] = coef_c(comp) - obs * coef_c(2);
            sys[(row, 1)] = coef_s(comp) - obs * coef_s(2);
            sys[(row, 2 + comp)] = 1.0;
            sys[(row, 4)] = -obs;
            sys[(row, 5)] = (rx[(comp, 0)] - obs * rx[(2, 0)]) * xa.x;
        }
    }
    let svd = sys.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let sol = v_t.row(imin).transpose();
    if sol[5].abs() < 1e-300 {
        return None;
    }
    let s5 = sol[5];
    let sol = sol / s5;
    let (c, s) = (sol[0], sol[1]);
    let t = Vector3::new(sol[2], sol[3], sol[4]);

    let lifted: Vec<Vector3<f64>> = local
        .iter()
        .zip(rays)
        .map(|(xa, ray)| {
            let rotated = Vector3::new(xa.x, c * xa.y - s * xa.z, s * xa.y + c * xa.z);
            ray * (rx * rotated + t).norm()
        })
        .collect();
    let world: Vec<Vector3<f64>> = corr.iter().map(|c| c.world.coords).collect();
    let (r, tr) = procrustes(&world, &lifted)?;
    Pose::new(r, tr).ok()
}

/// Proper rigid alignment minimizing `sum |R a_i + T - b_i|^2`.
pub fn procrustes(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    Some((r, cb - r * ca))
}

/// `sqrt(mean |p_i - project(P_i)|^2)` in pixels.
pub fn reprojection_rmse(corr: &[Correspondence], intr: &CameraIntrinsics, pose: &Pose) -> Result<f64, CameraError> {
    if corr.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for c in corr {
        let p = project(&c.world, intr, pose)?;
        sum += (p - c.image).norm_squared();
    }
    Ok((sum / corr.len() as f64).sqrt())
}

mod point3_serde {
    use nalgebra::Point3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Point3<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([p.x, p.y, p.z])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point3<f64>, D::Error> {
        let v = <[f64; 3]>::deserialize(d)?;
        Ok(Point3::new(v[0], v[1], v[2]))
    }
}

mod point2_serde {
    use nalgebra::Point2;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Point2<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([p.x, p.y])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point2<f64>, D::Error> {
        let v = <[f64; 2]>::deserialize(d)?;
        Ok(Point2::new(v[0], v[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::rotation_angle_deg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0, 640, 480)
    }

    fn octagon(radius: f64) -> Vec<Point3<f64>> {
        (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 8.0;
                Point3::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect()
    }

    fn observe(world: &[Point3<f64>], pose: &Pose) -> Vec<Correspondence> {
        world
            .iter()
            .map(|w| Correspondence::new(*w, project(w, &cam(), pose).unwrap()))
            .collect()
    }

    #[test]
    fn exact_round_trip_on_station_layout() {
        let truth = Pose::from_euler_deg(10.0, -5.0, 2.0, Vector3::new(100.0, -50.0, 4000.0)).unwrap();
        let sol = rpnp_solve(&observe(&octagon(600.0), &truth), &cam()).unwrap();
        assert!(rotation_angle_deg(sol.pose.rotation(), truth.rotation()) < 1e-6);
        assert!((sol.pose.translation() - truth.translation()).norm() < 1e-3);
        assert!(sol.reprojection_rmse < 1e-6);
        assert!(sol.candidate_count >= 1 && sol.candidate_count <= 4);
    }

    #[test]
    fn returned_candidate_is_the_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..50 {
            let truth = Pose::from_euler_deg(
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                Vector3::new(0.0, 0.0, rng.random_range(3000.0..5000.0)),
            )
            .unwrap();
            let mut corr = observe(&octagon(600.0), &truth);
            for c in &mut corr {
                c.image.x += noise.sample(&mut rng);
                c.image.y += noise.sample(&mut rng);
            }
            let sol = rpnp_solve(&corr, &cam()).unwrap();
            assert!(sol.candidate_rmse.iter().all(|&r| sol.reprojection_rmse <= r));
            assert!(crate::pose::check_rotation(sol.pose.rotation()).is_ok());
        }
    }

    #[test]
    fn non_planar_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let world: Vec<_> = (0..6)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-500.0..500.0),
                        rng.random_range(-500.0..500.0),
                        rng.random_range(-500.0..500.0),
                    )
                })
                .collect();
            let truth = Pose::from_euler_deg(
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                Vector3::new(0.0, 0.0, rng.random_range(3000.0..6000.0)),
            )
            .unwrap();
            let sol = rpnp_solve(&observe(&world, &truth), &cam()).unwrap();
            assert!(rotation_angle_deg(sol.pose.rotation(), truth.rotation()) < 1e-5);
            assert!((sol.pose.translation() - truth.translation()).norm() < 1e-2);
        }
    }

    #[test]
    fn scale_consistency() {
        let truth = Pose::from_euler_deg(-15.0, 20.0, 7.0, Vector3::new(-200.0, 120.0, 3500.0)).unwrap();
        let base = rpnp_solve(&observe(&octagon(600.0), &truth), &cam()).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let sol = rpnp_solve(&observe(&octagon(600.0 * s), &truth.scaled(s)), &cam()).unwrap();
            assert!(rotation_angle_deg(sol.pose.rotation(), base.pose.rotation()) < 1e-6);
            assert!(
                (sol.pose.translation() - base.pose.translation() * s).norm()
                    < 1e-6 * s * base.pose.translation().norm()
            );
        }
    }

    #[test]
    fn three_points_rejected() {
        let truth = Pose::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 4000.0)).unwrap();
        let corr = observe(&octagon(600.0)[..3], &truth);
        assert_eq!(
            rpnp_solve(&corr, &cam()).unwrap_err(),
            PnpError::TooFewCorrespondences(3)
        );
    }

    #[test]
    fn collinear_reference_points_rejected() {
        let world: Vec<_> = (0..5).map(|k| Point3::new(k as f64 * 100.0, 0.0, 0.0)).collect();
        let truth = Pose::from_euler_deg(10.0, 10.0, 0.0, Vector3::new(0.0, 0.0, 4000.0)).unwrap();
        assert!(matches!(
            rpnp_solve(&observe(&world, &truth), &cam()),
            Err(PnpError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn rmse_values() {
        let truth = Pose::from_euler_deg(3.0, 4.0, 5.0, Vector3::new(0.0, 0.0, 4000.0)).unwrap();
        let mut corr = observe(&octagon(600.0), &truth);
        assert!(reprojection_rmse(&corr, &cam(), &truth).unwrap() < 1e-12);
        for c in &mut corr {
            c.image.x += 3.0;
            c.image.y += 4.0;
        }
        assert!((reprojection_rmse(&corr, &cam(), &truth).unwrap() - 5.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in &mut corr {
            c.image.x += rng.random_range(-2.0..2.0);
        }
        let brute = (corr
            .iter()
            .map(|c| {
                let pc = truth.rotation() * c.world.coords + truth.translation();
                let u = 800.0 * pc.x / pc.z + 320.0;
                let v = 800.0 * pc.y / pc.z + 240.0;
                (u - c.image.x).powi(2) + (v - c.image.y).powi(2)
            })
            .sum::<f64>()
            / corr.len() as f64)
            .sqrt();
        assert!((reprojection_rmse(&corr, &cam(), &truth).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn correspondence_json_shape() {
        let c = Correspondence::new(Point3::new(1.0, 2.0, 3.0), Point2::new(4.0, 5.0));
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"P":[1.0,2.0,3.0],"p":[4.0,5.0]}"#);
        let back: Correspondence = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
