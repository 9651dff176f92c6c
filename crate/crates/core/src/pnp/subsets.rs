//! Three-point subsets sharing one rotation-axis edge, and their quartics.
//!
//! Every subset holds the axis endpoints `P_i`, `P_j` and one further point
//! `P_k`. With unit viewing rays `v_i, v_j, v_k` and unknown depths
//! `d_i, d_j, d_k`, the law of cosines on each side of the triangle gives
//!
//! ```text
//! d_i^2 + d_j^2 - 2 d_i d_j cos(gamma) = d_ij^2
//! d_j^2 + d_k^2 - 2 d_j d_k cos(alpha) = d_jk^2
//! d_i^2 + d_k^2 - 2 d_i d_k cos(beta)  = d_ik^2
//! ```
//!
//! Writing `d_j = (cos(gamma) + x) d_i` makes the first equation give
//! `d_i^2 = d_ij^2 / (x^2 + sin(gamma)^2)`. The third depth is linear in the
//! difference of the other two equations, and substituting it back leaves a
//! single quartic in `x` that is shared in meaning across all subsets.

use nalgebra::Point2;

use super::poly::Poly;
use super::{Correspondence, PnpError};
use crate::camera::CameraIntrinsics;

/// One `(axis_i, axis_j, k)` triple with its side lengths and ray cosines.
///
/// `cos_gamma` is the angle between the axis rays, `cos_alpha` between
/// `axis_j` and `k`, `cos_beta` between `axis_i` and `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetTriple {
    pub indices: (usize, usize, usize),
    pub d_12: f64,
    pub d_23: f64,
    pub d_13: f64,
    pub cos_alpha: f64,
    pub cos_beta: f64,
    pub cos_gamma: f64,
}

/// `h(x) = a x^4 + b x^3 + c x^2 + d x + e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl QuarticCoeffs {
    pub fn to_poly(&self) -> Poly {
        Poly::new(vec![self.e, self.d, self.c, self.b, self.a])
    }

    pub fn eval(&self, x: f64) -> f64 {
        (((self.a * x + self.b) * x + self.c) * x + self.d) * x + self.e
    }
}

/// The axis edge: the pair of correspondences farthest apart in the image.
pub fn select_axis(corr: &[Correspondence]) -> (usize, usize) {
    let mut best = (0, 1);
    let mut best_len = f64::NEG_INFINITY;
    for i in 0..corr.len() {
        for j in (i + 1)..corr.len() {
            let l = (corr[i].image - corr[j].image).norm_squared();
            if l > best_len {
                best_len = l;
                best = (i, j);
            }
        }
    }
    best
}

/// Split `n` correspondences into `n - 2` triples around the axis edge.
pub fn build_subsets(corr: &[Correspondence], intr: &CameraIntrinsics) -> Result<Vec<SubsetTriple>, PnpError> {
    if corr.len() < 4 {
        return Err(PnpError::TooFewCorrespondences(corr.len()));
    }
    intr.validate()?;
    check_finite(corr)?;
    let (i, j) = select_axis(corr);
    let rays: Vec<_> = corr.iter().map(|c| intr.ray(&c.image)).collect();
    let d_12 = (corr[i].world - corr[j].world).norm();
    if d_12 <= 0.0 {
        return Err(PnpError::DegenerateGeometry(format!("points {i} and {j} coincide")));
    }
    let cos_gamma = rays[i].dot(&rays[j]).clamp(-1.0, 1.0);
    (0..corr.len())
        .filter(|&k| k != i && k != j)
        .map(|k| {
            let d_13 = (corr[i].world - corr[k].world).norm();
            let d_23 = (corr[j].world - corr[k].world).norm();
            if d_13 <= 0.0 || d_23 <= 0.0 {
                return Err(PnpError::DegenerateGeometry(format!(
                    "point {k} coincides with an axis endpoint"
                )));
            }
            Ok(SubsetTriple {
                indices: (i, j, k),
                d_12,
                d_23,
                d_13,
                cos_alpha: rays[j].dot(&rays[k]).clamp(-1.0, 1.0),
                cos_beta: rays[i].dot(&rays[k]).clamp(-1.0, 1.0),
                cos_gamma,
            })
        })
        .collect()
}

/// Quartic whose roots are the admissible values of `x = d_j / d_i - cos(gamma)`.
pub fn subset_to_quartic(t: &SubsetTriple) -> Result<QuarticCoeffs, PnpError> {
    let sides = [t.d_12, t.d_23, t.d_13];
    if sides.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(PnpError::DegenerateGeometry("non-positive side length".into()));
    }
    // Heron: 16 area^2 = (a+b+c)(-a+b+c)(a-b+c)(a+b-c)
    let (a, b, c) = (t.d_12, t.d_23, t.d_13);
    let area16 = (a + b + c) * (-a + b + c) * (a - b + c) * (a + b - c);
    let longest = a.max(b).max(c);
    if area16 <= 1e-12 * longest.powi(4) {
        return Err(PnpError::DegenerateGeometry(format!(
            "collinear triple {:?}",
            t.indices
        )));
    }

    let cg = t.cos_gamma;
    let s2 = 1.0 - cg * cg;
    let ratio_13 = (t.d_13 / t.d_12).powi(2);
    let ratio_diff = (t.d_23 * t.d_23 - t.d_13 * t.d_13) / (t.d_12 * t.d_12);

    // d_k / d_i = num(x) / den(x)
    let num = Poly::new(vec![-s2 * (1.0 + ratio_diff), 2.0 * cg, 1.0 - ratio_diff]);
    let den = Poly::new(vec![2.0 * (cg * t.cos_alpha - t.cos_beta), 2.0 * t.cos_alpha]);
    let rest = Poly::new(vec![1.0 - ratio_13 * s2, 0.0, -ratio_13]);

    let h = num
        .mul(&num)
        .add(&num.mul(&den).scale(-2.0 * t.cos_beta))
        .add(&den.mul(&den).mul(&rest));
    let mut co = h.0;
    co.resize(5, 0.0);
    Ok(QuarticCoeffs {
        a: co[4],
        b: co[3],
        c: co[2],
        d: co[1],
        e: co[0],
    })
}

/// Depth of the third point relative to `d_i`, at parameter `x`.
pub fn third_depth_ratio(t: &SubsetTriple, x: f64) -> Option<f64> {
    let cg = t.cos_gamma;
    let rho = cg + x;
    let ratio_diff = (t.d_23 * t.d_23 - t.d_13 * t.d_13) / (t.d_12 * t.d_12);
    let den = 2.0 * (rho * t.cos_alpha - t.cos_beta);
    if den.abs() < 1e-15 {
        return None;
    }
    Some((rho * rho - 1.0 - ratio_diff * (x * x + 1.0 - cg * cg)) / den)
}

/// Cost `H = sum h_j^2` together with `H'` and `H''`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPolynomial {
    pub cost: Poly,
    pub first: Poly,
    pub second: Poly,
}

pub fn cost_polynomial(quartics: &[QuarticCoeffs]) -> Result<CostPolynomial, PnpError> {
    if quartics.is_empty() {
        return Err(PnpError::DegenerateGeometry("no subsets".into()));
    }
    let mut cost = Poly::new(vec![0.0; 9]);
    for q in quartics {
        let h = q.to_poly();
        cost = cost.add(&h.mul(&h));
    }
    let first = cost.derivative();
    let second = first.derivative();
    Ok(CostPolynomial { cost, first, second })
}

fn check_finite(corr: &[Correspondence]) -> Result<(), PnpError> {
    let finite = |p: &Point2<f64>| p.x.is_finite() && p.y.is_finite();
    if corr
        .iter()
        .any(|c| !finite(&c.image) || c.world.iter().any(|v| !v.is_finite()))
    {
        return Err(PnpError::NonFinite);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project;
    use crate::pnp::poly::real_roots;
    use crate::pose::Pose;
    use nalgebra::{Point3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0, 640, 480)
    }

    fn correspondences(world: &[Point3<f64>], pose: &Pose) -> Vec<Correspondence> {
        world
            .iter()
            .map(|w| Correspondence::new(*w, project(w, &cam(), pose).unwrap()))
            .collect()
    }

    fn octagon() -> Vec<Point3<f64>> {
        (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 8.0;
                Point3::new(600.0 * a.cos(), 600.0 * a.sin(), 0.0)
            })
            .collect()
    }

    /// Depths from the camera pose, for the true parameter value.
    fn true_x(t: &SubsetTriple, world: &[Point3<f64>], pose: &Pose) -> f64 {
        let (i, j, _) = t.indices;
        let di = pose.transform(&world[i]).coords.norm();
        let dj = pose.transform(&world[j]).coords.norm();
        dj / di - t.cos_gamma
    }

    /// Law-of-cosines residual of the (k) constraints after eliminating
    /// `d_i` and solving the quadratic in `d_k` from the (i, k) side.
    fn constraint_residual(t: &SubsetTriple, x: f64) -> Vec<f64> {
        let s2 = 1.0 - t.cos_gamma * t.cos_gamma;
        let di = t.d_12 / (x * x + s2).sqrt();
        let dj = (t.cos_gamma + x) * di;
        // d_k^2 - 2 d_i cos(beta) d_k + d_i^2 - d_13^2 = 0
        let b = -2.0 * di * t.cos_beta;
        let c = di * di - t.d_13 * t.d_13;
        let disc = b * b - 4.0 * c;
        if disc < 0.0 {
            return Vec::new();
        }
        [(-b + disc.sqrt()) / 2.0, (-b - disc.sqrt()) / 2.0]
            .iter()
            .map(|&dk| (dj * dj + dk * dk - 2.0 * dj * dk * t.cos_alpha - t.d_23 * t.d_23) / (t.d_23 * t.d_23))
            .collect()
    }

    /// Brute-force scan for sign changes of the constraint residual.
    fn scan_roots(t: &SubsetTriple, lo: f64, hi: f64, steps: usize) -> Vec<f64> {
        let mut roots = Vec::new();
        let h = (hi - lo) / steps as f64;
        for branch in 0..2 {
            let f = |x: f64| constraint_residual(t, x).get(branch).copied();
            for s in 0..steps {
                let (a, b) = (lo + s as f64 * h, lo + (s + 1) as f64 * h);
                if let (Some(fa), Some(fb)) = (f(a), f(b)) {
                    if fa == 0.0 || fa.signum() != fb.signum() {
                        let (mut l, mut r, mut fl) = (a, b, fa);
                        for _ in 0..80 {
                            let m = 0.5 * (l + r);
                            match f(m) {
                                Some(fm) if fm.signum() == fl.signum() => {
                                    l = m;
                                    fl = fm;
                                }
                                Some(_) => r = m,
                                None => break,
                            }
                        }
                        roots.push(0.5 * (l + r));
                    }
                }
            }
        }
        roots
    }

    #[test]
    fn subset_counts() {
        let pose = Pose::from_euler_deg(5.0, 3.0, -2.0, Vector3::new(0.0, 0.0, 4000.0)).unwrap();
        let corr = correspondences(&octagon(), &pose);
        assert_eq!(build_subsets(&corr, &cam()).unwrap().len(), 6);
        assert_eq!(build_subsets(&corr[..4], &cam()).unwrap().len(), 2);
        assert!(matches!(
            build_subsets(&corr[..3], &cam()),
            Err(PnpError::TooFewCorrespondences(3))
        ));
        let subsets = build_subsets(&corr, &cam()).unwrap();
        let (i, j, _) = subsets[0].indices;
        assert!(subsets.iter().all(|s| s.indices.0 == i && s.indices.1 == j));
    }

    #[test]
    fn duplicate_points_are_degenerate() {
        let pose = Pose::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 4000.0)).unwrap();
        let mut world = octagon();
        world[3] = world[0];
        let mut corr = correspondences(&world, &pose);
        // keep the image points apart so the axis is unaffected
        corr[3].image.x += 1.0;
        assert!(matches!(
            build_subsets(&corr, &cam()),
            Err(PnpError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn collinear_triple_is_degenerate() {
        let t = SubsetTriple {
            indices: (0, 1, 2),
            d_12: 2.0,
            d_23: 1.0,
            d_13: 1.0,
            cos_alpha: 0.99,
            cos_beta: 0.99,
            cos_gamma: 0.98,
        };
        assert!(matches!(subset_to_quartic(&t), Err(PnpError::DegenerateGeometry(_))));
    }

    #[test]
    fn equilateral_on_axis_root_at_symmetric_ratio() {
        let side = 1000.0;
        let r = side / 3f64.sqrt();
        let world: Vec<_> = (0..3)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 3.0 + 0.3;
                Point3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 5000.0)).unwrap();
        let rays: Vec<_> = world
            .iter()
            .map(|w| cam().ray(&project(w, &cam(), &pose).unwrap()))
            .collect();
        let t = SubsetTriple {
            indices: (0, 1, 2),
            d_12: side,
            d_23: side,
            d_13: side,
            cos_alpha: rays[1].dot(&rays[2]),
            cos_beta: rays[0].dot(&rays[2]),
            cos_gamma: rays[0].dot(&rays[1]),
        };
        let q = subset_to_quartic(&t).unwrap();
        // all depths equal -> ratio 1 -> x* = 1 - cos(gamma)
        let x_star = 1.0 - t.cos_gamma;
        let scale = [q.a, q.b, q.c, q.d, q.e].iter().fold(0.0f64, |m, c| m.max(c.abs()));
        assert!(q.eval(x_star).abs() / scale < 1e-9);
        let scanned = scan_roots(&t, -1.0, 1.0, 20000);
        assert!(scanned.iter().any(|r| (r - x_star).abs() < 1e-9));
    }

    #[test]
    fn quartic_roots_match_constraint_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let world: Vec<_> = (0..3)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-800.0..800.0),
                        rng.random_range(-800.0..800.0),
                        rng.random_range(-300.0..300.0),
                    )
                })
                .collect();
            let pose = Pose::from_euler_deg(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                Vector3::new(
                    rng.random_range(-300.0..300.0),
                    rng.random_range(-300.0..300.0),
                    rng.random_range(3000.0..6000.0),
                ),
            )
            .unwrap();
            let corr = correspondences(&world, &pose);
            let rays: Vec<_> = corr.iter().map(|c| cam().ray(&c.image)).collect();
            let t = SubsetTriple {
                indices: (0, 1, 2),
                d_12: (world[0] - world[1]).norm(),
                d_23: (world[1] - world[2]).norm(),
                d_13: (world[0] - world[2]).norm(),
                cos_alpha: rays[1].dot(&rays[2]),
                cos_beta: rays[0].dot(&rays[2]),
                cos_gamma: rays[0].dot(&rays[1]),
            };
            let Ok(q) = subset_to_quartic(&t) else { continue };
            let x_true = true_x(&t, &world, &pose);
            let scale = [q.a, q.b, q.c, q.d, q.e].iter().fold(0.0f64, |m, c| m.max(c.abs()));
            assert!(q.eval(x_true).abs() / scale < 1e-9);

            // every scanned constraint root is a quartic root
            let quartic_roots = real_roots(&q.to_poly()).unwrap();
            for s in scan_roots(&t, -2.0, 2.0, 4000) {
                assert!(
                    quartic_roots.iter().any(|r| (r - s).abs() < 1e-6),
                    "scan root {s} missing from {quartic_roots:?}"
                );
            }
        }
    }

    #[test]
    fn quartic_roots_are_scale_invariant() {
        let pose = Pose::from_euler_deg(12.0, -8.0, 4.0, Vector3::new(150.0, -80.0, 4200.0)).unwrap();
        let world = octagon();
        let big: Vec<_> = world.iter().map(|p| Point3::from(p.coords * 2.0)).collect();
        let corr = correspondences(&world, &pose);
        let corr2 = correspondences(&big, &pose.scaled(2.0));
        let s1 = build_subsets(&corr, &cam()).unwrap();
        let s2 = build_subsets(&corr2, &cam()).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            let ra = real_roots(&subset_to_quartic(a).unwrap().to_poly()).unwrap();
            let rb = real_roots(&subset_to_quartic(b).unwrap().to_poly()).unwrap();
            assert_eq!(ra.len(), rb.len());
            for (x, y) in ra.iter().zip(&rb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cost_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let quartics: Vec<_> = (0..4)
            .map(|_| QuarticCoeffs {
                a: rng.random_range(-1.0..1.0),
                b: rng.random_range(-1.0..1.0),
                c: rng.random_range(-1.0..1.0),
                d: rng.random_range(-1.0..1.0),
                e: rng.random_range(-1.0..1.0),
            })
            .collect();
        let h = cost_polynomial(&quartics).unwrap();
        assert_eq!(h.cost.degree(), Some(8));
        assert_eq!(h.first.degree(), Some(7));
        for _ in 0..10 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let eps = 1e-5;
            let fd = (h.cost.eval(x + eps) - h.cost.eval(x - eps)) / (2.0 * eps);
            let an = h.first.eval(x);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
        // coefficient-wise analytic derivative
        for (k, c) in h.first.coeffs().iter().enumerate() {
            let expect = (k + 1) as f64 * h.cost.coeffs()[k + 1];
            assert!((c - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        }
    }

    #[test]
    fn single_quartic_root_is_stationary() {
        // h(x) = (x - 0.25)(x + 1)(x^2 + 1)
        let p = Poly::from_roots(&[0.25, -1.0]).mul(&Poly::new(vec![1.0, 0.0, 1.0]));
        let q = QuarticCoeffs {
            a: p.0[4],
            b: p.0[3],
            c: p.0[2],
            d: p.0[1],
            e: p.0[0],
        };
        let h = cost_polynomial(&[q]).unwrap();
        assert!(h.cost.eval(0.25).abs() < 1e-15);
        assert!(h.first.eval(0.25).abs() < 1e-14);
        let twice = cost_polynomial(&[q, q]).unwrap();
        for x in [-0.7, 0.1, 1.3] {
            assert!((twice.cost.eval(x) - 2.0 * h.cost.eval(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn third_depth_matches_geometry() {
        let pose = Pose::from_euler_deg(20.0, 10.0, -5.0, Vector3::new(100.0, 50.0, 3500.0)).unwrap();
        let world = octagon();
        let corr = correspondences(&world, &pose);
        for t in build_subsets(&corr, &cam()).unwrap() {
            let x = true_x(&t, &world, &pose);
            let (i, _, k) = t.indices;
            let di = pose.transform(&world[i]).coords.norm();
            let dk = pose.transform(&world[k]).coords.norm();
            let ratio = third_depth_ratio(&t, x).unwrap();
            assert!((ratio - dk / di).abs() < 1e-9);
        }
    }
}
