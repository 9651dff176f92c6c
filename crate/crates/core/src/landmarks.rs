//! Landmark extraction from a station patch: local-mean adaptive threshold,
//! 8-connected components, area-weighted k-means consolidation, and cyclic
//! ordering against the layout.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::deform::gaussian_blur;
use crate::image::ImageBuffer;
use crate::pnp::{rpnp_solve, Correspondence, PnpError, PnpSolution};
use crate::scene::LandmarkLayout;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("patch is empty")]
    EmptyPatch,
    #[error("invalid threshold parameters: {0}")]
    InvalidParams(String),
    #[error("partial observation: {0} landmarks")]
    PartialObservation(usize),
    #[error("no candidate ordering produced a pose: {0}")]
    NoPose(#[source] PnpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    /// Window side as a fraction of the patch's larger dimension.
    pub window_frac: f64,
    /// A pixel is foreground when brighter than the local mean by this percentage.
    pub t_percent: f64,
    /// Gaussian pre-smoothing before thresholding; 0 disables it.
    pub presmooth_sigma: f64,
    pub min_area: usize,
    pub kmeans_seed: u64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            window_frac: 0.125,
            t_percent: 50.0,
            presmooth_sigma: 1.0,
            min_area: 3,
            kmeans_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Window side in pixels for a patch: `max(3, max_dim * frac)`.
pub fn window_size(width: usize, height: usize, frac: f64) -> usize {
    ((width.max(height) as f64 * frac).round() as usize).max(3)
}

/// Foreground where `value > local_mean * (1 + t / 100)`, with the local
/// mean taken over a square window clipped at the borders.
pub fn adaptive_threshold(patch: &ImageBuffer, params: &ThresholdParams) -> Result<BinaryMask, LandmarkError> {
    let (w, h) = (patch.width(), patch.height());
    if w == 0 || h == 0 {
        return Err(LandmarkError::EmptyPatch);
    }
    if !(params.window_frac > 0.0) || !(params.t_percent >= 0.0) || !(params.presmooth_sigma >= 0.0) {
        return Err(LandmarkError::InvalidParams(format!("{params:?}")));
    }
    let mut gray = patch.to_gray();
    if params.presmooth_sigma > 0.0 {
        gray = gaussian_blur(&gray, params.presmooth_sigma).map_err(|e| LandmarkError::InvalidParams(e.to_string()))?;
    }
    let v = gray.plane(0);
    // integral image with a zero row and column in front
    let stride = w + 1;
    let mut integral = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let half = window_size(w, h, params.window_frac) / 2;
    let factor = 1.0 + params.t_percent / 100.0;
    let mut mask = BinaryMask::new(w, h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(half), (y + half + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(half), (x + half + 1).min(w));
            let sum = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            if v[y * w + x] * count > sum * factor {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pixel_count: usize,
    /// Unweighted mean of member pixel centers.
    pub centroid: Point2<f64>,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bounds: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentSet {
    pub components: Vec<Component>,
}

/// 8-connected labelling in raster order of each component's first pixel;
/// components smaller than `min_area` are dropped.
pub fn connected_components(mask: &BinaryMask, min_area: usize) -> ComponentSet {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        let mut bounds = (w, h, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            n += 1;
            sx += x as f64;
            sy += y as f64;
            bounds = (bounds.0.min(x), bounds.1.min(y), bounds.2.max(x), bounds.3.max(y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if n >= min_area {
            components.push(Component {
                pixel_count: n,
                centroid: Point2::new(sx / n as f64, sy / n as f64),
                bounds,
            });
        }
    }
    ComponentSet { components }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub centroids: Vec<Point2<f64>>,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Point2<f64>>,
    pub assignments: Vec<usize>,
    /// Weighted sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn nearest(p: &Point2<f64>, centers: &[Point2<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, (p - c).norm_squared()))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Weighted k-means with k-means++ seeding; at most 50 Lloyd iterations,
/// stopping when assignments no longer change.
pub fn weighted_kmeans(points: &[Point2<f64>], weights: &[f64], k: usize, seed: u64) -> KMeansResult {
    assert!(k >= 1 && points.len() >= k && weights.len() == points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let first = weights
        .iter()
        .position(|w| {
            pick -= w;
            pick < 0.0
        })
        .unwrap_or(points.len() - 1);
    let mut centers = vec![points[first]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, w)| w * nearest(p, &centers).1)
            .collect();
        let sum: f64 = d2.iter().sum();
        let next = if sum > 0.0 {
            let mut r = rng.random_range(0.0..sum);
            d2.iter()
                .position(|d| {
                    r -= d;
                    r < 0.0 && *d > 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive mass"))
        } else {
            // every point coincides with a center already
            (0..points.len()).find(|i| !centers.contains(&points[*i])).unwrap_or(0)
        };
        centers.push(points[next]);
    }
    let mut assignments = vec![usize::MAX; points.len()];
    let mut objective: Vec<f64> = Vec::new();
    for _ in 0..50 {
        let mut changed = false;
        let mut obj = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            obj += weights[i] * d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if let Some(prev) = objective.last() {
            debug_assert!(obj <= prev + 1e-9 * prev.max(1.0), "k-means objective rose");
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut acc = vec![(0.0, 0.0, 0.0); k];
        for (i, p) in points.iter().enumerate() {
            let a = &mut acc[assignments[i]];
            a.0 += weights[i] * p.x;
            a.1 += weights[i] * p.y;
            a.2 += weights[i];
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.2 > 0.0 {
                *c = Point2::new(a.0 / a.2, a.1 / a.2);
            }
        }
    }
    KMeansResult {
        centers,
        assignments,
        objective,
    }
}

/// Fewer than `k` components is a partial observation; exactly `k` passes
/// through; more are merged by area-weighted k-means.
pub fn consolidate_landmarks(comps: &ComponentSet, k: usize, seed: u64) -> LandmarkSet {
    let points: Vec<Point2<f64>> = comps.components.iter().map(|c| c.centroid).collect();
    if points.len() < k {
        return LandmarkSet {
            centroids: points,
            observation: Observation::Partial,
        };
    }
    if points.len() == k {
        return LandmarkSet {
            centroids: points,
            observation: Observation::Full,
        };
    }
    let weights: Vec<f64> = comps.components.iter().map(|c| c.pixel_count as f64).collect();
    let res = weighted_kmeans(&points, &weights, k, seed);
    LandmarkSet {
        centroids: res.centers,
        observation: Observation::Full,
    }
}

/// Threshold, label and consolidate one patch.
pub fn extract_landmarks(
    patch: &ImageBuffer,
    params: &ThresholdParams,
    k: usize,
) -> Result<LandmarkSet, LandmarkError> {
    let mask = adaptive_threshold(patch, params)?;
    let comps = connected_components(&mask, params.min_area);
    Ok(consolidate_landmarks(&comps, k, params.kmeans_seed))
}

/// All cyclic assignments of the centroids to layout indices.
///
/// Centroids are sorted clockwise (in image coordinates, y down) around
/// their mean starting from the topmost; candidate `s` assigns sorted point
/// `(j + s) mod n` to layout index `j`.
pub fn order_landmarks(set: &LandmarkSet) -> Result<Vec<Vec<Point2<f64>>>, LandmarkError> {
    if set.observation != Observation::Full {
        return Err(LandmarkError::PartialObservation(set.centroids.len()));
    }
    let n = set.centroids.len();
    let mean = set
        .centroids
        .iter()
        .fold(nalgebra::Vector2::zeros(), |acc, p| acc + p.coords)
        / n as f64;
    let angle = |p: &Point2<f64>| (p.y - mean.y).atan2(p.x - mean.x);
    let mut sorted = set.centroids.clone();
    sorted.sort_by(|a, b| angle(a).total_cmp(&angle(b)));
    let top = (0..n)
        .min_by(|&a, &b| sorted[a].y.total_cmp(&sorted[b].y).then(a.cmp(&b)))
        .expect("nonempty");
    sorted.rotate_left(top);
    Ok((0..n).map(|s| (0..n).map(|j| sorted[(j + s) % n]).collect()).collect())
}

/// Pose from a full observation, trying every cyclic ordering and keeping
/// the least reprojection error. Returns the solution and the chosen ordering.
///
/// A regular ring fits equally well under every cyclic shift, so orderings
/// whose error is within [`RING_TIE_PX`] of the best are ranked by the
/// smallest twist about the station normal instead. The pose is therefore
/// unambiguous only while the true twist stays under half the light spacing.
pub fn estimate_pose(
    set: &LandmarkSet,
    layout: &LandmarkLayout,
    intr: &CameraIntrinsics,
) -> Result<(PnpSolution, Vec<Point2<f64>>), LandmarkError> {
    let world = layout.points();
    let mut found = Vec::new();
    let mut last_err = PnpError::NoValidCandidate;
    for ordering in order_landmarks(set)? {
        let corr: Vec<Correspondence> = world
            .iter()
            .zip(&ordering)
            .map(|(p, q)| Correspondence::new(*p, *q))
            .collect();
        match rpnp_solve(&corr, intr) {
            Ok(sol) => found.push((sol, ordering)),
            Err(e) => last_err = e,
        }
    }
    let Some(min_rmse) = found.iter().map(|(s, _)| s.reprojection_rmse).min_by(f64::total_cmp) else {
        return Err(LandmarkError::NoPose(last_err));
    };
    found
        .into_iter()
        .filter(|(s, _)| s.reprojection_rmse <= min_rmse + RING_TIE_PX)
        .min_by(|(a, _), (b, _)| {
            twist_about_normal(a.pose.rotation())
                .abs()
                .total_cmp(&twist_about_normal(b.pose.rotation()).abs())
        })
        .ok_or(LandmarkError::NoPose(last_err))
}

/// Reprojection RMSE band (px) inside which cyclic orderings count as tied.
pub const RING_TIE_PX: f64 = 0.05;

/// Twist (radians, in `(-pi, pi]`) of `r` about the station's own z axis,
/// from the swing-twist split `q = swing * twist(z)`. A cyclic shift of the
/// ring by angle `a` adds exactly `a` to it.
pub fn twist_about_normal(r: &nalgebra::Matrix3<f64>) -> f64 {
    let q = nalgebra::UnitQuaternion::from_matrix(r);
    let t = 2.0 * q.k.atan2(q.w);
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else if t <= -std::f64::consts::PI {
        t + std::f64::consts::TAU
    } else {
        t
    }
}
