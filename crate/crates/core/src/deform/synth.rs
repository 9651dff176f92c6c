//! Hard-case synthesis: surface mirror reflections and bright distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::poisson::{composite_patch, CompositeMode};
use super::DeformError;
use crate::bbox::{iou, BoundingBox};
use crate::image::ImageBuffer;

pub const MIRROR_GAP_RANGE: (f64, f64) = (0.2, 0.6);
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const MAX_DISTRACTOR_IOU: f64 = 0.1;

/// Integer pixel footprint of a normalized box, clipped to the image.
fn pixel_rect(b: &BoundingBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (x, y, w, h) = b.clipped().to_pixels(width, height);
    let x0 = x.floor().max(0.0) as usize;
    let y0 = y.floor().max(0.0) as usize;
    let x1 = ((x + w).ceil() as usize).min(width);
    let y1 = ((y + h).ceil() as usize).min(height);
    (x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1))
}

/// Paste a vertically flipped copy of the station above it, separated by a
/// gap drawn from `MIRROR_GAP_RANGE` times the box height. The ground truth
/// still describes only the real station.
pub fn make_mirror_sample(
    img: &ImageBuffer,
    gt: &BoundingBox,
    seed: u64,
) -> Result<(ImageBuffer, BoundingBox), DeformError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0, w, h) = pixel_rect(gt, img.width(), img.height());
    let gap = (rng.random_range(MIRROR_GAP_RANGE.0..=MIRROR_GAP_RANGE.1) * h as f64).round() as i64;
    let top = y0 as i64 - gap - h as i64;
    if top < 0 {
        return Err(DeformError::NoRoomAbove);
    }
    let station = img.crop(x0, y0, w, h)?;
    let flipped = ImageBuffer::from_fn(w, h, img.channels(), |x, y, c| station.get(x, h - 1 - y, c))?;
    let out = composite_patch(img, &flipped, x0 as i64, top, CompositeMode::GradientDomain)?;
    Ok((out, *gt))
}

/// Appearance of one distractor light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub count: usize,
    pub sigma_px: f64,
    pub peak: f64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            count: 3,
            sigma_px: 2.0,
            peak: 0.9,
        }
    }
}

fn blob_patch(side: usize, channels: usize, sigma: f64, peak: f64) -> ImageBuffer {
    let c0 = (side - 1) as f64 / 2.0;
    ImageBuffer::from_fn(side, side, channels, |x, y, _| {
        let (dx, dy) = (x as f64 - c0, y as f64 - c0);
        peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    })
    .expect("nonzero patch")
}

/// Composite `spec.count` bright blobs at locations whose footprint overlaps
/// the station box with IoU below `MAX_DISTRACTOR_IOU`.
pub fn make_noisy_luminary_sample(
    img: &ImageBuffer,
    gt: &BoundingBox,
    spec: &DistractorSpec,
    seed: u64,
) -> Result<(ImageBuffer, BoundingBox), DeformError> {
    if !(spec.sigma_px > 0.0) || !(spec.peak > 0.0 && spec.peak <= 1.0) {
        return Err(DeformError::InvalidParameter(format!("{spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 2 * (3.0 * spec.sigma_px).ceil() as usize + 1;
    let (w, h) = (img.width(), img.height());
    if side > w || side > h {
        return Err(DeformError::PlacementFailed {
            placed: 0,
            count: spec.count,
            attempts: 0,
        });
    }
    let patch = blob_patch(side, img.channels(), spec.sigma_px, spec.peak);
    let mut out = img.clone();
    for placed in 0..spec.count {
        let mut spot = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.random_range(0..=w - side);
            let y = rng.random_range(0..=h - side);
            let b = BoundingBox::from_pixels(x as f64, y as f64, side as f64, side as f64, w, h);
            if iou(&b, gt) < MAX_DISTRACTOR_IOU {
                spot = Some((x, y));
                break;
            }
        }
        let (x, y) = spot.ok_or(DeformError::PlacementFailed {
            placed,
            count: spec.count,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        out = composite_patch(&out, &patch, x as i64, y as i64, CompositeMode::GradientDomain)?;
    }
    Ok((out, *gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn station_image(y_center: usize) -> (ImageBuffer, BoundingBox) {
        let mut img = ImageBuffer::filled(64, 64, 1, 0.1).unwrap();
        for (dx, dy) in [(-6i64, 0i64), (6, 0), (0, -6), (0, 6)] {
            img.set((32 + dx) as usize, (y_center as i64 + dy) as usize, 0, 0.9);
        }
        let gt = BoundingBox::from_pixels(24.0, y_center as f64 - 8.0, 16.0, 16.0, 64, 64);
        (img, gt)
    }

    #[test]
    fn mirror_adds_light_above() {
        let (img, gt) = station_image(52);
        let (out, label) = make_mirror_sample(&img, &gt, 1).unwrap();
        assert_eq!(label, gt);
        let above: f64 = (0..40)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .map(|(x, y)| out.get(x, y, 0))
            .fold(0.0, f64::max);
        assert!(above > 0.5, "brightest pixel above station {above}");
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mirror_needs_room() {
        let (img, gt) = station_image(9);
        assert!(matches!(
            make_mirror_sample(&img, &gt, 1),
            Err(DeformError::NoRoomAbove)
        ));
    }

    #[test]
    fn distractors_are_seeded() {
        let (img, gt) = station_image(32);
        let spec = DistractorSpec::default();
        let (a, la) = make_noisy_luminary_sample(&img, &gt, &spec, 4).unwrap();
        let (b, _) = make_noisy_luminary_sample(&img, &gt, &spec, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, gt);
        let none = DistractorSpec { count: 0, ..spec };
        assert_eq!(make_noisy_luminary_sample(&img, &gt, &none, 4).unwrap().0, img);
    }

    #[test]
    fn impossible_placement_fails() {
        let img = ImageBuffer::filled(16, 16, 1, 0.1).unwrap();
        let gt = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let spec = DistractorSpec {
            count: 1,
            sigma_px: 2.0,
            peak: 0.9,
        };
        assert!(matches!(
            make_noisy_luminary_sample(&img, &gt, &spec, 1),
            Err(DeformError::PlacementFailed { .. })
        ));
    }
}
