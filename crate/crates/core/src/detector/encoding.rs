//! Grid targets and prediction decoding.
//!
//! Tensors are flat with index `((row * G + col) * B + b) * 5 + k`, where
//! `k` runs over `(x, y, w, h, S)`. `x, y` are the box center's offset
//! inside its cell, scaled to `[0, 1]`; `w, h` are image-normalized.

use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::bbox::BoundingBox;

pub const FIELDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub g: usize,
    pub b: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { g: 7, b: 2 }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.g * self.g * self.b * FIELDS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, cell: usize, b: usize, k: usize) -> usize {
        (cell * self.b + b) * FIELDS + k
    }

    /// Image-normalized box predicted by slot `(cell, b)` of `t`.
    pub fn slot_box<T: Copy + Into<f64>>(&self, t: &[T], cell: usize, b: usize) -> BoundingBox {
        let i = self.index(cell, b, 0);
        let (row, col) = (cell / self.g, cell % self.g);
        let g = self.g as f64;
        let cx = (col as f64 + t[i].into()) / g;
        let cy = (row as f64 + t[i + 1].into()) / g;
        BoundingBox::from_center(cx, cy, t[i + 2].into(), t[i + 3].into())
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEncoding {
    pub grid: GridSpec,
    /// Box values replicated over the owning cell's `B` slots, with `S = 1`.
    pub target: Vec<f64>,
    /// Owning cell (`l^dock_i = 1`); `None` for background samples.
    pub dock_cell: Option<usize>,
    pub gt_box: Option<BoundingBox>,
}

impl GridEncoding {
    pub fn background(grid: GridSpec) -> Self {
        Self {
            grid,
            target: vec![0.0; grid.len()],
            dock_cell: None,
            gt_box: None,
        }
    }
}

const RANGE_EPS: f64 = 1e-9;

/// Cell `floor(center * G)` (clamped at 1.0) owns the box.
pub fn encode_target(gt: Option<&BoundingBox>, grid: GridSpec) -> Result<GridEncoding, DetectorError> {
    let Some(bx) = gt else {
        return Ok(GridEncoding::background(grid));
    };
    let in_range = |v: f64| (-RANGE_EPS..=1.0 + RANGE_EPS).contains(&v);
    if !bx.is_finite()
        || !in_range(bx.x)
        || !in_range(bx.y)
        || bx.w < 0.0
        || bx.h < 0.0
        || !in_range(bx.x + bx.w)
        || !in_range(bx.y + bx.h)
    {
        return Err(DetectorError::BoxOutOfRange(*bx));
    }
    let g = grid.g as f64;
    let (cx, cy) = bx.center();
    let col = ((cx * g).floor().max(0.0) as usize).min(grid.g - 1);
    let row = ((cy * g).floor().max(0.0) as usize).min(grid.g - 1);
    let cell = row * grid.g + col;
    let mut target = vec![0.0; grid.len()];
    for b in 0..grid.b {
        let i = grid.index(cell, b, 0);
        target[i] = cx * g - col as f64;
        target[i + 1] = cy * g - row as f64;
        target[i + 2] = bx.w;
        target[i + 3] = bx.h;
        target[i + 4] = 1.0;
    }
    Ok(GridEncoding {
        grid,
        target,
        dock_cell: Some(cell),
        gt_box: Some(*bx),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Image-normalized box, with fields clamped to `[0, 1]`.
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub cell: usize,
    pub slot: usize,
    /// `max_b S_{i,b}` per cell, row-major.
    pub confidence_map: Vec<f64>,
}

/// Highest-confidence slot; ties go to the lowest flat index.
pub fn decode_prediction<T: Copy + Into<f64>>(pred: &[T], grid: GridSpec) -> Decoded {
    assert_eq!(pred.len(), grid.len(), "prediction tensor length");
    let mut best = (0, 0, f64::NEG_INFINITY);
    let mut confidence_map = vec![f64::NEG_INFINITY; grid.g * grid.g];
    for cell in 0..grid.g * grid.g {
        for b in 0..grid.b {
            let s: f64 = pred[grid.index(cell, b, 4)].into();
            if s > best.2 {
                best = (cell, b, s);
            }
            if s > confidence_map[cell] {
                confidence_map[cell] = s;
            }
        }
    }
    let (cell, slot, confidence) = best;
    let i = grid.index(cell, slot, 0);
    let c = |k: usize| pred[i + k].into().clamp(0.0, 1.0);
    let clamped = [c(0), c(1), c(2), c(3)];
    let bbox = grid.slot_box(&clamped, 0, 0);
    let (row, col) = (cell / grid.g, cell % grid.g);
    let g = grid.g as f64;
    let bbox = BoundingBox::new(bbox.x + col as f64 / g, bbox.y + row as f64 / g, bbox.w, bbox.h);
    Decoded {
        bbox,
        confidence,
        cell,
        slot,
        confidence_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_box_owns_middle_cell() {
        let grid = GridSpec::default();
        let bx = BoundingBox::from_center(0.5, 0.5, 0.2, 0.3);
        let enc = encode_target(Some(&bx), grid).unwrap();
        assert_eq!(enc.dock_cell, Some(3 * 7 + 3));
        let i = grid.index(24, 0, 0);
        assert!((enc.target[i] - 0.5).abs() < 1e-12 && (enc.target[i + 1] - 0.5).abs() < 1e-12);
        assert_eq!(enc.target[i + 4], 1.0);
    }

    #[test]
    fn origin_box_and_boundaries() {
        let grid = GridSpec::default();
        let enc = encode_target(Some(&BoundingBox::new(0.0, 0.0, 0.0, 0.0)), grid).unwrap();
        assert_eq!(enc.dock_cell, Some(0));
        assert_eq!(&enc.target[..2], &[0.0, 0.0]);
        // center exactly on a cell edge goes to the higher cell
        let edge = BoundingBox::from_center(2.0 / 7.0, 0.1, 0.1, 0.1);
        assert_eq!(encode_target(Some(&edge), grid).unwrap().dock_cell, Some(2));
        let corner = BoundingBox::new(0.8, 0.8, 0.2, 0.2);
        assert!(encode_target(Some(&corner), grid).unwrap().dock_cell.unwrap() < 49);
        assert!(matches!(
            encode_target(Some(&BoundingBox::new(0.9, 0.0, 0.3, 0.1)), grid),
            Err(DetectorError::BoxOutOfRange(_))
        ));
    }

    #[test]
    fn background_is_zero() {
        let enc = encode_target(None, GridSpec::default()).unwrap();
        assert!(enc.target.iter().all(|v| *v == 0.0));
        assert_eq!(enc.dock_cell, None);
    }

    #[test]
    fn decode_roundtrip() {
        let grid = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let w = rng.random_range(0.01..0.5);
            let h = rng.random_range(0.01..0.5);
            let bx = BoundingBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h);
            let enc = encode_target(Some(&bx), grid).unwrap();
            let d = decode_prediction(&enc.target, grid);
            assert!((d.bbox.x - bx.x).abs() < 1e-12 && (d.bbox.y - bx.y).abs() < 1e-12);
            assert!((d.bbox.w - bx.w).abs() < 1e-12 && (d.bbox.h - bx.h).abs() < 1e-12);
            assert_eq!(d.slot, 0);
        }
    }

    #[test]
    fn decode_ties_and_single_peak() {
        let grid = GridSpec { g: 2, b: 2 };
        let mut t = vec![0.0; grid.len()];
        t[grid.index(2, 1, 4)] = 0.9;
        let d = decode_prediction(&t, grid);
        assert_eq!((d.cell, d.slot, d.confidence), (2, 1, 0.9));
        t[grid.index(1, 0, 4)] = 0.9;
        let d = decode_prediction(&t, grid);
        assert_eq!((d.cell, d.slot), (1, 0));
        assert_eq!(d.confidence_map, vec![0.0, 0.9, 0.9, 0.0]);
    }

    #[test]
    fn decode_matches_scan_and_monotone_transform() {
        let grid = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = decode_prediction(&t, grid);
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for slot in 0..grid.g * grid.g * grid.b {
                if t[slot * 5 + 4] > bv {
                    bv = t[slot * 5 + 4];
                    bi = slot;
                }
            }
            assert_eq!(d.cell * grid.b + d.slot, bi);
            let mut warped = t.clone();
            for slot in 0..grid.g * grid.g * grid.b {
                warped[slot * 5 + 4] = (3.0 * t[slot * 5 + 4]).exp();
            }
            let e = decode_prediction(&warped, grid);
            assert_eq!((e.cell, e.slot), (d.cell, d.slot));
        }
    }
}
