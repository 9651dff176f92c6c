//! Weighted three-part grid loss and its gradient.
//!
//! `l = lambda_B l_B + lambda_d l_d + lambda_dbar l_dbar`, where
//! `l_B` compares the responsible box's coordinates (square roots for the
//! size terms), `l_d` its confidence, and `l_dbar` every other slot's
//! confidence against zero.

use serde::{Deserialize, Serialize};

use super::encoding::{GridEncoding, FIELDS};
use super::DetectorError;
use crate::bbox::iou;

/// Floor applied to predicted sizes before the square root.
pub const SIZE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub lambda_dbar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_b: 3.0,
            lambda_d: 0.5,
            lambda_dbar: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l_b: f64,
    pub l_d: f64,
    pub l_dbar: f64,
    /// `d total / d pred`, same layout as the prediction.
    pub grad: Vec<f64>,
    /// Responsible `(cell, slot)` for foreground samples.
    pub responsible: Option<(usize, usize)>,
}

/// Responsible slot of the owning cell: largest IoU with the ground truth,
/// ties to the lowest slot.
pub fn responsible_slot(pred: &[f64], enc: &GridEncoding) -> Option<(usize, usize)> {
    let cell = enc.dock_cell?;
    let gt = enc.gt_box?;
    let mut best = (0, f64::NEG_INFINITY);
    for b in 0..enc.grid.b {
        let v = iou(&enc.grid.slot_box(pred, cell, b), &gt);
        if v > best.1 {
            best = (b, v);
        }
    }
    Some((cell, best.0))
}

pub fn loss(pred: &[f64], enc: &GridEncoding, w: &LossWeights) -> Result<LossOutput, DetectorError> {
    let grid = enc.grid;
    if pred.len() != grid.len() {
        return Err(DetectorError::ShapeMismatch {
            expected: grid.len(),
            got: pred.len(),
        });
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::NonFiniteInput);
    }
    let t = &enc.target;
    let mut grad = vec![0.0; pred.len()];
    let responsible = responsible_slot(pred, enc);
    let (mut l_b, mut l_d, mut l_dbar) = (0.0, 0.0, 0.0);
    for cell in 0..grid.g * grid.g {
        for b in 0..grid.b {
            let i = grid.index(cell, b, 0);
            if responsible == Some((cell, b)) {
                for k in 0..2 {
                    let d = pred[i + k] - t[i + k];
                    l_b += d * d;
                    grad[i + k] += w.lambda_b * 2.0 * d;
                }
                for k in 2..4 {
                    let p = pred[i + k].max(SIZE_FLOOR);
                    let sp = p.sqrt();
                    let d = sp - t[i + k].sqrt();
                    l_b += d * d;
                    if pred[i + k] >= SIZE_FLOOR {
                        grad[i + k] += w.lambda_b * d / sp;
                    }
                }
                let d = pred[i + 4] - t[i + 4];
                l_d += d * d;
                grad[i + 4] += w.lambda_d * 2.0 * d;
            } else {
                let s = pred[i + FIELDS - 1];
                l_dbar += s * s;
                grad[i + 4] += w.lambda_dbar * 2.0 * s;
            }
        }
    }
    Ok(LossOutput {
        total: w.lambda_b * l_b + w.lambda_d * l_d + w.lambda_dbar * l_dbar,
        l_b,
        l_d,
        l_dbar,
        grad,
        responsible,
    })
}
