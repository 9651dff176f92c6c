//! Scoring: IoU-thresholded labels, ROC sweeps with trapezoidal AUC, and
//! pose error statistics.
//!
//! Each scored sample contributes exactly one unit. A sample belongs to the
//! positive class when it is foreground and its predicted box reaches the
//! IoU threshold; every other sample (background, or foreground with a
//! misplaced box) is a negative. At threshold `t` a sample fires when its
//! confidence is `>= t`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BoundingBox};
use crate::pose::{rotation_angle_deg, Pose};
use crate::scene::SCHEMA_VERSION;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs both classes, got {n_pos} positives and {n_neg} negatives")]
    DegenerateLabels { n_pos: usize, n_neg: usize },
    #[error("sample {0} has a non-finite confidence")]
    NonFiniteScore(String),
    #[error("no pose trials")]
    EmptyTrials,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed detections line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionLabel {
    PositiveCorrect,
    PositiveWrong,
    Negative,
}

pub fn label_detection(pred: &BoundingBox, gt: Option<&BoundingBox>, iou_threshold: f64) -> DetectionLabel {
    match gt {
        None => DetectionLabel::Negative,
        Some(g) if iou(pred, g) >= iou_threshold => DetectionLabel::PositiveCorrect,
        Some(_) => DetectionLabel::PositiveWrong,
    }
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredDetection {
    pub id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub gt: Option<BoundingBox>,
    pub schema_version: u32,
}

impl ScoredDetection {
    pub fn new(id: impl Into<String>, bbox: BoundingBox, confidence: f64, gt: Option<BoundingBox>) -> Self {
        Self {
            id: id.into(),
            bbox,
            confidence,
            gt,
            schema_version: SCHEMA_VERSION,
        }
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<ScoredDetection>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| EvalError::Json { line: i + 1, source }))
        .collect()
}

pub fn write_detections(path: &Path, dets: &[ScoredDetection]) -> Result<(), EvalError> {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detections serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From threshold `+inf` (nothing fires) down to `-inf` (everything fires).
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub schema_version: u32,
}

impl RocCurve {
    pub fn summary(&self) -> RocSummary {
        RocSummary {
            auc: self.auc,
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("threshold,TP,FP,TN,FN,TPR,FPR\n");
        for p in &self.points {
            let c = p.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.threshold, c.tp, c.fp, c.tn, c.fn_, p.tpr, p.fpr
            ));
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

pub fn roc_curve(dets: &[ScoredDetection], iou_threshold: f64) -> Result<RocCurve, EvalError> {
    let mut scores = Vec::with_capacity(dets.len());
    for d in dets {
        if !d.confidence.is_finite() {
            return Err(EvalError::NonFiniteScore(d.id.clone()));
        }
        let positive = label_detection(&d.bbox, d.gt.as_ref(), iou_threshold) == DetectionLabel::PositiveCorrect;
        scores.push((d.confidence, positive));
    }
    roc_from_scores(&scores)
}

/// ROC over `(confidence, is_positive)` pairs. Tied confidences enter the
/// curve together, so ties contribute a diagonal segment.
pub fn roc_from_scores(scores: &[(f64, bool)]) -> Result<RocCurve, EvalError> {
    if let Some(i) = scores.iter().position(|s| !s.0.is_finite()) {
        return Err(EvalError::NonFiniteScore(i.to_string()));
    }
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels { n_pos, n_neg });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let point = |threshold: f64, tp: usize, fp: usize| {
        let counts = ConfusionCounts {
            tp,
            fp,
            tn: n_neg - fp,
            fn_: n_pos - tp,
        };
        RocPoint {
            threshold,
            counts,
            tpr: counts.tpr(),
            fpr: counts.fpr(),
        }
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(t, tp, fp));
    }
    points.push(point(f64::NEG_INFINITY, tp, fp));
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve {
        points,
        auc,
        n_pos,
        n_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTrialError {
    pub orientation_deg: f64,
    pub position_mm: f64,
    /// Absolute yaw, pitch, roll differences, wrapped to `[0, 180]`.
    pub euler_abs_deg: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorStats {
    pub mean_orientation_deg: f64,
    pub median_orientation_deg: f64,
    pub mean_position_mm: f64,
    pub median_position_mm: f64,
    pub mean_euler_abs_deg: [f64; 3],
    pub trials: Vec<PoseTrialError>,
}

fn wrap_deg(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    w.abs()
}

pub fn pose_trial_error(est: &Pose, truth: &Pose) -> PoseTrialError {
    let euler_abs_deg = match (est.euler_deg(), truth.euler_deg()) {
        (Ok(a), Ok(b)) => [wrap_deg(a.0 - b.0), wrap_deg(a.1 - b.1), wrap_deg(a.2 - b.2)],
        _ => [f64::NAN; 3],
    };
    PoseTrialError {
        orientation_deg: rotation_angle_deg(est.rotation(), truth.rotation()),
        position_mm: (est.translation() - truth.translation()).norm(),
        euler_abs_deg,
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregate `(estimate, truth)` pairs.
pub fn pose_errors(trials: &[(Pose, Pose)]) -> Result<PoseErrorStats, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::EmptyTrials);
    }
    let errs: Vec<PoseTrialError> = trials.iter().map(|(e, t)| pose_trial_error(e, t)).collect();
    let n = errs.len() as f64;
    let mut rot: Vec<f64> = errs.iter().map(|e| e.orientation_deg).collect();
    let mut pos: Vec<f64> = errs.iter().map(|e| e.position_mm).collect();
    let mut mean_euler_abs_deg = [0.0; 3];
    for e in &errs {
        for k in 0..3 {
            mean_euler_abs_deg[k] += e.euler_abs_deg[k] / n;
        }
    }
    Ok(PoseErrorStats {
        mean_orientation_deg: rot.iter().sum::<f64>() / n,
        median_orientation_deg: median(&mut rot),
        mean_position_mm: pos.iter().sum::<f64>() / n,
        median_position_mm: median(&mut pos),
        mean_euler_abs_deg,
        trials: errs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mann_whitney(scores: &[(f64, bool)]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in scores.iter().filter(|s| s.1) {
            for n in scores.iter().filter(|s| !s.1) {
                pairs += 1.0;
                if p.0 > n.0 {
                    wins += 1.0;
                } else if p.0 == n.0 {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn labels_follow_iou_threshold() {
        let gt = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let hit = BoundingBox::new(0.0, 0.0, 0.51, 1.0);
        let miss = BoundingBox::new(0.0, 0.0, 0.49, 1.0);
        assert_eq!(label_detection(&hit, Some(&gt), 0.5), DetectionLabel::PositiveCorrect);
        assert_eq!(label_detection(&miss, Some(&gt), 0.5), DetectionLabel::PositiveWrong);
        assert_eq!(label_detection(&hit, None, 0.5), DetectionLabel::Negative);
    }

    #[test]
    fn perfect_and_inverted_scorers() {
        let s: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, i >= 5)).collect();
        assert_eq!(roc_from_scores(&s).unwrap().auc, 1.0);
        let inv: Vec<(f64, bool)> = s.iter().map(|(v, l)| (-v, *l)).collect();
        assert_eq!(roc_from_scores(&inv).unwrap().auc, 0.0);
    }

    #[test]
    fn all_tied_scores_give_half() {
        let s = vec![(0.3, true), (0.3, false), (0.3, true), (0.3, false)];
        let roc = roc_from_scores(&s).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points.len(), 3);
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert!(matches!(
            roc_from_scores(&[(0.1, true), (0.2, true)]),
            Err(EvalError::DegenerateLabels { n_pos: 2, n_neg: 0 })
        ));
    }

    #[test]
    fn wrong_box_counts_as_negative() {
        let gt = BoundingBox::new(0.1, 0.1, 0.2, 0.2);
        let far = BoundingBox::new(0.6, 0.6, 0.2, 0.2);
        let dets = vec![
            ScoredDetection::new("a", gt, 0.9, Some(gt)),
            ScoredDetection::new("b", far, 0.8, Some(gt)),
            ScoredDetection::new("c", far, 0.1, None),
        ];
        let roc = roc_curve(&dets, IOU_THRESHOLD).unwrap();
        assert_eq!((roc.n_pos, roc.n_neg), (1, 2));
        assert_eq!(roc.auc, 1.0);
    }

    #[test]
    fn random_scorer_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<(f64, bool)> = (0..5000).map(|i| (rng.random::<f64>(), i % 2 == 0)).collect();
        assert!((roc_from_scores(&s).unwrap().auc - 0.5).abs() < 0.03);
    }

    #[test]
    fn csv_has_header_and_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let roc = roc_from_scores(&[(0.2, false), (0.7, true)]).unwrap();
        let path = dir.path().join("roc.csv");
        roc.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,TP,FP,TN,FN,TPR,FPR");
        assert!(lines[1].starts_with("inf,0,0,1,1,0,0"));
        assert!(lines.last().unwrap().starts_with("-inf,1,1,0,0,1,1"));
    }

    #[test]
    fn detections_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let b = BoundingBox::new(0.1, 0.2, 0.3, 0.4);
        let dets = vec![
            ScoredDetection::new("x", b, 0.5, None),
            ScoredDetection::new("y", b, 0.25, Some(b)),
        ];
        write_detections(&path, &dets).unwrap();
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    #[test]
    fn pose_error_examples() {
        let t = Pose::from_euler_deg(10.0, 5.0, -3.0, Vector3::new(0.0, 0.0, 3000.0)).unwrap();
        let s = pose_errors(&[(t, t)]).unwrap();
        assert_eq!((s.mean_orientation_deg, s.mean_position_mm), (0.0, 0.0));
        let moved = Pose::new(*t.rotation(), t.translation() + Vector3::new(3.0, 4.0, 0.0)).unwrap();
        assert!((pose_errors(&[(moved, t)]).unwrap().mean_position_mm - 5.0).abs() < 1e-12);
        let yawed = Pose::new(
            crate::pose::rotation_from_euler(2.0, 0.0, 0.0) * t.rotation(),
            *t.translation(),
        )
        .unwrap();
        let s = pose_errors(&[(yawed, t)]).unwrap();
        assert!((s.mean_orientation_deg - 2.0).abs() < 1e-9);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(matches!(pose_errors(&[]), Err(EvalError::EmptyTrials)));
    }

    proptest! {
        #[test]
        fn auc_matches_mann_whitney(seed in 0u64..1000, n in 2usize..200, levels in 1u32..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s: Vec<(f64, bool)> = (0..n).map(|_| ((rng.random_range(0..levels)) as f64, rng.random_bool(0.5))).collect();
            s[0].1 = true;
            s[1].1 = false;
            let roc = roc_from_scores(&s).unwrap();
            prop_assert!((roc.auc - mann_whitney(&s)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&roc.auc));
            let first = roc.points.first().unwrap();
            let last = roc.points.last().unwrap();
            prop_assert_eq!((first.tpr, first.fpr), (0.0, 0.0));
            prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
            }
            for p in &roc.points {
                prop_assert_eq!(p.counts.total(), n);
                prop_assert_eq!(p.counts.tp + p.counts.fn_, roc.n_pos);
                prop_assert_eq!(p.counts.fp + p.counts.tn, roc.n_neg);
            }
        }
    }
}
