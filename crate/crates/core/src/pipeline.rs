//! Command implementations behind the CLI, plus the detect, crop, landmark
//! and pose chain used for end-to-end runs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project, CameraIntrinsics};
use crate::config::{BenchConfig, ConfigError, DeformOp, RunConfig};
use crate::deform::{
    apply_illumination, build_illumination_model, gamma_contrast, gaussian_blur, hsv_shift, make_mirror_sample,
    make_noisy_luminary_sample, DeformError, DistractorSpec,
};
use crate::detector::{
    detect, encode_target, image_to_input, train, write_loss_csv, Checkpoint, Decoded, DetectorError, EpochLog,
    TinyNet, TrainSample,
};
use crate::eval::{pose_errors, read_detections, roc_curve, write_detections, EvalError, RocSummary, ScoredDetection};
use crate::image::{ImageBuffer, ImageError};
use crate::landmarks::{estimate_pose, extract_landmarks, LandmarkError, LandmarkSet, Observation, ThresholdParams};
use crate::pnp::{rpnp_solve, Correspondence, PnpError, PnpInput, PnpOutput, PnpSolution};
use crate::pose::{Pose, PoseRecord};
use crate::scene::{
    generate_dataset, sample_pose, sample_rng, DatasetManifest, LandmarkLayout, SceneError, SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Landmarks(#[from] LandmarkError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad input: {0}")]
    Input(String),
}

impl PipelineError {
    /// Short machine-readable category for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigInvalid",
            PipelineError::Io { .. } => "IoFailure",
            PipelineError::Json { .. } => "JsonInvalid",
            PipelineError::Scene(_) => "Scene",
            PipelineError::Deform(_) => "Deform",
            PipelineError::Detector(_) => "Detector",
            PipelineError::Eval(_) => "Eval",
            PipelineError::Landmarks(_) => "Landmarks",
            PipelineError::Pnp(_) => "Pnp",
            PipelineError::Image(_) => "Image",
            PipelineError::Input(_) => "InputInvalid",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest, PipelineError> {
    Ok(generate_dataset(&cfg.dataset, out_dir)?)
}

/// Manifest plus the decoded stored images, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ImageBuffer>), PipelineError> {
    let manifest = DatasetManifest::read_jsonl(&dir.join("manifest.jsonl"))?;
    let images = manifest
        .samples
        .iter()
        .map(|r| ImageBuffer::load(&dir.join(&r.path)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, images))
}

/// Apply the configured deformation to every sample of `in_dir`. Samples the
/// operation cannot use (mirror without room, mirror on background) are copied
/// unchanged and marked as skipped.
pub fn cmd_deform(cfg: &RunConfig, in_dir: &Path, out_dir: &Path) -> Result<DatasetManifest, PipelineError> {
    let (mut manifest, images) = load_dataset(in_dir)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let model = match cfg.deform.op {
        DeformOp::Illumination { m, n } => Some(build_illumination_model(&images, m, n)?),
        _ => None,
    };
    for (i, (rec, img)) in manifest.samples.iter_mut().zip(&images).enumerate() {
        let seed: u64 = sample_rng(cfg.deform.seed, i as u64).random();
        let mut note = serde_json::json!({ "op": cfg.deform.op, "seed": seed });
        let out = match &cfg.deform.op {
            DeformOp::Blur { sigma } => gaussian_blur(img, *sigma)?,
            DeformOp::Hsv { channel, lambda } => hsv_shift(img, *channel, *lambda)?,
            DeformOp::Gamma { gamma } => gamma_contrast(img, *gamma)?,
            DeformOp::Illumination { .. } => apply_illumination(img, model.as_ref().expect("fitted above"), seed)?,
            DeformOp::Mirror => match rec.bbox.as_ref().map(|b| make_mirror_sample(img, b, seed)) {
                Some(Ok((out, _))) => out,
                Some(Err(DeformError::NoRoomAbove)) => {
                    note["skipped"] = "no room above the station".into();
                    img.clone()
                }
                Some(Err(e)) => return Err(e.into()),
                None => {
                    note["skipped"] = "background sample".into();
                    img.clone()
                }
            },
            DeformOp::NoisyLuminary { count, sigma_px, peak } => {
                let spec = DistractorSpec {
                    count: *count,
                    sigma_px: *sigma_px,
                    peak: *peak,
                };
                // a zero-area box never overlaps, so background samples place freely
                let gt = rec.bbox.unwrap_or(crate::bbox::BoundingBox::new(0.0, 0.0, 0.0, 0.0));
                make_noisy_luminary_sample(img, &gt, &spec, seed)?.0
            }
        };
        out.save(&out_dir.join(&rec.path))?;
        rec.hires_path = None;
        rec.deformation = Some(note);
    }
    manifest.write_jsonl(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub logs: Vec<EpochLog>,
}

pub fn training_samples(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    images: &[ImageBuffer],
) -> Result<Vec<TrainSample<f32>>, PipelineError> {
    manifest
        .samples
        .iter()
        .zip(images)
        .map(|(rec, img)| {
            Ok(TrainSample {
                input: image_to_input(img, &cfg.arch)?,
                encoding: encode_target(rec.bbox.as_ref(), cfg.arch.grid)?,
            })
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport, PipelineError> {
    let (manifest, images) = load_dataset(data_dir)?;
    let samples = training_samples(cfg, &manifest, &images)?;
    let mut net = TinyNet::<f32>::init(cfg.arch.clone(), cfg.train.seed)?;
    let logs = train(&mut net, &samples, &cfg.train, |l| {
        log::info!(
            "epoch {} loss {:.5} (box {:.5}, dock {:.5}, no-dock {:.5})",
            l.epoch,
            l.total,
            l.l_b,
            l.l_d,
            l.l_dbar
        )
    })?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let checkpoint = out_dir.join("checkpoint.json");
    let loss_csv = out_dir.join("loss.csv");
    Checkpoint::from_net(&net).save(&checkpoint)?;
    write_loss_csv(&loss_csv, &logs)?;
    Ok(TrainReport {
        checkpoint,
        loss_csv,
        logs,
    })
}

/// One detection per manifest sample, written as JSONL.
pub fn cmd_detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_path: &Path,
) -> Result<Vec<ScoredDetection>, PipelineError> {
    let net: TinyNet<f32> = Checkpoint::load(checkpoint)?.to_net()?;
    if net.arch() != &cfg.arch {
        log::warn!("checkpoint architecture differs from the config; using the checkpoint's");
    }
    let (manifest, images) = load_dataset(data_dir)?;
    let dets = manifest
        .samples
        .iter()
        .zip(&images)
        .map(|(rec, img)| {
            let d = detect(&net, img)?;
            Ok(ScoredDetection::new(rec.id.clone(), d.bbox, d.confidence, rec.bbox))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    write_detections(out_path, &dets)?;
    Ok(dets)
}

/// ROC CSV (`roc.csv`) and summary JSON (`summary.json`) in `out_dir`.
pub fn cmd_eval(cfg: &RunConfig, detections: &Path, out_dir: &Path) -> Result<RocSummary, PipelineError> {
    let dets = read_detections(detections)?;
    let roc = roc_curve(&dets, cfg.eval.iou_threshold)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    roc.write_csv(&out_dir.join("roc.csv"))?;
    let summary = roc.summary();
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub observation: Observation,
    pub centroids: Vec<[f64; 2]>,
    pub schema_version: u32,
}

pub fn cmd_landmarks(cfg: &RunConfig, image: &Path) -> Result<LandmarkReport, PipelineError> {
    let img = ImageBuffer::load(image)?;
    let set = extract_landmarks(&img, &cfg.landmarks, cfg.dataset.layout.count)?;
    Ok(LandmarkReport {
        observation: set.observation,
        centroids: set.centroids.iter().map(|p| [p.x, p.y]).collect(),
        schema_version: SCHEMA_VERSION,
    })
}

/// Input for `cmd_pose` when centroids are already known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidFile {
    pub centroids: Vec<[f64; 2]>,
    /// Defaults to the dataset intrinsics.
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub pose: PoseRecord,
    /// Yaw, pitch, roll.
    pub euler_deg: [f64; 3],
    pub reprojection_rmse: f64,
    /// Centroids in layout order.
    pub centroids: Vec<[f64; 2]>,
    pub schema_version: u32,
}

impl PoseReport {
    fn new(sol: &PnpSolution, ordering: &[Point2<f64>]) -> Result<Self, PipelineError> {
        let (y, p, r) = sol.pose.euler_deg().map_err(|e| PipelineError::Input(e.to_string()))?;
        Ok(Self {
            pose: sol.pose.to_record(),
            euler_deg: [y, p, r],
            reprojection_rmse: sol.reprojection_rmse,
            centroids: ordering.iter().map(|q| [q.x, q.y]).collect(),
            schema_version: SCHEMA_VERSION,
        })
    }
}

/// Solve the pose for an explicit correspondence file.
pub fn cmd_pnp(input: &Path) -> Result<PnpOutput, PipelineError> {
    let file: PnpInput = read_json(input)?;
    file.intrinsics
        .validate()
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    let sol = rpnp_solve(&file.points, &file.intrinsics)?;
    Ok(PnpOutput::from_solution(&sol)?)
}

/// Intrinsics matching an image's size: the stored resolution or the
/// supersampled render resolution of the configured dataset.
pub fn intrinsics_for(cfg: &RunConfig, width: usize, height: usize) -> Result<CameraIntrinsics, PipelineError> {
    [cfg.dataset.intrinsics, cfg.dataset.render_intrinsics()]
        .into_iter()
        .find(|k| k.image_width == width && k.image_height == height)
        .ok_or_else(|| PipelineError::Input(format!("no configured camera produces {width}x{height} images")))
}

/// Pose from an image (whole frame treated as the station patch) or from a
/// JSON centroid file.
pub fn cmd_pose(cfg: &RunConfig, input: &Path) -> Result<PoseReport, PipelineError> {
    let layout = &cfg.dataset.layout;
    let is_json = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let (set, intr) = if is_json {
        let file: CentroidFile = read_json(input)?;
        let intr = file.intrinsics.unwrap_or(cfg.dataset.intrinsics);
        let centroids: Vec<Point2<f64>> = file.centroids.iter().map(|c| Point2::new(c[0], c[1])).collect();
        let observation = if centroids.len() == layout.count {
            Observation::Full
        } else {
            Observation::Partial
        };
        (LandmarkSet { centroids, observation }, intr)
    } else {
        let img = ImageBuffer::load(input)?;
        let intr = intrinsics_for(cfg, img.width(), img.height())?;
        (extract_landmarks(&img, &cfg.landmarks, layout.count)?, intr)
    };
    let (sol, ordering) = estimate_pose(&set, layout, &intr)?;
    PoseReport::new(&sol, &ordering)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sigma_px: f64,
    pub trials: usize,
    pub failures: usize,
    pub mean_orientation_deg: f64,
    pub median_orientation_deg: f64,
    pub mean_position_mm: f64,
    pub median_position_mm: f64,
    pub mean_yaw_deg: f64,
    pub mean_pitch_deg: f64,
    pub mean_roll_deg: f64,
}

/// Known-correspondence solves on noisy projections of the default layout.
/// Trial `t` at noise level `k` draws from stream `k * trials + t`.
pub fn bench_pnp(bench: &BenchConfig, layout: &LandmarkLayout) -> Result<Vec<BenchRow>, PipelineError> {
    let world = layout.points();
    let mut rows = Vec::new();
    for (k, &sigma) in bench.noise_sigmas_px.iter().enumerate() {
        let mut pairs = Vec::with_capacity(bench.trials);
        let mut failures = 0;
        for t in 0..bench.trials {
            let mut rng = sample_rng(bench.seed, (k * bench.trials + t) as u64);
            let truth = sample_pose(&bench.poses, layout, &bench.intrinsics, &mut rng)?;
            let noise = Normal::new(0.0, sigma).map_err(|e| PipelineError::Input(e.to_string()))?;
            let corr = world
                .iter()
                .map(|p| {
                    let uv = project(p, &bench.intrinsics, &truth).map_err(|e| PipelineError::Input(e.to_string()))?;
                    let jitter = Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    Ok(Correspondence::new(*p, uv + jitter))
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            match rpnp_solve(&corr, &bench.intrinsics) {
                Ok(sol) => pairs.push((sol.pose, truth)),
                Err(_) => failures += 1,
            }
        }
        let stats = pose_errors(&pairs)?;
        rows.push(BenchRow {
            sigma_px: sigma,
            trials: bench.trials,
            failures,
            mean_orientation_deg: stats.mean_orientation_deg,
            median_orientation_deg: stats.median_orientation_deg,
            mean_position_mm: stats.mean_position_mm,
            median_position_mm: stats.median_position_mm,
            mean_yaw_deg: stats.mean_euler_abs_deg[0],
            mean_pitch_deg: stats.mean_euler_abs_deg[1],
            mean_roll_deg: stats.mean_euler_abs_deg[2],
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<(), PipelineError> {
    let mut out = String::from(
        "sigma_px,trials,failures,mean_orientation_deg,median_orientation_deg,mean_position_mm,median_position_mm,mean_yaw_deg,mean_pitch_deg,mean_roll_deg\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.sigma_px,
            r.trials,
            r.failures,
            r.mean_orientation_deg,
            r.median_orientation_deg,
            r.mean_position_mm,
            r.median_position_mm,
            r.mean_yaw_deg,
            r.mean_pitch_deg,
            r.mean_roll_deg
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn cmd_bench_pnp(cfg: &RunConfig, out_csv: &Path) -> Result<Vec<BenchRow>, PipelineError> {
    let rows = bench_pnp(&cfg.bench, &cfg.dataset.layout)?;
    write_bench_csv(out_csv, &rows)?;
    Ok(rows)
}

/// Crop margins tried in turn, as a fraction of the detected box's larger
/// side added on every side.
pub const CROP_MARGINS: [f64; 3] = [0.25, 0.75, 1.5];

/// Landmarks closer than this fraction of the crop side to a cut edge count
/// as clipped.
pub const CROP_CLEARANCE: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct LocatedPose {
    pub detection: Decoded,
    /// Crop rectangle `(x, y, w, h)` in high-resolution pixels.
    pub crop: (usize, usize, usize, usize),
    /// Landmarks in full high-resolution image coordinates.
    pub landmarks: LandmarkSet,
    pub solution: PnpSolution,
    pub ordering: Vec<Point2<f64>>,
}

/// Square crop centered on `bbox`, clamped to the image.
fn square_crop(
    bbox: &crate::bbox::BoundingBox,
    margin: f64,
    width: usize,
    height: usize,
) -> (usize, usize, usize, usize) {
    let (bx, by, bw, bh) = bbox.to_pixels(width, height);
    let (cx, cy) = (bx + bw / 2.0, by + bh / 2.0);
    let half = bw.max(bh).max(1.0) * (0.5 + margin);
    let (w, h) = (width as f64, height as f64);
    let x0 = (cx - half).floor().clamp(0.0, w - 1.0);
    let y0 = (cy - half).floor().clamp(0.0, h - 1.0);
    let x1 = (cx + half).ceil().clamp(x0 + 1.0, w);
    let y1 = (cy + half).ceil().clamp(y0 + 1.0, h);
    (x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize)
}

/// True when every centroid keeps clear of crop edges that cut the image.
fn clear_of_cut_edges(set: &LandmarkSet, crop: (usize, usize, usize, usize), width: usize, height: usize) -> bool {
    let (x0, y0, w, h) = crop;
    let pad = CROP_CLEARANCE * w.max(h) as f64;
    let (left, top) = (x0 as f64, y0 as f64);
    let (right, bottom) = ((x0 + w) as f64, (y0 + h) as f64);
    set.centroids.iter().all(|c| {
        (x0 == 0 || c.x - left >= pad)
            && (y0 == 0 || c.y - top >= pad)
            && (x0 + w == width || right - c.x >= pad)
            && (y0 + h == height || bottom - c.y >= pad)
    })
}

/// Detect on the network-sized image, crop the matching region of the
/// high-resolution frame, extract landmarks there and solve for the pose.
///
/// The crop is square around the detected center and grows through
/// [`CROP_MARGINS`] until a full ring is found clear of every cut edge; the
/// last attempt is used as is.
pub fn locate_and_estimate(
    net: &TinyNet<f32>,
    low: &ImageBuffer,
    hires: &ImageBuffer,
    hires_intr: &CameraIntrinsics,
    layout: &LandmarkLayout,
    params: &ThresholdParams,
) -> Result<LocatedPose, PipelineError> {
    let detection = detect(net, low)?;
    let (w, h) = (hires.width(), hires.height());
    let mut attempt = None;
    for (k, margin) in CROP_MARGINS.iter().enumerate() {
        let crop = square_crop(&detection.bbox, *margin, w, h);
        let patch = hires.crop(crop.0, crop.1, crop.2, crop.3)?;
        let mut landmarks = extract_landmarks(&patch, params, layout.count)?;
        for c in &mut landmarks.centroids {
            c.x += crop.0 as f64;
            c.y += crop.1 as f64;
        }
        let done = landmarks.observation == Observation::Full && clear_of_cut_edges(&landmarks, crop, w, h);
        attempt = Some((crop, landmarks));
        if done || k + 1 == CROP_MARGINS.len() {
            break;
        }
    }
    let (crop, landmarks) = attempt.expect("at least one margin");
    let (solution, ordering) = estimate_pose(&landmarks, layout, hires_intr)?;
    Ok(LocatedPose {
        detection,
        crop,
        landmarks,
        solution,
        ordering,
    })
}

/// Pose error of an end-to-end estimate against the ground truth.
pub fn e2e_error(est: &Pose, truth: &Pose) -> (f64, f64) {
    let e = crate::eval::pose_trial_error(est, truth);
    (e.position_mm, e.orientation_deg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_without_noise_is_exact() {
        let bench = BenchConfig {
            noise_sigmas_px: vec![0.0],
            trials: 20,
            ..BenchConfig::default()
        };
        let rows = bench_pnp(&bench, &LandmarkLayout::default()).unwrap();
        assert_eq!(rows[0].failures, 0);
        assert!(rows[0].mean_orientation_deg < 1e-6);
        assert!(rows[0].mean_position_mm < 1e-3);
    }

    #[test]
    fn square_crop_uses_larger_side() {
        let b = crate::bbox::BoundingBox::new(0.25, 0.4, 0.5, 0.25);
        assert_eq!(square_crop(&b, 0.25, 400, 400), (50, 60, 300, 300));
        // clamped at the image border
        assert_eq!(square_crop(&b, 1.5, 400, 400), (0, 0, 400, 400));
    }

    #[test]
    fn clipped_landmarks_detected_only_at_cut_edges() {
        let set = |x: f64| LandmarkSet {
            centroids: vec![Point2::new(x, 50.0)],
            observation: Observation::Full,
        };
        assert!(clear_of_cut_edges(&set(50.0), (10, 10, 100, 100), 400, 400));
        assert!(!clear_of_cut_edges(&set(12.0), (10, 10, 100, 100), 400, 400));
        // an edge shared with the image is not a cut
        assert!(clear_of_cut_edges(&set(1.0), (0, 10, 100, 100), 400, 400));
    }

    #[test]
    fn intrinsics_chosen_by_size() {
        let mut cfg = RunConfig::default();
        cfg.dataset.supersample = 4;
        assert_eq!(intrinsics_for(&cfg, 112, 112).unwrap().k_x, 160.0);
        assert_eq!(intrinsics_for(&cfg, 448, 448).unwrap().k_x, 640.0);
        assert!(intrinsics_for(&cfg, 100, 100).is_err());
    }
}
