//! Synthetic docking-station imagery with exact pose and box ground truth.
//!
//! The station is a ring of lights on the `z_r = 0` plane of its reference
//! frame. Each visible light is drawn as an isotropic Gaussian centered on
//! its exact projection, over a flat background with additive noise.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::camera::{CameraError, CameraIntrinsics};
use crate::image::{ImageBuffer, ImageError};
use crate::pose::{Pose, PoseError, PoseRecord};

pub const SCHEMA_VERSION: u32 = 1;
const MAX_POSE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no landmark projects into the image")]
    NoLandmarkVisible,
    #[error("only {visible} of {total} landmarks are visible and partial observation is not allowed")]
    NotFullyVisible { visible: usize, total: usize },
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
    #[error("could not sample a fully visible pose in {0} attempts")]
    PoseSampling(usize),
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lights evenly spaced on a circle around the reference origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandmarkLayout {
    pub count: usize,
    pub radius_mm: f64,
}

impl Default for LandmarkLayout {
    fn default() -> Self {
        Self {
            count: 8,
            radius_mm: 600.0,
        }
    }
}

impl LandmarkLayout {
    /// `P_k = (r cos(2 pi k / n), r sin(2 pi k / n), 0)`.
    pub fn points(&self) -> Vec<Point3<f64>> {
        (0..self.count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.count as f64;
                Point3::new(self.radius_mm * a.cos(), self.radius_mm * a.sin(), 0.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    pub blob_sigma_px: f64,
    pub blob_peak: f64,
    pub background_level: f64,
    pub background_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            blob_sigma_px: 1.5,
            blob_peak: 0.9,
            background_level: 0.15,
            background_noise_sigma: 0.03,
            rng_seed: 7,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.blob_peak > 0.0 && self.blob_peak <= 1.0) {
            return Err(SceneError::InvalidSpec(format!(
                "blob_peak {} outside (0, 1]",
                self.blob_peak
            )));
        }
        if !(self.blob_sigma_px > 0.0) || !(self.background_noise_sigma >= 0.0) {
            return Err(SceneError::InvalidSpec("sigmas must be positive".into()));
        }
        if !(self.background_level >= 0.0)
            || self.background_level + 3.0 * self.background_noise_sigma >= self.blob_peak
        {
            return Err(SceneError::InvalidSpec(
                "lights must be brighter than background + 3 noise sigma".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub pose: Pose,
    /// Projections of the visible landmarks, in layout order.
    pub centroids: Vec<Point2<f64>>,
    /// Layout index of each entry in `centroids`.
    pub visible: Vec<usize>,
    pub partial: bool,
}

/// Per-render switches beyond the appearance spec.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderOptions {
    pub allow_partial: bool,
    /// Layout indices to leave undrawn, as if blocked from view.
    pub occluded: Vec<usize>,
}

pub fn render_scene(
    layout: &LandmarkLayout,
    intr: &CameraIntrinsics,
    pose: &Pose,
    spec: &RenderSpec,
) -> Result<(ImageBuffer, GroundTruth), SceneError> {
    render_scene_with(layout, intr, pose, spec, &RenderOptions::default())
}

pub fn render_scene_with(
    layout: &LandmarkLayout,
    intr: &CameraIntrinsics,
    pose: &Pose,
    spec: &RenderSpec,
    opts: &RenderOptions,
) -> Result<(ImageBuffer, GroundTruth), SceneError> {
    spec.validate()?;
    intr.validate()?;
    let mut drawn = Vec::new();
    let mut visible = Vec::new();
    let mut centroids = Vec::new();
    for (k, p) in layout.points().iter().enumerate() {
        let Ok(uv) = crate::camera::project(p, intr, pose) else {
            continue;
        };
        if opts.occluded.contains(&k) {
            continue;
        }
        drawn.push(uv);
        if intr.contains(&uv) {
            visible.push(k);
            centroids.push(uv);
        }
    }
    if visible.is_empty() {
        return Err(SceneError::NoLandmarkVisible);
    }
    let partial = visible.len() < layout.count;
    if partial && !opts.allow_partial {
        return Err(SceneError::NotFullyVisible {
            visible: visible.len(),
            total: layout.count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut img = background(intr.image_width, intr.image_height, spec, &mut rng);
    for uv in &drawn {
        add_blob(&mut img, uv, spec.blob_sigma_px, spec.blob_peak);
    }
    img.clamp_unit();
    let bbox = padded_box(&centroids, 2.0 * spec.blob_sigma_px, intr);
    Ok((
        img,
        GroundTruth {
            bbox,
            pose: *pose,
            centroids,
            visible,
            partial,
        },
    ))
}

fn background(w: usize, h: usize, spec: &RenderSpec, rng: &mut ChaCha8Rng) -> ImageBuffer {
    if spec.background_noise_sigma == 0.0 {
        return ImageBuffer::filled(w, h, 1, spec.background_level).expect("valid intrinsics");
    }
    let noise = Normal::new(0.0, spec.background_noise_sigma).expect("validated sigma");
    ImageBuffer::from_fn(w, h, 1, |_, _, _| spec.background_level + noise.sample(rng)).expect("valid intrinsics")
}

/// Add `peak * exp(-d^2 / 2 sigma^2)` within `4 sigma` of `c` to every channel.
pub fn add_blob(img: &mut ImageBuffer, c: &Point2<f64>, sigma: f64, peak: f64) {
    let r = (4.0 * sigma).ceil();
    let x0 = (c.x - r).floor().max(0.0) as usize;
    let y0 = (c.y - r).floor().max(0.0) as usize;
    let x1 = ((c.x + r).ceil()).min(img.width() as f64 - 1.0);
    let y1 = ((c.y + r).ceil()).min(img.height() as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
            let v = peak * (-(dx * dx + dy * dy) * inv).exp();
            for ch in 0..img.channels() {
                let i = img.index(x, y, ch);
                img.data_mut()[i] += v;
            }
        }
    }
}

/// Bounds of pixel-center points padded by `pad` px, normalized and clipped.
fn padded_box(points: &[Point2<f64>], pad: f64, intr: &CameraIntrinsics) -> BoundingBox {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    // pixel centers to edge coordinates
    let (ex0, ey0) = (x0 - pad + 0.5, y0 - pad + 0.5);
    let (ex1, ey1) = (x1 + pad + 0.5, y1 + pad + 0.5);
    BoundingBox::from_pixels(ex0, ey0, ex1 - ex0, ey1 - ey0, intr.image_width, intr.image_height).clipped()
}

/// Uniform ranges for sampled station poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRange {
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    pub min_distance_mm: f64,
    pub max_distance_mm: f64,
    /// Required clearance of every projected light from the image border.
    pub margin_px: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            max_yaw_deg: 40.0,
            max_pitch_deg: 40.0,
            max_roll_deg: 40.0,
            min_distance_mm: 3000.0,
            max_distance_mm: 15000.0,
            margin_px: 4.0,
        }
    }
}

impl PoseRange {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.min_distance_mm > 0.0
            && self.max_distance_mm >= self.min_distance_mm
            && [self.max_yaw_deg, self.max_pitch_deg, self.max_roll_deg]
                .iter()
                .all(|a| (0.0..89.0).contains(a))
            && self.margin_px >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidSpec(format!("bad pose range {self:?}")))
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

/// Draw Euler angles and distance uniformly, aim the station center at a
/// uniformly drawn pixel, and reject until every light clears the margin.
pub fn sample_pose(
    range: &PoseRange,
    layout: &LandmarkLayout,
    intr: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<Pose, SceneError> {
    range.validate()?;
    let pts = layout.points();
    let (w, h) = (intr.image_width as f64, intr.image_height as f64);
    for _ in 0..MAX_POSE_ATTEMPTS {
        let yaw = symmetric(rng, range.max_yaw_deg);
        let pitch = symmetric(rng, range.max_pitch_deg);
        let roll = symmetric(rng, range.max_roll_deg);
        let d = rng.random_range(range.min_distance_mm..=range.max_distance_mm);
        let u = rng.random_range(0.0..w - 1.0);
        let v = rng.random_range(0.0..h - 1.0);
        let t: Vector3<f64> = intr.ray(&Point2::new(u, v)) * d;
        let pose = Pose::from_euler_deg(yaw, pitch, roll, t)?;
        let inside = pts.iter().all(|p| {
            crate::camera::project(p, intr, &pose).is_ok_and(|uv| {
                uv.x >= range.margin_px
                    && uv.y >= range.margin_px
                    && uv.x <= w - 1.0 - range.margin_px
                    && uv.y <= h - 1.0 - range.margin_px
            })
        });
        if inside {
            return Ok(pose);
        }
    }
    Err(SceneError::PoseSampling(MAX_POSE_ATTEMPTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Foreground,
    Background,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default)]
    pub centroids: Vec<[f64; 2]>,
    #[serde(default)]
    pub partial: bool,
    /// Full-resolution render when the stored image was downsampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hires_path: Option<String>,
    /// Deformation applied to derive this sample, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deformation: Option<serde_json::Value>,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SceneError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for s in &self.samples {
            let line = serde_json::to_string(s).expect("records serialize");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SceneError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line).map_err(|source| SceneError::Manifest { line: i + 1, source })?);
        }
        Ok(Self { samples })
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_fg: usize,
    pub n_bg: usize,
    pub seed: u64,
    pub layout: LandmarkLayout,
    /// Intrinsics of the stored (possibly downsampled) images.
    pub intrinsics: CameraIntrinsics,
    pub render: RenderSpec,
    pub poses: PoseRange,
    /// Render at this integer multiple of the stored resolution, then box-filter down.
    pub supersample: usize,
    /// Keep the full-resolution render next to the stored image.
    pub keep_hires: bool,
    /// Fraction of background samples that receive distractor lights.
    pub distractor_fraction: f64,
    pub max_distractors: usize,
    /// Image file extension: png, pgm or ppm.
    pub format: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_fg: 50,
            n_bg: 50,
            seed: 1,
            layout: LandmarkLayout::default(),
            intrinsics: CameraIntrinsics::centered(160.0, 112, 112),
            render: RenderSpec::default(),
            poses: PoseRange::default(),
            supersample: 4,
            keep_hires: false,
            distractor_fraction: 0.5,
            max_distractors: 6,
            format: "png".into(),
        }
    }
}

impl DatasetSpec {
    /// Intrinsics of the full-resolution render.
    pub fn render_intrinsics(&self) -> CameraIntrinsics {
        scale_intrinsics(&self.intrinsics, self.supersample.max(1))
    }
}

/// Intrinsics of a camera with `s` times the resolution, sharing the same
/// pixel-footprint geometry (a box-filtered downsample maps it back).
pub fn scale_intrinsics(intr: &CameraIntrinsics, s: usize) -> CameraIntrinsics {
    let f = s as f64;
    CameraIntrinsics {
        k_x: intr.k_x * f,
        k_y: intr.k_y * f,
        k_theta: intr.k_theta * f,
        u_0: (intr.u_0 + 0.5) * f - 0.5,
        v_0: (intr.v_0 + 0.5) * f - 0.5,
        image_width: intr.image_width * s,
        image_height: intr.image_height * s,
    }
}

/// A rendered sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    pub image: ImageBuffer,
    pub hires: Option<ImageBuffer>,
}

/// Deterministic generator for sample `index` of a dataset.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Render sample `index` (foreground first, then background).
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<GeneratedSample, SceneError> {
    let s = spec.supersample.max(1);
    let hi_intr = spec.render_intrinsics();
    let mut rng = sample_rng(spec.seed, index as u64);
    let mut render = spec.render.clone();
    render.rng_seed = rng.random();
    render.blob_sigma_px *= s as f64;
    let foreground = index < spec.n_fg;
    let id = format!("{:06}", index);
    let (hires, mut record) = if foreground {
        let pose = sample_pose(&spec.poses, &spec.layout, &hi_intr, &mut rng)?;
        let (img, gt) = render_scene(&spec.layout, &hi_intr, &pose, &render)?;
        let scale = |p: &Point2<f64>| [(p.x + 0.5) / s as f64 - 0.5, (p.y + 0.5) / s as f64 - 0.5];
        let record = SampleRecord {
            id: id.clone(),
            path: String::new(),
            label: Label::Foreground,
            bbox: Some(gt.bbox),
            pose: Some(pose.to_record()),
            centroids: gt.centroids.iter().map(scale).collect(),
            partial: gt.partial,
            hires_path: None,
            deformation: None,
            schema_version: SCHEMA_VERSION,
        };
        (img, record)
    } else {
        render.validate()?;
        let mut img = background(hi_intr.image_width, hi_intr.image_height, &render, &mut rng);
        if spec.max_distractors > 0 && rng.random_bool(spec.distractor_fraction.clamp(0.0, 1.0)) {
            let n = rng.random_range(1..=spec.max_distractors);
            for _ in 0..n {
                let c = Point2::new(
                    rng.random_range(0.0..hi_intr.image_width as f64 - 1.0),
                    rng.random_range(0.0..hi_intr.image_height as f64 - 1.0),
                );
                add_blob(&mut img, &c, render.blob_sigma_px, render.blob_peak);
            }
            img.clamp_unit();
        }
        let record = SampleRecord {
            id: id.clone(),
            path: String::new(),
            label: Label::Background,
            bbox: None,
            pose: None,
            centroids: Vec::new(),
            partial: false,
            hires_path: None,
            deformation: None,
            schema_version: SCHEMA_VERSION,
        };
        (img, record)
    };
    let ext = &spec.format;
    record.path = format!("{id}.{ext}");
    let (image, hires) = if s > 1 {
        let low = hires.downsample(s)?;
        if spec.keep_hires {
            record.hires_path = Some(format!("{id}_hires.{ext}"));
            (low, Some(hires))
        } else {
            (low, None)
        }
    } else {
        (hires, None)
    };
    Ok(GeneratedSample { record, image, hires })
}

/// Render every sample, write images plus `manifest.jsonl` into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest, SceneError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = DatasetManifest::default();
    for index in 0..spec.n_fg + spec.n_bg {
        let sample = generate_sample(spec, index)?;
        sample.image.save(&out_dir.join(&sample.record.path))?;
        if let (Some(hi), Some(p)) = (&sample.hires, &sample.record.hires_path) {
            hi.save(&out_dir.join(p))?;
        }
        manifest.samples.push(sample.record);
    }
    manifest.write_jsonl(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
