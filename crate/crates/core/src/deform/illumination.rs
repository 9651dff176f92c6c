//! Non-uniform illumination: fit a low-order bivariate polynomial to the
//! value channel, model its coefficients as independent Gaussians, and
//! apply freshly drawn fields multiplicatively.
//!
//! Coefficients are stored highest powers first: the term `x^a y^b` sits at
//! index `(m - b)(n + 1) + (n - a)`, so the constant term is last. Pixel
//! coordinates are normalized as `x = col / (W - 1)`, `y = row / (H - 1)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::color::{hsv_to_rgb_image, rgb_to_hsv_image};
use super::DeformError;
use crate::image::{ColorSpace, ImageBuffer};

pub const FIELD_MIN: f64 = 0.0;
pub const FIELD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationModel {
    /// Highest power of `y`.
    pub m: usize,
    /// Highest power of `x`.
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl IlluminationModel {
    pub fn coefficient_count(m: usize, n: usize) -> usize {
        (m + 1) * (n + 1)
    }

    /// Zero-variance model whose field is the constant `c`.
    pub fn constant(m: usize, n: usize, c: f64) -> Self {
        let k = Self::coefficient_count(m, n);
        let mut mean = vec![0.0; k];
        mean[k - 1] = c;
        Self {
            m,
            n,
            mean,
            std: vec![0.0; k],
        }
    }

    pub fn validate(&self) -> Result<(), DeformError> {
        let k = Self::coefficient_count(self.m, self.n);
        if self.mean.len() != k || self.std.len() != k {
            return Err(DeformError::InvalidParameter(format!(
                "illumination model needs {k} coefficients"
            )));
        }
        if self.std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(DeformError::InvalidParameter(
                "illumination model has invalid moments".into(),
            ));
        }
        Ok(())
    }

    /// One coefficient draw; zero-variance entries return their mean.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&mu, &sd)| {
                if sd == 0.0 {
                    mu
                } else {
                    Normal::new(mu, sd).expect("validated std").sample(rng)
                }
            })
            .collect()
    }
}

fn monomials(x: f64, y: f64, m: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((m + 1) * (n + 1));
    for b in (0..=m).rev() {
        for a in (0..=n).rev() {
            out.push(x.powi(a as i32) * y.powi(b as i32));
        }
    }
    out
}

fn normalized(i: usize, len: usize) -> f64 {
    if len > 1 {
        i as f64 / (len - 1) as f64
    } else {
        0.0
    }
}

pub fn evaluate_polynomial(q: &[f64], m: usize, n: usize, x: f64, y: f64) -> f64 {
    monomials(x, y, m, n).iter().zip(q).map(|(t, c)| t * c).sum()
}

/// Field over a `width x height` raster, row-major.
pub fn polynomial_field(q: &[f64], m: usize, n: usize, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            out.push(evaluate_polynomial(
                q,
                m,
                n,
                normalized(col, width),
                normalized(row, height),
            ));
        }
    }
    out
}

/// Value channel as a single-plane image.
pub fn value_channel(img: &ImageBuffer) -> ImageBuffer {
    match img.color_space() {
        ColorSpace::Gray => img.clone(),
        ColorSpace::Rgb => {
            let hsv = rgb_to_hsv_image(img);
            ImageBuffer::from_planar(img.width(), img.height(), 1, ColorSpace::Gray, hsv.plane(2).to_vec())
                .expect("same raster")
        }
        ColorSpace::Hsv => {
            ImageBuffer::from_planar(img.width(), img.height(), 1, ColorSpace::Gray, img.plane(2).to_vec())
                .expect("same raster")
        }
    }
}

/// Least-squares coefficients of order `(m, n)` for the first plane of `value`.
pub fn fit_illumination(value: &ImageBuffer, m: usize, n: usize) -> Result<Vec<f64>, DeformError> {
    fit_illumination_with_residual(value, m, n).map(|(q, _)| q)
}

/// Coefficients plus the residual sum of squares.
pub fn fit_illumination_with_residual(value: &ImageBuffer, m: usize, n: usize) -> Result<(Vec<f64>, f64), DeformError> {
    let (w, h) = (value.width(), value.height());
    let k = IlluminationModel::coefficient_count(m, n);
    let rows = w * h;
    let mut a = DMatrix::<f64>::zeros(rows, k);
    for row in 0..h {
        for col in 0..w {
            let terms = monomials(normalized(col, w), normalized(row, h), m, n);
            for (j, t) in terms.into_iter().enumerate() {
                a[(row * w + col, j)] = t;
            }
        }
    }
    let b = DVector::from_column_slice(value.plane(0));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * rows.max(k) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < k || rows < k {
        return Err(DeformError::SingularFit { rank, needed: k });
    }
    let q = svd
        .solve(&b, tol)
        .map_err(|e| DeformError::InvalidParameter(e.to_string()))?;
    let rss = (&a * &q - &b).norm_squared();
    Ok((q.iter().copied().collect(), rss))
}

/// Per-coefficient sample mean and unbiased standard deviation over a corpus.
pub fn build_illumination_model(corpus: &[ImageBuffer], m: usize, n: usize) -> Result<IlluminationModel, DeformError> {
    if corpus.len() < 2 {
        return Err(DeformError::CorpusTooSmall(corpus.len()));
    }
    let k = IlluminationModel::coefficient_count(m, n);
    let fits = corpus
        .iter()
        .map(|img| fit_illumination(&value_channel(img), m, n))
        .collect::<Result<Vec<_>, _>>()?;
    let count = fits.len() as f64;
    let mut mean = vec![0.0; k];
    for q in &fits {
        for (acc, v) in mean.iter_mut().zip(q) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; k];
    for q in &fits {
        for j in 0..k {
            var[j] += (q[j] - mean[j]).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / (count - 1.0)).sqrt()).collect();
    Ok(IlluminationModel { m, n, mean, std })
}

/// Multiply the value channel by a field drawn from `model`, clamped to
/// `[FIELD_MIN, FIELD_MAX]`.
pub fn apply_illumination(img: &ImageBuffer, model: &IlluminationModel, seed: u64) -> Result<ImageBuffer, DeformError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = model.sample(&mut rng);
    let field: Vec<f64> = polynomial_field(&q, model.m, model.n, img.width(), img.height())
        .into_iter()
        .map(|v| v.clamp(FIELD_MIN, FIELD_MAX))
        .collect();
    let scale = |plane: &mut [f64]| {
        for (v, f) in plane.iter_mut().zip(&field) {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    };
    Ok(match img.color_space() {
        ColorSpace::Gray => {
            let mut out = img.clone();
            for c in 0..out.channels() {
                scale(out.plane_mut(c));
            }
            out
        }
        ColorSpace::Rgb => {
            let mut hsv = rgb_to_hsv_image(img);
            scale(hsv.plane_mut(2));
            hsv_to_rgb_image(&hsv)
        }
        ColorSpace::Hsv => {
            let mut out = img.clone();
            scale(out.plane_mut(2));
            out
        }
    })
}
