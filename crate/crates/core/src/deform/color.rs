//! HSV channel scaling, gamma contrast, and the ratio estimators used to
//! choose their parameter ranges.

use serde::{Deserialize, Serialize};

use super::DeformError;
use crate::image::{ColorSpace, ImageBuffer};

/// Denominators below this are excluded from ratio estimates.
pub const RATIO_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HsvChannel {
    H,
    S,
    V,
}

impl HsvChannel {
    fn index(self) -> usize {
        match self {
            HsvChannel::H => 0,
            HsvChannel::S => 1,
            HsvChannel::V => 2,
        }
    }
}

/// Hexcone RGB to HSV, all components in `[0, 1]` with hue in `[0, 1)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (wrap_hue(h), s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = wrap_hue(h) * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn wrap_hue(h: f64) -> f64 {
    let w = h.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

pub fn rgb_to_hsv_image(img: &ImageBuffer) -> ImageBuffer {
    map_triplets(img, ColorSpace::Hsv, rgb_to_hsv)
}

pub fn hsv_to_rgb_image(img: &ImageBuffer) -> ImageBuffer {
    map_triplets(img, ColorSpace::Rgb, hsv_to_rgb)
}

fn map_triplets(img: &ImageBuffer, space: ColorSpace, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> ImageBuffer {
    assert_eq!(img.channels(), 3, "color conversion needs three channels");
    let mut out = img.clone();
    let n = img.width() * img.height();
    let src = img.data();
    let dst = out.data_mut();
    for i in 0..n {
        let (a, b, c) = f(src[i], src[n + i], src[2 * n + i]);
        dst[i] = a;
        dst[n + i] = b;
        dst[2 * n + i] = c;
    }
    out.set_color_space(space);
    out
}

/// Image in HSV. Gray images map to `(0, 0, value)` and report `None` for H/S.
fn channel_values(img: &ImageBuffer, p: HsvChannel) -> Option<Vec<f64>> {
    match img.color_space() {
        ColorSpace::Gray => match p {
            HsvChannel::V => Some(img.plane(0).to_vec()),
            _ => None,
        },
        ColorSpace::Rgb => Some(rgb_to_hsv_image(img).plane(p.index()).to_vec()),
        ColorSpace::Hsv => Some(img.plane(p.index()).to_vec()),
    }
}

/// Multiply one HSV component by `lambda`: hue wraps modulo 1, saturation
/// and value clamp to `[0, 1]`. The result keeps the input's color space.
pub fn hsv_shift(img: &ImageBuffer, p: HsvChannel, lambda: f64) -> Result<ImageBuffer, DeformError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(DeformError::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let scale = |v: f64| match p {
        HsvChannel::H => wrap_hue(v * lambda),
        _ => (v * lambda).clamp(0.0, 1.0),
    };
    match img.color_space() {
        ColorSpace::Gray => {
            let mut out = img.clone();
            if p == HsvChannel::V {
                out.data_mut().iter_mut().for_each(|v| *v = scale(*v));
            }
            Ok(out)
        }
        ColorSpace::Rgb => {
            let mut hsv = rgb_to_hsv_image(img);
            hsv.plane_mut(p.index()).iter_mut().for_each(|v| *v = scale(*v));
            Ok(hsv_to_rgb_image(&hsv))
        }
        ColorSpace::Hsv => {
            let mut out = img.clone();
            out.plane_mut(p.index()).iter_mut().for_each(|v| *v = scale(*v));
            Ok(out)
        }
    }
}

/// Mean per-pixel ratio `out / in` of one HSV component.
///
/// Only the shifted component is averaged; pixels whose input component is
/// below [`RATIO_EPS`] are skipped.
pub fn estimate_lambda(input: &ImageBuffer, output: &ImageBuffer, p: HsvChannel) -> Result<f64, DeformError> {
    input.same_shape(output)?;
    let (Some(a), Some(b)) = (channel_values(input, p), channel_values(output, p)) else {
        return Err(DeformError::AllPixelsExcluded);
    };
    mean_ratio(
        a.iter()
            .zip(&b)
            .filter_map(|(&i, &o)| if i < RATIO_EPS { None } else { Some(o / i) }),
    )
}

/// Per-sample power law `I^gamma`.
pub fn gamma_contrast(img: &ImageBuffer, gamma: f64) -> Result<ImageBuffer, DeformError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DeformError::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let mut out = if img.color_space() == ColorSpace::Hsv {
        hsv_to_rgb_image(img)
    } else {
        img.clone()
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }
    Ok(out)
}

/// Mean of `ln(out) / ln(in)` over all samples with `in` away from 0 and 1.
pub fn estimate_gamma(input: &ImageBuffer, output: &ImageBuffer) -> Result<f64, DeformError> {
    input.same_shape(output)?;
    mean_ratio(input.data().iter().zip(output.data()).filter_map(|(&i, &o)| {
        if !(RATIO_EPS..=1.0 - RATIO_EPS).contains(&i) || o <= 0.0 {
            None
        } else {
            Some(o.ln() / i.ln())
        }
    }))
}

fn mean_ratio(values: impl Iterator<Item = f64>) -> Result<f64, DeformError> {
    let (sum, count) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if count == 0 {
        return Err(DeformError::AllPixelsExcluded);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(24, 16, 3, |_, _, _| rng.random_range(0.05..0.95)).unwrap()
    }

    #[test]
    fn unit_lambda_is_identity() {
        let img = random_rgb(1);
        for p in [HsvChannel::H, HsvChannel::S, HsvChannel::V] {
            let out = hsv_shift(&img, p, 1.0).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-6);
            assert_eq!(out.color_space(), ColorSpace::Rgb);
        }
    }

    #[test]
    fn gray_image_ignores_saturation() {
        let img = ImageBuffer::from_fn(8, 8, 3, |x, y, _| (x + y) as f64 / 16.0).unwrap();
        for lambda in [0.5, 0.8] {
            let out = hsv_shift(&img, HsvChannel::S, lambda).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-12);
        }
        let single = ImageBuffer::filled(4, 4, 1, 0.4).unwrap();
        assert_eq!(hsv_shift(&single, HsvChannel::S, 0.5).unwrap(), single);
    }

    #[test]
    fn red_value_halved() {
        let img = ImageBuffer::from_fn(2, 2, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let out = hsv_shift(&img, HsvChannel::V, 0.5).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert!((out.get(x, y, 0) - 0.5).abs() < 1e-12);
                assert!(out.get(x, y, 1).abs() < 1e-12 && out.get(x, y, 2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hue_wraps_instead_of_clamping() {
        let hsv = ImageBuffer::from_planar(1, 1, 3, ColorSpace::Hsv, vec![0.8, 1.0, 1.0]).unwrap();
        let out = hsv_shift(&hsv, HsvChannel::H, 1.5).unwrap();
        assert!((out.get(0, 0, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn lambda_estimate_recovers_value_shift() {
        let img = random_rgb(2);
        let out = hsv_shift(&img, HsvChannel::V, 0.7).unwrap();
        let est = estimate_lambda(&img, &out, HsvChannel::V).unwrap();
        assert!((est - 0.7).abs() < 0.02 * 0.7);
        assert!((estimate_lambda(&img, &img, HsvChannel::S).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_input_excludes_everything() {
        let black = ImageBuffer::new(5, 5, 3).unwrap();
        assert!(matches!(
            estimate_lambda(&black, &black, HsvChannel::V),
            Err(DeformError::AllPixelsExcluded)
        ));
    }

    #[test]
    fn gamma_values() {
        let img = ImageBuffer::filled(3, 3, 1, 0.25).unwrap();
        let out = gamma_contrast(&img, 2.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.0625).abs() < 1e-15));
        assert_eq!(gamma_contrast(&img, 1.0).unwrap(), img);
        let rgb = random_rgb(3);
        let back = gamma_contrast(&gamma_contrast(&rgb, 0.5).unwrap(), 2.0).unwrap();
        assert!(back.max_abs_diff(&rgb) < 1e-9);
    }

    #[test]
    fn gamma_estimates() {
        let img = random_rgb(4);
        let out = gamma_contrast(&img, 1.5).unwrap();
        assert!((estimate_gamma(&img, &out).unwrap() - 1.5).abs() < 0.03);
        assert!((estimate_gamma(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let white = ImageBuffer::filled(4, 4, 3, 1.0).unwrap();
        assert!(matches!(
            estimate_gamma(&white, &white),
            Err(DeformError::AllPixelsExcluded)
        ));
    }

    proptest! {
        #[test]
        fn hsv_roundtrip(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            prop_assert!((0.0..1.0).contains(&h));
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            prop_assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }
}
