//! Separable Gaussian blur with clamped borders.

use super::DeformError;
use crate::image::ImageBuffer;

/// `2 * ceil(2 sigma) + 1`.
pub fn kernel_side(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil() as usize + 1
}

/// Normalized 1D Gaussian taps; the 2D kernel is the outer product.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>, DeformError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DeformError::NonPositiveSigma(sigma));
    }
    let side = kernel_side(sigma);
    let r = (side / 2) as f64;
    let taps: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer, DeformError> {
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get_clamped(x as isize + i as isize - r, y as isize, c))
                    .sum();
                tmp.set(x, y, c, s);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let s: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp.get_clamped(x as isize, y as isize + i as isize - r, c))
                    .sum();
                out.set(x, y, c, s);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sides() {
        assert_eq!(kernel_side(1.0), 5);
        assert_eq!(kernel_side(0.1), 3);
        assert_eq!(kernel_side(2.6), 13);
        assert!(matches!(gaussian_kernel_1d(0.0), Err(DeformError::NonPositiveSigma(_))));
        assert!(matches!(
            gaussian_kernel_1d(-1.0),
            Err(DeformError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn uniform_image_unchanged() {
        let img = ImageBuffer::filled(17, 9, 3, 0.37).unwrap();
        let out = gaussian_blur(&img, 1.7).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn impulse_reproduces_2d_kernel() {
        let sigma = 1.3;
        let mut img = ImageBuffer::new(21, 21, 1).unwrap();
        img.set(10, 10, 0, 1.0);
        let out = gaussian_blur(&img, sigma).unwrap();
        // direct 2D evaluation, normalized over the square support
        let side = kernel_side(sigma) as i64;
        let r = side / 2;
        let g = |dx: i64, dy: i64| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        let total: f64 = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| g(dx, dy))).sum();
        for y in 0..21i64 {
            for x in 0..21i64 {
                let (dx, dy) = (x - 10, y - 10);
                let expect = if dx.abs() <= r && dy.abs() <= r {
                    g(dx, dy) / total
                } else {
                    0.0
                };
                assert!((out.get(x as usize, y as usize, 0) - expect).abs() < 1e-15);
            }
        }
    }
}
