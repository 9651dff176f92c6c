//! Planar floating-point rasters and their on-disk encodings.
//!
//! Samples are stored channel-planar (`channel * w * h + y * w + x`) as `f64`
//! in `[0, 1]`. Pixel centers sit at integer coordinates, so a pixel `(x, y)`
//! covers `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}x{channels}")]
    BadDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("sample buffer has {got} values, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("cannot downsample {width}x{height} by factor {factor}")]
    Downsample { width: usize, height: usize, factor: usize },
    #[error("image codec failure: {0}")]
    Codec(#[from] image::ImageError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Gray,
    Rgb,
    Hsv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    color_space: ColorSpace,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// A zero-filled image. Gray for one channel, RGB for three.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        let color_space = default_space(channels)?;
        if width == 0 || height == 0 {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            color_space,
            data: vec![value; width * height * channels],
        })
    }

    pub fn from_planar(
        width: usize,
        height: usize,
        channels: usize,
        color_space: ColorSpace,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        default_space(channels)?;
        if width == 0 || height == 0 {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
            });
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::BufferLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            color_space,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let mut img = Self::new(width, height, channels)?;
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.set(x, y, c, f(x, y, c));
                }
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub(crate) fn set_color_space(&mut self, space: ColorSpace) {
        self.color_space = space;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        c * self.width * self.height + y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Sample with coordinates clamped to the image border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(ImageError::SizeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Luminance plane (mean of channels for color images).
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.width * self.height;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v / self.channels as f64;
            }
        }
        ImageBuffer::from_planar(self.width, self.height, 1, ColorSpace::Gray, out)
            .expect("dimensions already validated")
    }

    /// Copy of the rectangle `[x0, x0 + w) x [y0, y0 + h)`, clipped to the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer, ImageError> {
        let x1 = (x0 + w).min(self.width);
        let y1 = (y0 + h).min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(ImageError::BadDimensions {
                width: x1.saturating_sub(x0),
                height: y1.saturating_sub(y0),
                channels: self.channels,
            });
        }
        let (cw, ch) = (x1 - x0, y1 - y0);
        let mut out = ImageBuffer::new(cw, ch, self.channels)?;
        out.color_space = self.color_space;
        for c in 0..self.channels {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        Ok(out)
    }

    /// Integer box-filter downsampling.
    pub fn downsample(&self, factor: usize) -> Result<ImageBuffer, ImageError> {
        if factor == 1 {
            return Ok(self.clone());
        }
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(ImageError::Downsample {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = ImageBuffer::new(w, h, self.channels)?;
        out.color_space = self.color_space;
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.set(x, y, c, s * norm);
                }
            }
        }
        Ok(out)
    }

    /// Write as 8-bit PNG, or binary PGM/PPM when the extension is `pgm`/`ppm`/`pnm`.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let rgb = if self.color_space == ColorSpace::Hsv {
            crate::deform::color::hsv_to_rgb_image(self)
        } else {
            self.clone()
        };
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (rgb.width as u32, rgb.height as u32);
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let dynimg = if rgb.channels == 1 {
            let buf: Vec<u8> = rgb.plane(0).iter().map(|&v| quant(v)).collect();
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, buf).expect("buffer sized from dimensions"),
            )
        } else {
            let mut buf = Vec::with_capacity(rgb.width * rgb.height * 3);
            for y in 0..rgb.height {
                for x in 0..rgb.width {
                    for c in 0..3 {
                        buf.push(quant(rgb.get(x, y, c)));
                    }
                }
            }
            image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, buf).expect("buffer sized from dimensions"))
        };
        match ext.as_deref() {
            Some("pgm") | Some("ppm") | Some("pnm") => {
                let file = std::fs::File::create(path)?;
                let mut writer = std::io::BufWriter::new(file);
                let subtype = if rgb.channels == 1 {
                    image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary)
                } else {
                    image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary)
                };
                let encoder = image::codecs::pnm::PnmEncoder::new(&mut writer).with_subtype(subtype);
                dynimg.write_with_encoder(encoder)?;
            }
            _ => dynimg.save_with_format(path, image::ImageFormat::Png)?,
        }
        Ok(())
    }

    /// Load an 8-bit image; grayscale stays single-channel, anything else becomes RGB.
    pub fn load(path: &Path) -> Result<ImageBuffer, ImageError> {
        let dynimg = image::open(path)?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg {
            image::DynamicImage::ImageLuma8(g) => {
                let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
                ImageBuffer::from_planar(w, h, 1, ColorSpace::Gray, data)
            }
            other => {
                let rgb = other.to_rgb8();
                let mut img = ImageBuffer::new(w, h, 3)?;
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        img.set(x as usize, y as usize, c, p.0[c] as f64 / 255.0);
                    }
                }
                Ok(img)
            }
        }
    }
}

fn default_space(channels: usize) -> Result<ColorSpace, ImageError> {
    match channels {
        1 => Ok(ColorSpace::Gray),
        3 => Ok(ColorSpace::Rgb),
        n => Err(ImageError::Channels(n)),
    }
}
