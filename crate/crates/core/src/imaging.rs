//! Image decoding/encoding, resizing, cropping and pixel/tensor conversion.

use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// An `H x W` RGB image with every channel value in `[0, 1]`, stored
/// interleaved (`HWC`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Constant-color image.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(
            height,
            width,
            rgb.iter()
                .copied()
                .cycle()
                .take(height * width * 3)
                .collect(),
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Channel-major copy for the network.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(3, self.height, self.width, |c, y, x| {
            T::of(self.get(y, x, c) as f64)
        })
    }

    /// Converts a `3 x H x W` network output, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                t.channels()
            )));
        }
        let mut pixels = Vec::with_capacity(t.len());
        for y in 0..t.height() {
            for x in 0..t.width() {
                for c in 0..3 {
                    let v = t.at(c, y, x).as_f64() as f32;
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("non-finite output at ({y}, {x})")));
                    }
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Self::new(t.height(), t.width(), pixels)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(h as usize, w as usize, pixels)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img
        .pixels
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer sized from image");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Format {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

/// Output size `(height, width)` that brings the short side to `target` while
/// keeping the aspect ratio (long side rounded to the nearest pixel).
pub fn short_side_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| {
        ((long as f64 * target as f64 / short as f64).round() as usize).max(1)
    };
    if height <= width {
        (target, scale(width, height))
    } else {
        (scale(height, width), target)
    }
}

pub fn resize_short_side(img: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target == 0 {
        return Err(Error::Dimension("resize target must be positive".into()));
    }
    let (h, w) = short_side_dims(img.height, img.width, target);
    Ok(resize_bilinear(img, h, w))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(height, img.height);
    let xs = taps(width, img.width);
    let mut pixels = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                pixels.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor {
        height,
        width,
        pixels,
    }
}

/// Exact sub-grid copy with top-left corner `(top, left)`.
pub fn crop(
    img: &ImageTensor,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    if top + height > img.height || left + width > img.width || height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
            img.height, img.width
        )));
    }
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in top..top + height {
        let row = (y * img.width + left) * 3;
        pixels.extend_from_slice(&img.pixels[row..row + width * 3]);
    }
    Ok(ImageTensor {
        height,
        width,
        pixels,
    })
}

/// Uniformly placed `size x size` crop; offsets come from `rng` only.
pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if size == 0 || img.height < size || img.width < size {
        return Err(Error::Dimension(format!(
            "cannot crop {size}x{size} from {}x{} image",
            img.height, img.width
        )));
    }
    let top = rng.random_range(0..=img.height - size);
    let left = rng.random_range(0..=img.width - size);
    crop(img, top, left, size, size)
}
