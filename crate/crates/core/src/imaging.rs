//! Scalar images, bilinear sampling, backward warping, block downsampling and
//! raster I/O.
//!
//! Pixel `(x, y)` lives at index `y * width + x`. Sampling coordinates are pixel
//! centers: `(0, 0)` is the first pixel and `(width - 1, height - 1)` the last.
//! Anything outside that rectangle returns the configured fill value.

use std::path::Path;

use image::{DynamicImage, GrayImage};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default out-of-bounds fill (black background of a scanned section).
pub const DEFAULT_FILL: f64 = 0.0;

/// Sampling positions this far outside the pixel grid still read the border.
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// Anything that maps fixed-frame coordinates to moving-frame coordinates.
pub trait CoordinateMap: Send + Sync {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64);
}

impl<M: CoordinateMap + ?Sized> CoordinateMap for &M {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        (**self).map_point(x, y)
    }
}

/// The identity map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl CoordinateMap for IdentityMap {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x, y)
    }
}

/// A 2D grid of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(i) = pixels
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidImage(format!(
                "pixel {i} has intensity {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Constant image. Panics if `value` is outside `[0, 1]` or a dimension is zero.
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        assert!(width > 0 && height > 0, "zero-sized image");
        let mut pixels = vec![0.0; width * height];
        pixels
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, p) in row.iter_mut().enumerate() {
                    *p = clamp_unit(f(x, y));
                }
            });
        Self {
            width,
            height,
            pixels,
        }
    }

    pub(crate) fn from_raw_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        for p in pixels.iter_mut() {
            *p = clamp_unit(*p);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Bilinear interpolation at a sub-pixel position; `fill` outside
    /// `[0, width-1] x [0, height-1]` (widened by [`EDGE_TOLERANCE`]).
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> f64 {
        match self.cell(x, y) {
            Some(c) => {
                // endpoint-exact lerp, so integer positions return stored values
                let top = c.v00 * (1.0 - c.fx) + c.v10 * c.fx;
                let bottom = c.v01 * (1.0 - c.fx) + c.v11 * c.fx;
                top * (1.0 - c.fy) + bottom * c.fy
            }
            None => fill,
        }
    }

    /// Bilinear sample together with its exact spatial derivative `(d/dx, d/dy)`.
    /// The derivative is zero outside the image.
    #[inline]
    pub fn sample_with_gradient(&self, x: f64, y: f64, fill: f64) -> (f64, f64, f64) {
        match self.cell(x, y) {
            Some(c) => {
                let top = c.v00 * (1.0 - c.fx) + c.v10 * c.fx;
                let bottom = c.v01 * (1.0 - c.fx) + c.v11 * c.fx;
                let v = top * (1.0 - c.fy) + bottom * c.fy;
                let dx = (1.0 - c.fy) * (c.v10 - c.v00) + c.fy * (c.v11 - c.v01);
                let dy = bottom - top;
                (v, dx, dy)
            }
            None => (fill, 0.0, 0.0),
        }
    }

    /// Bilinear sample and derivative over the image surrounded by a one-pixel
    /// ring of `fill`, which makes the result continuous across the border.
    /// Agrees with [`sample_with_gradient`](Self::sample_with_gradient) inside
    /// the image.
    #[inline]
    pub fn sample_padded_with_gradient(&self, x: f64, y: f64, fill: f64) -> (f64, f64, f64) {
        let (w, h) = (self.width as i64, self.height as i64);
        if !(x > -1.0 && x < w as f64 && y > -1.0 && y < h as f64) {
            return (fill, 0.0, 0.0);
        }
        let x0 = (x.floor() as i64).min(w - 2).max(-1);
        let y0 = (y.floor() as i64).min(h - 2).max(-1);
        let px = |i: i64, j: i64| {
            if i < 0 || j < 0 || i >= w || j >= h {
                fill
            } else {
                self.pixels[(j * w + i) as usize]
            }
        };
        let (v00, v10) = (px(x0, y0), px(x0 + 1, y0));
        let (v01, v11) = (px(x0, y0 + 1), px(x0 + 1, y0 + 1));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = v00 * (1.0 - fx) + v10 * fx;
        let bottom = v01 * (1.0 - fx) + v11 * fx;
        let v = top * (1.0 - fy) + bottom * fy;
        let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
        (v, dx, bottom - top)
    }

    #[inline]
    fn cell(&self, x: f64, y: f64) -> Option<Cell> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        // written so that NaN falls through to the fill branch; overshoot up
        // to EDGE_TOLERANCE is rounding noise and snaps back onto the border
        if !(x >= -EDGE_TOLERANCE
            && x <= max_x + EDGE_TOLERANCE
            && y >= -EDGE_TOLERANCE
            && y <= max_y + EDGE_TOLERANCE)
        {
            return None;
        }
        let (x, y) = (x.clamp(0.0, max_x), y.clamp(0.0, max_y));
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let w = self.width;
        Some(Cell {
            v00: self.pixels[y0 * w + x0],
            v10: self.pixels[y0 * w + x1],
            v01: self.pixels[y1 * w + x0],
            v11: self.pixels[y1 * w + x1],
            fx,
            fy,
        })
    }
}

struct Cell {
    v00: f64,
    v10: f64,
    v01: f64,
    v11: f64,
    fx: f64,
    fy: f64,
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Backward warp: output pixel `(x, y)` is `moving` sampled at `map(x, y)`.
pub fn warp(
    moving: &ScalarImage,
    map: &dyn CoordinateMap,
    out_width: usize,
    out_height: usize,
    fill: f64,
) -> ScalarImage {
    assert!(out_width > 0 && out_height > 0, "zero-sized warp output");
    let mut pixels = vec![0.0; out_width * out_height];
    pixels
        .par_chunks_mut(out_width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, p) in row.iter_mut().enumerate() {
                let (mx, my) = map.map_point(x as f64, y as f64);
                *p = moving.sample_bilinear(mx, my, fill);
            }
        });
    ScalarImage::from_raw_clamped(out_width, out_height, pixels)
}

/// Block-mean downsampling; partial edge blocks average the pixels they have.
pub fn downsample(img: &ScalarImage, factor: usize) -> Result<ScalarImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let out_w = img.width.div_ceil(factor);
    let out_h = img.height.div_ceil(factor);
    let mut pixels = vec![0.0; out_w * out_h];
    pixels
        .par_chunks_mut(out_w)
        .enumerate()
        .for_each(|(oy, row)| {
            let y_end = ((oy + 1) * factor).min(img.height);
            for (ox, p) in row.iter_mut().enumerate() {
                let x_end = ((ox + 1) * factor).min(img.width);
                let mut sum = 0.0;
                let mut count = 0usize;
                for y in oy * factor..y_end {
                    for x in ox * factor..x_end {
                        sum += img.get(x, y);
                        count += 1;
                    }
                }
                *p = sum / count as f64;
            }
        });
    Ok(ScalarImage::from_raw_clamped(out_w, out_h, pixels))
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// How multi-channel rasters are reduced to one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelPolicy {
    /// `0.299 R + 0.587 G + 0.114 B`; alpha ignored.
    #[default]
    Luminance,
    /// Reject anything that is not single-channel.
    RequireGray,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub channels: ChannelPolicy,
}

/// Reads an 8- or 16-bit PNG/TIFF into a normalized scalar image.
pub fn load_image(path: impl AsRef<Path>, options: LoadOptions) -> Result<ScalarImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage(format!(
            "{} is zero-sized",
            path.display()
        )));
    }
    let gray_only = options.channels == ChannelPolicy::RequireGray;
    let color_rejected = || Error::UnsupportedBitDepth {
        path: path.to_path_buf(),
        layout: "multi-channel input with ChannelPolicy::RequireGray".into(),
    };
    let pixels: Vec<f64> = match &decoded {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(b) if !gray_only => {
            b.as_raw().chunks_exact(2).map(|c| c[0] as f64 / 255.0).collect()
        }
        DynamicImage::ImageLumaA16(b) if !gray_only => b
            .as_raw()
            .chunks_exact(2)
            .map(|c| c[0] as f64 / 65535.0)
            .collect(),
        DynamicImage::ImageRgb8(b) if !gray_only => luminance(b.as_raw(), 3, 255.0),
        DynamicImage::ImageRgba8(b) if !gray_only => luminance(b.as_raw(), 4, 255.0),
        DynamicImage::ImageRgb16(b) if !gray_only => luminance(b.as_raw(), 3, 65535.0),
        DynamicImage::ImageRgba16(b) if !gray_only => luminance(b.as_raw(), 4, 65535.0),
        DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => return Err(color_rejected()),
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    };
    Ok(ScalarImage::from_raw_clamped(width, height, pixels))
}

fn luminance<T: Copy + Into<f64>>(raw: &[T], stride: usize, max: f64) -> Vec<f64> {
    raw.chunks_exact(stride)
        .map(|c| {
            let (r, g, b) = (c[0].into() / max, c[1].into() / max, c[2].into() / max);
            LUMA_R * r + LUMA_G * g + LUMA_B * b
        })
        .collect()
}

/// Converts an intensity to an 8-bit level, rounding half up.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (clamp_unit(v) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn to_gray8(img: &ScalarImage) -> GrayImage {
    let raw: Vec<u8> = img.pixels.iter().map(|&v| to_u8(v)).collect();
    GrayImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer length matches")
}

/// Writes an 8-bit grayscale PNG (`intensity * 255`, round half up).
pub fn save_png(img: &ScalarImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_gray8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ImageEncode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
