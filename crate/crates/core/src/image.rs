//! Two-dimensional scalar images with intensity-range metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The intensity interval an image's values are expressed in.
///
/// Diffusion operates on `[-1, 1]`; rasters on disk are `[0, 255]` or `[0, 65535]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityRange {
    pub const SIGNED_UNIT: IntensityRange = IntensityRange { lo: -1.0, hi: 1.0 };
    pub const UNIT: IntensityRange = IntensityRange { lo: 0.0, hi: 1.0 };
    pub const U8: IntensityRange = IntensityRange { lo: 0.0, hi: 255.0 };
    pub const U16: IntensityRange = IntensityRange { lo: 0.0, hi: 65535.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("invalid intensity range [{lo}, {hi}]")));
        }
        Ok(IntensityRange { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Affine map of `v` from this range onto `target`.
    pub fn map_value(&self, v: f64, target: &IntensityRange) -> f64 {
        target.lo + (v - self.lo) / self.width() * target.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: IntensityRange,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>, range: IntensityRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "image buffer holds {} values, {height}x{width} needs {}",
                data.len(),
                height * width
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, range: IntensityRange) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        ImageGrid {
            height,
            width,
            data: vec![value; height * width],
            range,
        }
    }

    pub fn zeros_like(other: &ImageGrid) -> Self {
        Self::filled(other.height, other.width, 0.0, other.range)
    }

    pub fn from_fn(height: usize, width: usize, range: IntensityRange, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        ImageGrid {
            height,
            width,
            data,
            range,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn range(&self) -> IntensityRange {
        self.range
    }

    pub fn with_range(mut self, range: IntensityRange) -> Self {
        self.range = range;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Pixel lookup with edge replication for out-of-bounds coordinates.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        self.data[self.clamped_index(row, col)]
    }

    #[inline]
    pub fn clamped_index(&self, row: isize, col: isize) -> usize {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        r * self.width + c
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
            range: self.range,
        }
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.ensure_same_shape(other)?;
        Ok(ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            range: self.range,
        })
    }

    /// `a * self + b * other`
    pub fn lincomb(&self, a: f64, other: &ImageGrid, b: f64) -> Result<ImageGrid> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, a: f64) -> ImageGrid {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Re-express the values in `target` by the affine map between the two ranges.
    /// A no-op (bit-exact) when the ranges already agree.
    pub fn renormalized(&self, target: IntensityRange) -> ImageGrid {
        if self.range == target {
            return self.clone();
        }
        let src = self.range;
        let mut out = self.map(|v| src.map_value(v, &target));
        out.range = target;
        out
    }

    /// Quantize to 8-bit gray levels over the image's own intensity range.
    pub fn to_u8_levels(&self) -> Vec<u8> {
        let src = self.range;
        self.data
            .iter()
            .map(|&v| src.map_value(v, &IntensityRange::U8).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Load an 8- or 16-bit grayscale raster. The returned range is the
    /// raster's native range (`[0, 255]` or `[0, 65535]`).
    pub fn load(path: impl AsRef<Path>) -> Result<ImageGrid> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::format(path, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(buf) => ImageGrid::new(
                h,
                w,
                buf.into_raw().into_iter().map(f64::from).collect(),
                IntensityRange::U8,
            ),
            other => ImageGrid::new(
                h,
                w,
                other.into_luma16().into_raw().into_iter().map(f64::from).collect(),
                IntensityRange::U16,
            ),
        }
    }

    /// Write as a lossless 16-bit grayscale PNG, mapping the image's range onto `[0, 65535]`.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let src = self.range;
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&v| src.map_value(v, &IntensityRange::U16).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::format(path, e))
    }

    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8_levels())
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalize_same_range_is_identity() {
        let img = ImageGrid::from_fn(3, 4, IntensityRange::SIGNED_UNIT, |r, c| {
            (r as f64 * 0.37 - c as f64 * 0.11).sin()
        });
        assert_eq!(img.renormalized(IntensityRange::SIGNED_UNIT), img);
    }

    #[test]
    fn renormalize_maps_endpoints() {
        let img = ImageGrid::new(1, 3, vec![0.0, 127.5, 255.0], IntensityRange::U8).unwrap();
        let n = img.renormalized(IntensityRange::SIGNED_UNIT);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn png16_roundtrip_preserves_levels() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageGrid::from_fn(5, 7, IntensityRange::U16, |r, c| (r * 1000 + c * 37) as f64);
        let path = dir.path().join("a.png");
        img.save_png16(&path).unwrap();
        let back = ImageGrid::load(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn buffer_length_is_checked() {
        assert!(ImageGrid::new(2, 2, vec![0.0; 3], IntensityRange::UNIT).is_err());
    }
}
