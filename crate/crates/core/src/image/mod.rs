//! Pixel containers, luminance, file I/O and the exposure-stack data model.

mod io;
mod stack;

pub use io::{
    load_image, load_labels, load_manifest, save_image, save_labels, save_plane, write_manifest,
};
pub use stack::{ExposureStack, SceneSets};

use crate::error::{Error, Result};

/// BT.601 luma coefficients.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "plane dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty plane");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty plane");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with replicate padding.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Result<Plane> {
        self.check_same_dims(other)?;
        Ok(Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_dims(&self, other: &Plane) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An RGB raster with interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Builds an image from interleaved RGB values. Values must be finite.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image construction".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image and clamps every value to [0, 1].
    pub fn new_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_channels(channels: [&Plane; 3]) -> Result<Self> {
        let (w, h) = channels[0].dims();
        channels[0].check_same_dims(channels[1])?;
        channels[0].check_same_dims(channels[2])?;
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for c in channels {
                data.push(c.data[i]);
            }
        }
        Self::new(w, h, data)
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn channel(&self, c: usize) -> Plane {
        assert!(c < 3, "channel index {c} out of range");
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn channels(&self) -> [Plane; 3] {
        [self.channel(0), self.channel(1), self.channel(2)]
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Planar (CHW) copy of the data, the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            out[i] = p[0];
            out[n + i] = p[1];
            out[2 * n + i] = p[2];
        }
        out
    }

    /// Inverse of [`Image::to_planar`].
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::DimensionMismatch(format!(
                "planar buffer of {} values for {width}x{height}x3",
                planar.len()
            )));
        }
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            data.extend_from_slice(&[planar[i], planar[n + i], planar[2 * n + i]]);
        }
        Self::new(width, height, data)
    }
}

/// Y = 0.299 R + 0.587 G + 0.114 B per pixel.
pub fn to_luminance(img: &Image) -> Plane {
    Plane {
        width: img.width,
        height: img.height,
        data: img
            .pixels()
            .map(|[r, g, b]| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn luminance_of_extremes() {
        let img = Image::new(3, 1, vec![1., 1., 1., 0., 0., 0., 1., 0., 0.]).unwrap();
        let y = to_luminance(&img);
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-15);
        assert_eq!(y.data()[1], 0.0);
        assert_abs_diff_eq!(y.data()[2], 0.299, epsilon = 1e-15);
    }

    #[test]
    fn plane_rejects_bad_lengths() {
        assert!(Plane::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Plane::new(0, 2, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn planar_roundtrip() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = img.to_planar();
        assert_eq!(p, vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(Image::from_planar(2, 1, &p).unwrap(), img);
    }

    #[test]
    fn replicate_padding() {
        let p = Plane::new(2, 2, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(p.get_clamped(-3, -1), 1.0);
        assert_eq!(p.get_clamped(5, 0), 2.0);
        assert_eq!(p.get_clamped(0, 9), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn luminance_stays_in_unit_range(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let y = to_luminance(&Image::filled(1, 1, [r, g, b]));
            proptest::prop_assert!((0.0..=1.0 + 1e-15).contains(&y.data()[0]));
        }
    }
}
