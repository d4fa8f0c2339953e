//! Dense row-major containers for per-pixel data.
//!
//! `Grid<T>` holds one value per pixel, `Volume` holds a fixed-length vector
//! per pixel with the vector dimension innermost, so per-pixel slices are
//! contiguous. All higher-level types (distributions, hypothesis planes, cost
//! volumes, feature maps) wrap these two.

use crate::error::{Error, Result};

/// A 2D grid of values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Build from a per-pixel function evaluated in row-major order.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }
}

impl<T> Grid<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

impl Grid<f64> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Area-average downsampling by an integer factor. Dimensions must divide.
    pub fn downsample(&self, factor: usize) -> Result<Grid<f64>> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by factor {}",
                self.height, self.width, factor
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Grid::from_fn(oh, ow, |y, x| {
            let mut sum = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    sum += self.at(y * factor + dy, x * factor + dx);
                }
            }
            sum * norm
        }))
    }

    /// Bilinear 2x upsampling honoring the half-pixel center convention:
    /// output pixel (y, x) samples the input at ((y + 0.5) / 2 - 0.5, ...).
    pub fn upsample_bilinear_2x(&self) -> Grid<f64> {
        let (oh, ow) = (self.height * 2, self.width * 2);
        Grid::from_fn(oh, ow, |y, x| {
            let sy = (y as f64 + 0.5) / 2.0 - 0.5;
            let sx = (x as f64 + 0.5) / 2.0 - 0.5;
            self.sample_clamped(sy, sx)
        })
    }

    /// Bilinear sample with coordinates clamped to the raster.
    pub fn sample_clamped(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let (y0, x0) = (y0.min(self.height - 1), x0.min(self.width - 1));
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let v00 = self.at(y0, x0);
        let v01 = self.at(y0, x1);
        let v10 = self.at(y1, x0);
        let v11 = self.at(y1, x1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    }
}

/// A 2D grid of fixed-length f64 vectors (channels, planes, ...), row-major
/// with the vector dimension innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![0.0; height * width * depth],
        }
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f64) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![value; height * width * depth],
        }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "volume data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                depth
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.depth + k]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, k: usize, value: f64) {
        self.data[(y * self.width + x) * self.depth + k] = value;
    }

    /// The contiguous per-pixel vector.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.depth;
        &self.data[base..base + self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.depth;
        &mut self.data[base..base + self.depth]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Nearest-neighbor 2x upsampling: output pixel (y, x) copies the whole
    /// per-pixel vector of input pixel (y / 2, x / 2).
    pub fn upsample_nearest_2x(&self) -> Volume {
        let mut out = Volume::zeros(self.height * 2, self.width * 2, self.depth);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = self.pixel(y / 2, x / 2);
                out.pixel_mut(y, x).copy_from_slice(src);
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.shape() == other.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let g = Grid::from_fn(4, 4, |y, x| (y * 4 + x) as f64);
        let d = g.downsample(2).unwrap();
        assert_eq!(d.height(), 2);
        assert_eq!(d.at(0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(d.at(1, 1), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn downsample_rejects_nondivisible() {
        let g = Grid::zeros(5, 4);
        assert!(g.downsample(2).is_err());
    }

    #[test]
    fn upsample_preserves_constant() {
        let g = Grid::filled(3, 2, 7.5);
        let u = g.upsample_bilinear_2x();
        assert_eq!(u.height(), 6);
        assert_eq!(u.width(), 4);
        assert!(u.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn upsample_is_linear_on_ramps() {
        // Bilinear upsampling of a linear ramp stays linear in the interior.
        let g = Grid::from_fn(2, 4, |_, x| x as f64);
        let u = g.upsample_bilinear_2x();
        // Interior output pixel x maps to input coordinate (x + 0.5)/2 - 0.5.
        for x in 1..7 {
            let expect = (x as f64 + 0.5) / 2.0 - 0.5;
            assert!((u.at(1, x) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_pixel_slices_are_contiguous() {
        let mut v = Volume::zeros(2, 2, 3);
        v.pixel_mut(1, 0).copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(v.pixel(1, 0), &[1.0, 2.0, 3.0]);
        assert_eq!(v.at(1, 0, 1), 2.0);
    }

    #[test]
    fn nearest_upsample_replicates_vectors() {
        let mut v = Volume::zeros(1, 2, 2);
        v.pixel_mut(0, 0).copy_from_slice(&[1.0, 2.0]);
        v.pixel_mut(0, 1).copy_from_slice(&[3.0, 4.0]);
        let u = v.upsample_nearest_2x();
        assert_eq!(u.pixel(1, 1), &[1.0, 2.0]);
        assert_eq!(u.pixel(0, 2), &[3.0, 4.0]);
    }
}
