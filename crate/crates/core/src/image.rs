//! Nonnegative 2D pixel rasters with a physical pixel size.

use crate::error::{Error, Result};

/// A row-major raster of real pixel intensities.
///
/// Carries the physical pixel pitch so geometry (mm) and raster (pixels)
/// stay consistent across the projector and phantom code. Values must be
/// finite; activity images are additionally nonnegative, enforced where an
/// operation requires it.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    values: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, pixel_size_mm: f64, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter {
                name: "image dims",
                reason: format!("{width}x{height} must be nonzero"),
            });
        }
        if pixel_size_mm <= 0.0 || !pixel_size_mm.is_finite() {
            return Err(Error::InvalidParameter {
                name: "pixel_size_mm",
                reason: format!("{pixel_size_mm} must be positive and finite"),
            });
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "Image2D values",
                expected: format!("{} values", width * height),
                actual: format!("{}", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Image2D values"));
        }
        Ok(Self {
            width,
            height,
            pixel_size_mm,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size_mm: f64) -> Result<Self> {
        Self::new(width, height, pixel_size_mm, vec![0.0; width * height])
    }

    pub fn constant(width: usize, height: usize, pixel_size_mm: f64, value: f64) -> Result<Self> {
        Self::new(width, height, pixel_size_mm, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    /// Total pixel count.
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    /// Error out unless every pixel is >= 0.
    pub fn require_nonnegative(&self, what: &'static str) -> Result<()> {
        if self.is_nonnegative() {
            Ok(())
        } else {
            Err(Error::Negative(what))
        }
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Map pixel values elementwise, keeping geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            pixel_size_mm: self.pixel_size_mm,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Squared Euclidean distance to another image of the same dims.
    pub fn squared_distance(&self, other: &Image2D) -> f64 {
        debug_assert!(self.same_dims(other));
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}
