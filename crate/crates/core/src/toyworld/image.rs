use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 32;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ToyImage {
    /// Validates extents and range; values must already lie in `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dims", "width and height must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                context: format!("{width}x{height} image pixels"),
                expected: width * height,
                found: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::validation(
                "pixels",
                format!("pixel {i} = {} outside [0, 1]", pixels[i]),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Clamps every value into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        pixels.iter_mut().for_each(|p| *p = clamp01(*p));
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![clamp01(value); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.len() as f64
    }

    /// Population variance of the intensities.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels
            .iter()
            .map(|&p| (p as f64 - m).powi(2))
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn mse(&self, other: &ToyImage) -> f64 {
        assert_eq!(self.len(), other.len(), "mse of differently sized images");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / self.len() as f64
    }
}

pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
