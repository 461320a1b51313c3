use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Single-channel square image with pixels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::ShapeMismatch { expected: vec![1, side, side], found: vec![pixels.len()] });
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, pixels: vec![value; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.side + x]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.side != other.side {
            return Err(Error::ShapeMismatch {
                expected: vec![1, self.side, self.side],
                found: vec![1, other.side, other.side],
            });
        }
        Ok(())
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let total: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(total / self.pixels.len() as f64)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}
