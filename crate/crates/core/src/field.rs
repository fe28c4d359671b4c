//! Dense real spatial tensors (channels x height x width).

use crate::error::{FeraError, Result};
use crate::real::Real;
use rand::Rng;

/// A real-valued spatial tensor, stored row-major within each channel,
/// channels outermost. The carrier for latents, images and noise fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T: Real = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(FeraError::Shape(format!(
                "field data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Unit-Gaussian field drawn from `rng`, in deterministic element order.
    pub fn standard_normal<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| T::std_normal(rng))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// One channel plane as a slice of length height*width.
    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(FeraError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if !self.all_finite() {
            return Err(FeraError::Numeric(format!("{what}: non-finite values")));
        }
        Ok(())
    }

    /// Squared L2 norm, accumulated in double precision.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        s / self.data.len() as f64
    }

    pub fn scale(&self, c: T) -> Self {
        let data = self.data.iter().map(|&v| v * c).collect();
        Self { data, ..*self }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self { data, ..*self })
    }

    /// self + c * other, elementwise.
    pub fn add_scaled(&self, c: T, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + c * b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Lossless-ish precision change (f32 -> f64 exact; f64 -> f32 rounds).
    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_energy() {
        let f = Field::<f32>::constant(2, 4, 4, 0.5);
        assert_eq!(f.shape(), (2, 4, 4));
        assert!((f.energy() - 2.0 * 16.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Field::<f32>::from_vec(1, 2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn add_scaled_matches_manual() {
        let a = Field::<f64>::constant(1, 2, 2, 1.0);
        let b = Field::<f64>::constant(1, 2, 2, 2.0);
        let c = a.add_scaled(0.5, &b).unwrap();
        assert!(c.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }
}
