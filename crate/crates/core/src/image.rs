//! RGB images in `[0, 1]` and binary foreground masks.

use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

/// `H x W` RGB image, stored planar (channel-major) so it maps directly onto
/// a `3 x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    /// `data` is planar: all red values, then green, then blue.
    pub fn from_planar(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", CHANNELS * height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![CHANNELS, self.height, self.width], self.data.clone())
            .expect("image values are finite")
    }

    /// Largest absolute per-value difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Binary `H x W` foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn none(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Left half of the image is foreground.
    pub fn left_half(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, x| x < width / 2)
    }

    pub fn checkerboard(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| (x + y) % 2 == 0)
    }

    /// Builds a mask from numeric values that must each be exactly 0 or 1.
    pub fn from_values<T: Scalar>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask needs {} values, got {}", height * width, values.len()),
            ));
        }
        let bits = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::NonBinaryMask(i))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Zeroes a planar `C x H x W` update wherever the mask is off.
    pub fn apply<T: Scalar>(&self, update: &mut [T]) -> Result<()> {
        let plane = self.height * self.width;
        if plane == 0 || !update.len().is_multiple_of(plane) {
            return Err(Error::shape(
                "apply_mask",
                format!("update of {} values does not tile a {}x{} mask", update.len(), self.height, self.width),
            ));
        }
        for chunk in update.chunks_mut(plane) {
            for (v, &on) in chunk.iter_mut().zip(&self.bits) {
                if !on {
                    *v = T::zero();
                }
            }
        }
        Ok(())
    }
}

/// Zeroes `update` (planar, image-shaped) where `mask` is 0. The mask values
/// must be exactly 0 or 1.
pub fn apply_mask<T: Scalar>(update: &mut [T], mask_values: &[T], height: usize, width: usize) -> Result<()> {
    Mask::from_values(height, width, mask_values)?.apply(update)
}
