//! Dense rank-5 tensors laid out as (batch, channel, depth, height, width),
//! row-major with width fastest.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape5 {
    pub const SCALAR: Shape5 = Shape5::new(1, 1, 1, 1, 1);

    pub const fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Shape5 {
            batch,
            channels,
            depth,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.depth * self.height * self.width
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape5 { channels, ..*self }
    }

    pub fn with_spatial(&self, [depth, height, width]: [usize; 3]) -> Self {
        Shape5 {
            depth,
            height,
            width,
            ..*self
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.depth, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        (((b * self.channels + c) * self.depth + z) * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.batch, self.channels, self.depth, self.height, self.width
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape5, value: f64) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape5::SCALAR, value)
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor5 { shape, data })
    }

    /// Fills the tensor by evaluating `f(b, c, z, y, x)` at every index.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize, usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for z in 0..shape.depth {
                    for y in 0..shape.height {
                        for x in 0..shape.width {
                            data.push(f(b, c, z, y, x));
                        }
                    }
                }
            }
        }
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(b, c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, z: usize, y: usize, x: usize, value: f64) {
        let i = self.shape.index(b, c, z, y, x);
        self.data[i] = value;
    }

    /// Contiguous spatial block of one (batch, channel) pair.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape.voxels();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.shape.voxels();
        let start = (b * self.shape.channels + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor5, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }
}
