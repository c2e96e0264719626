//! Dense rank-4 tensors in (batch, channels, height, width) layout.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(B, C, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0[3]
    }

    /// Pixels per channel plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    /// Element count, or a size error on overflow.
    pub fn checked_numel(&self) -> Result<usize> {
        self.0
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(format!("element count of {self:?} overflows")))
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_batch(self, b: usize) -> Self {
        Shape([b, self.0[1], self.0[2], self.0[3]])
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "({b},{c},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean Gaussian with the given standard deviation, seeded.
    Normal { seed: u64, std: f64 },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, init: Init) -> Result<Self> {
        let [b, c, h, w] = shape.0;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive (only the batch may be empty), got {shape}"
            )));
        }
        let _ = b;
        let n = shape.checked_numel()?;
        // Refuse allocations that could never fit in memory instead of aborting.
        if n.checked_mul(std::mem::size_of::<f64>()).is_none_or(|bytes| bytes > isize::MAX as usize) {
            return Err(Error::Size(format!("{shape} is too large to allocate")));
        }
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Normal { seed, std } => {
                if !(std.is_finite() && std >= 0.0) {
                    return Err(Error::Argument(format!("normal init std must be finite and >= 0, got {std}")));
                }
                let normal = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let n = shape.checked_numel()?;
        if n != data.len() {
            return Err(Error::Shape(format!("{shape} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((b * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != Shape::SCALAR {
            return Err(Error::Shape(format!("item() needs a scalar tensor, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Copy of sample `b` as a batch-of-one tensor.
    pub fn sample(&self, b: usize) -> Tensor {
        let per = self.shape.numel() / self.shape.batch().max(1);
        Tensor {
            shape: self.shape.with_batch(1),
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stack batch-of-one (or larger) tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.shape.with_batch(1) != first.shape.with_batch(1) {
                return Err(Error::Shape(format!("cannot stack {} with {}", p.shape, first.shape)));
            }
            b += p.shape.batch();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: first.shape.with_batch(b), data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_init() {
        let t = Tensor::new(Shape::new(1, 1, 2, 2), Init::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn constant_init_gate_bias_value() {
        let t = Tensor::new(Shape::SCALAR, Init::Constant(1.5)).unwrap();
        assert_eq!(t.item().unwrap(), 1.5);
    }

    #[test]
    fn normal_init_is_seeded() {
        let s = Shape::new(1, 2, 2, 2);
        let a = Tensor::new(s, Init::Normal { seed: 7, std: 0.1 }).unwrap();
        let b = Tensor::new(s, Init::Normal { seed: 7, std: 0.1 }).unwrap();
        let c = Tensor::new(s, Init::Normal { seed: 8, std: 0.1 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn overflowing_shape_is_a_size_error() {
        let s = Shape::new(usize::MAX, 2, 2, 2);
        assert!(matches!(Tensor::new(s, Init::Zeros), Err(Error::Size(_))));
        let s = Shape::new(1 << 20, 1 << 20, 1 << 20, 1);
        assert!(matches!(Tensor::new(s, Init::Zeros), Err(Error::Size(_))));
    }

    #[test]
    fn empty_batch_allowed_zero_channels_not() {
        assert!(Tensor::new(Shape::new(0, 3, 4, 4), Init::Zeros).unwrap().is_empty());
        assert!(Tensor::new(Shape::new(1, 0, 4, 4), Init::Zeros).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).is_err());
    }

    #[test]
    fn sample_and_concat_round_trip() {
        let t = Tensor::new(Shape::new(3, 2, 2, 2), Init::Normal { seed: 1, std: 1.0 }).unwrap();
        let parts: Vec<_> = (0..3).map(|b| t.sample(b)).collect();
        assert_eq!(Tensor::concat_batch(&parts).unwrap(), t);
    }
}
