//! Dense row-major tensors over f32 or f64.
//!
//! Training runs in f32; gradient checking casts the same model to f64.
//! Everything downstream of this module is generic over [`Real`] so both
//! precisions share one code path.

use crate::error::{CoreError, Result};
use crate::rng::Stream;

/// Scalar element type: f32 for training, f64 for gradient oracles.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor; `data.len() == shape.iter().product()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| F::of(v)));
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// Elementwise i.i.d. normal draws.
    pub fn randn(shape: Vec<usize>, stream: &mut Stream, mean: f64, sd: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::of(stream.normal_scaled(mean, sd)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row/column counts of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(CoreError::contract(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<F> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision cast (f32 <-> f64).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    /// Bitwise equality, stricter than `PartialEq` around NaN/-0.0.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Max |a - b| over elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, RootSeed};

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_deterministic_per_stream() {
        let seed = RootSeed(9);
        let a = Tensor::<f32>::randn(vec![3, 4], &mut seed.stream(&[tag::INIT_TIP]), 0.0, 0.02);
        let b = Tensor::<f32>::randn(vec![3, 4], &mut seed.stream(&[tag::INIT_TIP]), 0.0, 0.02);
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn cast_roundtrip_f32() {
        let t = Tensor::<f32>::from_rows(&[vec![1.5, -2.25], vec![0.0, 3.0]]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(t.bits_eq(&back));
    }
}
