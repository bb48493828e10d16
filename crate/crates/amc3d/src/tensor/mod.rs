//! Dense-tensor and reverse-mode autodiff substrate.
//!
//! Everything numeric in the crate — backbone, LoRA paths, slice fusion,
//! the segmentation decoder and the losses — is built on [`Tensor`] plus
//! the tape in [`graph`]. Training runs in f32 by default; gradient
//! verification switches the whole stack to f64 through the [`Scalar`]
//! parameter.

pub mod checkpoint;
pub mod dispatch;
pub mod fdcheck;
pub mod graph;

use crate::error::{shape_err, AmcError, Result};
use std::fmt;

/// Element dtype tag used in the binary containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    I32 = 2,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::I32),
            _ => None,
        }
    }
}

/// Real scalar the numeric stack is generic over (f32 or f64).
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + ndarray::LinalgScalar
    + std::ops::Neg<Output = Self>
    + std::ops::SubAssign
    + std::ops::AddAssign
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f32::to_le_bytes(self));
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f64::to_le_bytes(self));
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn byte_width() -> usize {
        8
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AmcError::Contract(format!(
                "tensor shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Tensor<T> {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, vals: &[f64]) -> Result<Tensor<T>> {
        Tensor::new(shape, vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar view of a 0-d (or 1-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(AmcError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret shape without touching data. Bit-identical round trip.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Serialized little-endian payload (used for checksums and containers).
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::byte_width());
        for &v in &self.data {
            v.to_le_bytes(&mut out);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_round_trip_bit_identical() {
        let t = Tensor::<f32>::from_f64_slice(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap().reshaped(vec![2, 3]).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
