//! Dense row-major tensors and boolean attention masks.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Floating point element type. Training runs in `f32`; `f64` exists so that
/// finite-difference gradient checks are meaningful.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + core::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense N-dimensional array. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(shape_err("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis; 1 for a scalar.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. to run an `f32` model in `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }
}

/// Boolean allow-mask used by attention and pooling; `true` means the
/// position participates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allow: Vec<bool>) -> Result<Self> {
        if numel(&shape) != allow.len() {
            return Err(shape_err("mask", &shape, &[allow.len()]));
        }
        Ok(Mask { shape, allow })
    }

    pub fn all(shape: &[usize], value: bool) -> Self {
        Mask {
            shape: shape.to_vec(),
            allow: vec![value; numel(shape)],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allow(&self) -> &[bool] {
        &self.allow
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.allow.len() {
            return Err(shape_err("mask reshape", &self.shape, shape));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            allow: self.allow,
        })
    }

    /// Materializes this mask at `target` using numpy broadcasting rules
    /// (missing leading axes and size-1 axes repeat).
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Mask> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let offsets = broadcast_offsets(&self.shape, target)
            .ok_or_else(|| shape_err("mask broadcast", &self.shape, target))?;
        Ok(Mask {
            shape: target.to_vec(),
            allow: offsets.into_iter().map(|o| self.allow[o]).collect(),
        })
    }

    /// Elementwise AND of two masks after broadcasting them to a common shape.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        let target = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| shape_err("mask intersect", &self.shape, &other.shape))?;
        let a = self.broadcast_to(&target)?;
        let b = other.broadcast_to(&target)?;
        Ok(Mask {
            shape: target,
            allow: a.allow.iter().zip(&b.allow).map(|(&x, &y)| x && y).collect(),
        })
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `target`, the flat index of `src` it reads from.
fn broadcast_offsets(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let pad = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let t = target[pad + i];
        if src[i] == t {
            strides[pad + i] = acc;
        } else if src[i] != 1 {
            return None;
        }
        acc *= src[i];
    }
    let total = numel(target);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}
