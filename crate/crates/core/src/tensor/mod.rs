//! Dense row-major tensors and the differentiable op set used by the networks.
//!
//! Activations are `N×C×H×W` in 2D and `N×C×H×W×D` in 3D, depth last, so a 3D
//! weight `n×m×h×w×d` differs from its 2D source only by trailing axes.

pub mod autograd;
pub mod conv;
pub mod elementwise;
mod gemm;
pub mod interp;
pub mod norm;
pub mod pool;

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use conv::ConvSpec;
pub use pool::PoolSpec;

/// Floating point element type. `f32` is the production type; `f64` backs the
/// high-precision gradient verification mode.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: T) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    /// Spatial extents of an activation (`[H, W]` or `[H, W, D]`).
    pub fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    /// Views a 2D or 3D activation as `(N, C, H, W, D)` with `D = 1` in 2D.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w, 1]),
            [n, c, h, w, d] => Ok([n, c, h, w, d]),
            _ => shape_err(format!(
                "expected a 4D or 5D activation, got {:?}",
                self.shape
            )),
        }
    }

    /// Maximum absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return shape_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    /// Depth slice `k` of a 5D activation, as a 4D activation.
    pub fn depth_slice(&self, k: usize) -> Result<Tensor<T>> {
        let [n, c, h, w, d] = match *self.shape.as_slice() {
            [n, c, h, w, d] => [n, c, h, w, d],
            _ => return shape_err(format!("depth_slice needs 5D, got {:?}", self.shape)),
        };
        if k >= d {
            return shape_err(format!("slice {k} out of depth {d}"));
        }
        let data = self.data.iter().skip(k).step_by(d).copied().collect();
        Tensor::from_vec(vec![n, c, h, w], data)
    }

    /// Stacks 4D activations along a new trailing depth axis.
    pub fn stack_depth(slices: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = slices
            .first()
            .ok_or_else(|| crate::Error::Shape("stack of zero slices".into()))?;
        if first.rank() != 4 || slices.iter().any(|s| s.shape != first.shape) {
            return shape_err("stack_depth needs equal 4D slices");
        }
        let d = slices.len();
        let plane = first.len();
        let mut data = vec![T::zero(); plane * d];
        for (k, s) in slices.iter().enumerate() {
            for (i, &v) in s.data.iter().enumerate() {
                data[i * d + k] = v;
            }
        }
        let mut shape = first.shape.clone();
        shape.push(d);
        Tensor::from_vec(shape, data)
    }

    /// Copy of batch item `i` as a batch of one.
    pub fn batch_item(&self, i: usize) -> Result<Tensor<T>> {
        let n = self.shape[0];
        if i >= n {
            return shape_err(format!("batch index {i} out of {n}"));
        }
        let per = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| crate::Error::Shape("empty batch".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        shape[0] = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return shape_err(format!(
                    "batch items differ: {:?} vs {:?}",
                    t.shape, first.shape
                ));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(shape, data)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
