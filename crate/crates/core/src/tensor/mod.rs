//! Dense tensors, the reverse-mode tape, and the optimizer.
//!
//! Image tensors use `N×H×W×C` layout (channels innermost). Rank-3 `H×W×C`
//! inputs are accepted by the spatial ops and treated as a batch of one.

mod adam;
mod checkpoint;
mod gemm;
mod graph;
mod init;
mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{bail, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Activation, BatchNormStats, Gradients, Graph, Mode, PoolKind, Var, BN_EPSILON};
pub use init::{he_uniform, zeros_like_shape};

/// Floating point element type of a tensor. `f32` is used for training,
/// `f64` for gradient checking.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn cast(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        gemm::check_extent(m, k, a.len(), a_strides);
        gemm::check_extent(k, n, b.len(), b_strides);
        gemm::check_extent(m, n, c.len(), c_strides);
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            )
        }
    }

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        gemm::check_extent(m, k, a.len(), a_strides);
        gemm::check_extent(k, n, b.len(), b_strides);
        gemm::check_extent(m, n, c.len(), c_strides);
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            )
        }
    }

    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major value grid of rank ≤ 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            bail!(Tensor, "rank {} exceeds the supported maximum of 4", shape.len());
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Tensor,
                "shape {:?} holds {} values but {} were supplied",
                shape,
                expected,
                data.len()
            );
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => bail!(Tensor, "item() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.len() > 4 {
            bail!(
                Tensor,
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    /// `(n, h, w, c)` view of a rank-3 or rank-4 image tensor.
    pub fn image_dims(&self) -> Result<(usize, usize, usize, usize)> {
        image_dims(&self.shape)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }
}

pub(crate) fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => bail!(Tensor, "expected an H×W×C or N×H×W×C tensor, got shape {:?}", shape),
    }
}
