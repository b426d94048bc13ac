//! Dense tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! The engine is deliberately small: row-major buffers, a linear tape that is
//! rebuilt for every training step, and exactly the operations the encoders
//! and decoders need. Everything is generic over [`Real`] so the same model
//! code runs in `f32` for training and in `f64` for gradient checks.

mod adam;
mod gumbel;
mod kernels;
mod ops;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState, StepDecay};
pub use gumbel::{gumbel_noise, gumbel_softmax_sample};
pub use ops::{softmax_with_temperature, NormStats};
pub use params::{Bound, ParamGroup, ParamId, ParameterStore};
pub use tape::{Grads, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Name used in file headers.
    const DTYPE: &'static str;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `c[m×n] += a[m×k] · b[k×n]` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: [isize; 2],
        b: &[Self],
        sb: [isize; 2],
        c: &mut [Self],
        sc: [isize; 2],
    );
}

macro_rules! real_impl {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                sa: [isize; 2],
                b: &[$t],
                sb: [isize; 2],
                c: &mut [$t],
                sc: [isize; 2],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(
                    a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
                    "gemm buffers too small"
                );
                // SAFETY: callers pass dense row-major or transposed views whose
                // strides stay inside the slices checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa[0],
                        sa[1],
                        b.as_ptr(),
                        sb[0],
                        sb[1],
                        1.0,
                        c.as_mut_ptr(),
                        sc[0],
                        sc[1],
                    );
                }
            }
        }
    };
}

real_impl!(f32, "f32", matrixmultiply::sgemm);
real_impl!(f64, "f64", matrixmultiply::dgemm);

/// A row-major dense array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![F::zero(); n]).expect("zeros shape")
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new([1], vec![v]).expect("scalar")
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    /// Marks the tensor as trainable by allocating a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![F::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    pub(crate) fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![F::zero(); self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Converts between precisions, dropping the gradient.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: None,
        }
    }
}
