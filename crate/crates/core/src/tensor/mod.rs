//! Dense tensors and a small reverse-mode autodiff graph.
//!
//! Tensors are rank 1..=4, row-major. Training runs in `f32`; every op is
//! generic over [`Elem`] so the gradient checker can run the same code in
//! `f64`, where central differences are accurate enough to be an oracle.

mod gemm;
pub mod gradcheck;
mod graph;
mod loss;
mod ops;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use loss::Layout;

pub const MAX_RANK: usize = 4;

/// Scalar element type of a tensor.
pub trait Elem: Float + Default + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn widen(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary (row, col) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

impl Elem for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        f64::from(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        gemm::sgemm(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides)
    }
}

impl Elem for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        gemm::dgemm(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides)
    }
}

/// A dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Elem = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "rank {} outside 1..={MAX_RANK}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Dimension(format!("zero-sized dimension in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<E: Elem> Tensor<E> {
    pub fn new(dims: &[usize], data: Vec<E>) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![E::zero(); n])
    }

    pub fn full(dims: &[usize], value: E) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![value; n])
    }

    pub fn scalar(value: E) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Overwrite the values in place. Length and finiteness are re-checked.
    pub fn assign(&mut self, values: &[E]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "assign of {} values into tensor of {}",
                values.len(),
                self.data.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assigned values".into()));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    /// Mutable access for in-place numeric updates. Callers are responsible
    /// for keeping values finite; optimizers check after each step.
    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Toggle gradient tracking. Enabling allocates a zeroed buffer;
    /// disabling drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![E::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = E::zero());
        }
    }

    /// Add `scale * delta` into the gradient buffer. No-op when gradients are
    /// not tracked.
    pub fn accumulate_grad(&mut self, delta: &[E], scale: E) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::Dimension(format!(
                "gradient of {} values for tensor of {}",
                delta.len(),
                g.len()
            )));
        }
        for (dst, d) in g.iter_mut().zip(delta) {
            *dst = *dst + scale * *d;
        }
        Ok(())
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Convert element type, dropping gradient state.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| F::lit(v.widen())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.widen().to_bits() == b.widen().to_bits())
    }
}

impl Tensor<f32> {
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for d in &self.dims {
            h.update(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}
