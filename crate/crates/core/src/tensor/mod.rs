//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are rank-1 or rank-2, row-major, always `f64`. Operations are
//! recorded on a [`Tape`]; calling [`Tape::backward`] on a scalar walks the
//! recorded operations in reverse and accumulates `d loss / d tensor` into
//! every tensor that requires gradients. Gradients accumulate across
//! backward calls until [`Tensor::zero_grad`] is invoked, matching the
//! usual optimizer loop.
//!
//! A tape is single-threaded by construction (`Rc` handles are `!Send`);
//! independent tapes may run on independent threads.

mod check;
mod lstm;
mod tape;

pub use check::{analytic_grads, check_against_fd, forward_value, grad_check, GradCheckReport};
pub use lstm::{bilstm, lstm_cell, BiLstmOut, BiLstmParams, LstmCellParams};
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Large negative score used to exclude positions from a softmax. Kept
/// finite so the no-NaN/no-Inf invariant holds; `exp` of it underflows to
/// exactly zero after max subtraction, so masked positions get weight 0.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a dense array. Cloning is cheap and aliases the same
/// storage, which is how parameters stay live across tapes.
#[derive(Clone, Debug)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::contract(format!(
            "tensor rank must be 1 or 2, got shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {numel} elements but {len} were provided"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        validate_shape(&shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
        })
    }

    /// Constant tensor: no gradient is ever accumulated into it.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel], false).expect("zeros: shape")
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![1.0; numel], false).expect("ones: shape")
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false).expect("scalar")
    }

    /// Scalar trainable parameter, shape `[1]`.
    pub fn scalar_param(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], true).expect("scalar param")
    }

    /// Parameter initialized from U(-limit, limit).
    pub fn param_uniform(shape: Vec<usize>, limit: f64, rng: &mut impl Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::new(shape, data, true).expect("param_uniform: shape")
    }

    /// Parameter initialized from N(0, std^2) via Box-Muller.
    pub fn param_gaussian(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gaussian(rng) * std).collect();
        Tensor::new(shape, data, true).expect("param_gaussian: shape")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// (rows, cols): rank-1 tensors are treated as single columns.
    pub fn dims2(&self) -> (usize, usize) {
        let b = self.inner.borrow();
        match b.shape.len() {
            1 => (b.shape[0], 1),
            _ => (b.shape[0], b.shape[1]),
        }
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow the forward values. The borrow must not outlive any mutation.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() on tensor of shape {:?}", b.shape);
        b.data[0]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims2();
        self.inner.borrow().data[row * c + col]
    }

    /// Current gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values (shape must be unchanged).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut b = self.inner.borrow_mut();
        assert_eq!(b.data.len(), data.len(), "set_data: length mismatch");
        b.data = data;
    }

    pub fn set_elem(&self, idx: usize, v: f64) {
        self.inner.borrow_mut().data[idx] = v;
    }

    pub fn elem(&self, idx: usize) -> f64 {
        self.inner.borrow().data[idx]
    }

    /// Independent copy of values and flags; gradient is not copied.
    pub fn deep_clone(&self) -> Tensor {
        let b = self.inner.borrow();
        Tensor::new(b.shape.clone(), b.data.clone(), b.requires_grad).expect("deep_clone")
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut b = self.inner.borrow_mut();
        let n = b.data.len();
        debug_assert_eq!(n, contribution.len());
        let grad = b.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Identity key for graph bookkeeping.
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; rejects the degenerate u = 0 draw.
    loop {
        let u: f64 = rng.gen_range(0.0..1.0);
        if u <= f64::MIN_POSITIVE {
            continue;
        }
        let v: f64 = rng.gen_range(0.0..1.0);
        return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
    }
}

#[cfg(test)]
mod tests;
