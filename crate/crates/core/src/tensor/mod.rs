//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and row-major. A [`Tensor`] is a cheap handle
//! (reference-counted) to an immutable value buffer plus a gradient slot;
//! operations executed through a [`Tape`] record the backward rules needed
//! to accumulate `dL/dx` into every leaf created with `requires_grad`.
//!
//! A tape lives for exactly one forward/backward cycle. Backward rules
//! capture only the buffers they actually need, so large intermediates are
//! freed as soon as the forward pass stops referencing them.

mod gradcheck;
mod kernels;
mod optim;
mod pool;
mod tape;

pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckReport};
pub use optim::{SgdConfig, SgdOptimizer};
pub use tape::{LinearPart, Reduction, Tape};

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use pool::PoolVec;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {a_rows}x{a_cols} and {b_rows}x{b_cols}")]
    Shape {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("{op}: index {index} out of range for {bound} rows")]
    Bounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

pub(crate) type Data = Rc<RefCell<PoolVec>>;

/// Gradient-routing node shared between a tensor handle and the tape
/// records that reference it. Holds no value data.
pub(crate) struct Node {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    /// Leaf flag set by the user; gradients are retained here after backward.
    requires_grad: bool,
    /// True when this tensor or any ancestor requires a gradient.
    needs_grad: bool,
    grad: RefCell<Option<PoolVec>>,
}

impl Node {
    pub(crate) fn len(&self) -> usize {
        self.rows * self.cols
    }

    /// Add the contribution into the gradient buffer, allocating on first
    /// touch.
    pub(crate) fn accumulate(&self, contribution: &[f64]) {
        debug_assert_eq!(contribution.len(), self.len());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => {
                let mut fresh = PoolVec::with_capacity(contribution.len());
                fresh.extend_from_slice(contribution);
                *slot = Some(fresh);
            }
        }
    }

    /// Move a whole buffer in as the first gradient contribution, or add it
    /// elementwise when one exists already.
    pub(crate) fn accumulate_owned(&self, contribution: PoolVec) {
        debug_assert_eq!(contribution.len(), self.len());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution.iter()) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    pub(crate) fn take_grad(&self) -> Option<PoolVec> {
        self.grad.borrow_mut().take()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.needs_grad
    }
}

/// Dense 2-D array of 64-bit floats participating in recorded computation.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
    pub(crate) data: Data,
}

impl Tensor {
    pub(crate) fn output_pooled(rows: usize, cols: usize, data: PoolVec, needs_grad: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor {
            node: Rc::new(Node {
                rows,
                cols,
                requires_grad: false,
                needs_grad,
                grad: RefCell::new(None),
            }),
            data: Rc::new(RefCell::new(data)),
        }
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Contract(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self::from_parts(rows, cols, data, requires_grad))
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                rows,
                cols,
                requires_grad,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
            }),
            data: Rc::new(RefCell::new(PoolVec::from_vec(data))),
        }
    }

    /// Result of a tape operation; `needs_grad` is propagated from inputs.
    pub(crate) fn output(rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Self {
        Self::output_pooled(rows, cols, PoolVec::from_vec(data), needs_grad)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(1, 1, vec![value], false)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Contract(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data, false)
    }

    /// Uniform values in `[lo, hi)` from the given generator.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(lo, hi);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self::from_parts(rows, cols, data, false)
    }

    /// Learnable parameter initialized uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn param_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self::from_parts(rows, cols, data, true)
    }

    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(rows, cols, data, true)
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.node.rows, self.node.cols)
    }

    pub fn len(&self) -> usize {
        self.node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.node.rows == 1 && self.node.cols == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.data.borrow(), |p| &**p)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.borrow().to_vec()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows() && col < self.cols(), "index out of range");
        self.data.borrow()[row * self.cols() + col]
    }

    /// Scalar payload of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on a {}x{} tensor", self.rows(), self.cols());
        self.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Replace the value buffer in place (optimizer steps, checkpoint loads,
    /// finite-difference probes). Must not be called while a tape recorded
    /// against this tensor is still pending backward.
    pub(crate) fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.len(), "set_data shape mismatch");
        *self.data.borrow_mut() = PoolVec::from_vec(data);
    }

    pub(crate) fn map_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.data.borrow_mut());
    }

    pub fn all_finite(&self) -> bool {
        self.data.borrow().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.rows())
            .field("cols", &self.cols())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(2, 2, vec![1.0; 3], false).is_err());
        let t = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t.at(1, 0), 3.0);
    }

    #[test]
    fn uniform_is_seeded_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(4, 3, 0.0, 1.0, &mut a);
        let y = Tensor::uniform(4, 3, 0.0, 1.0, &mut b);
        assert_eq!(x.to_vec(), y.to_vec());
        assert!(x.to_vec().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn param_uniform_scales_with_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::param_uniform(16, 4, 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(w.to_vec().iter().all(|&v| v.abs() <= bound));
        assert!(w.requires_grad());
    }
}
