//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Operations that touch a tensor with `requires_grad` record a
//! backward closure; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into each node's grad buffer.
//!
//! Precision is a type parameter: `Tensor<f32>` (the default) for training
//! and inference, `Tensor<f64>` for finite-difference gradient checks.
//!
//! ```
//! use fdr_core::tensor::Tensor;
//!
//! let x = Tensor::<f64>::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
//! let y = Tensor::<f64>::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
//! let loss = x.mul(&y).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![4.0, 5.0, 6.0]);
//! ```

mod grad_check;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grad_check::{grad_check, grad_check_with, GradCheckOptions};
pub use ops::LOG_CLAMP_EPS;
pub(crate) use ops::{gelu_fwd, LAYER_NORM_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T = f32> {
    node: Arc<Node<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.node.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                op: "new",
                shape,
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape, data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                op: "param",
                shape,
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape, data, true, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, vec![T::zero(); n], false, None)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value], false, None)
    }

    /// Same data and shape, as a fresh leaf with the given grad flag.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data().to_vec(), requires_grad, None)
    }

    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    /// Converts to another precision as a new leaf, keeping the grad flag.
    pub fn to_precision<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::from_parts(self.shape().to_vec(), data, self.requires_grad(), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += *v),
            None => *slot = Some(g),
        }
    }

    /// Builds the result of an op, recording `backward` only when some
    /// parent needs a gradient and recording is enabled.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if track {
            Self::from_parts(
                shape,
                data,
                true,
                Some(GradFn {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Reverse-mode pass from a scalar. Gradients are added into existing
    /// buffers, so calling twice without [`Tensor::zero_grad`] doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let index: HashMap<*const Node<T>, usize> = order
            .iter()
            .enumerate()
            .map(|(i, t)| (Arc::as_ptr(&t.node), i))
            .collect();
        let mut pending: Vec<Option<Vec<T>>> = vec![None; order.len()];
        *pending.last_mut().expect("loss is in its own graph") = Some(vec![T::one()]);

        for i in (0..order.len()).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &order[i];
            if let Some(gf) = &node.node.grad_fn {
                let parent_grads = (gf.backward)(&g);
                debug_assert_eq!(parent_grads.len(), gf.parents.len());
                for (p, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    let j = index[&Arc::as_ptr(&p.node)];
                    match pending[j].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += *v),
                        None => pending[j] = Some(pg),
                    }
                }
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }

    /// Post-order over nodes needing gradients: parents precede children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Arc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&Arc::as_ptr(&p.node)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
