//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! The networks in this crate are small enough that a dedicated tape with
//! exactly the operators they need (convolution, normalization, pooling,
//! nearest resize, elementwise math, reductions) is simpler and easier to
//! verify than a general framework: every backward rule here is covered by a
//! finite-difference check in the test suite.
//!
//! Design notes:
//! * Single-sample tensors: feature maps are `[C, H, W]`, vectors `[C]`,
//!   scalars `[1]`. There is no batch axis; batching is done by gradient
//!   accumulation in the trainer.
//! * The tape is append-only. Node ids are topologically ordered by
//!   construction, so backpropagation is one reverse sweep.
//! * Nodes whose inputs do not require gradients skip closure capture
//!   entirely, which makes inference passes allocation-light.
//! * All transcendental elementwise math runs in `f64` regardless of the
//!   tensor scalar type, so `f32` training and `f64` gradient checks share
//!   one code path.

pub mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::ops::AddAssign;
use std::rc::Rc;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar types the tape can differentiate through (`f32`, `f64`).
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + AddAssign + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Accumulates gradient contributions flowing to parent nodes.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut [Option<ArrayD<S>>],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// Add `contribution` to the gradient of node `id`.
    pub fn add(&mut self, id: usize, contribution: ArrayD<S>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &mut GradSink<S>)>;

struct Node<S: Scalar> {
    value: Rc<ArrayD<S>>,
    needs_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Append-only computation tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape<S: Scalar> {
    nodes: Rc<RefCell<Vec<Node<S>>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an input tensor. `needs_grad` marks trainable leaves.
    pub fn leaf(&self, data: ArrayD<S>, needs_grad: bool) -> Tensor<S> {
        self.push(data, needs_grad, None)
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&self, data: ArrayD<S>) -> Tensor<S> {
        self.leaf(data, false)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<S>,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor<S> {
        self.push_rc(Rc::new(value), needs_grad, backward)
    }

    /// Variant of [`Tape::push`] for operators whose backward closure captures
    /// the output value (sigmoid, softplus, ...).
    pub(crate) fn push_rc(
        &self,
        value: Rc<ArrayD<S>>,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor<S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, needs_grad, backward });
        Tensor { tape: self.clone(), id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<ArrayD<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar output. Returns per-node gradients for
    /// every node that required them.
    pub fn backward(&self, output: &Tensor<S>) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward starts from a scalar node, got shape {:?}",
            nodes[output.id].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; nodes.len()];
        grads[output.id] = Some(ArrayD::from_elem(nodes[output.id].value.raw_dim(), S::one()));
        for id in (0..=output.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(backward) = &nodes[id].backward {
                // Detach the accumulated gradient before handing out mutable
                // access to the remaining slots.
                let grad_out = grads[id].take().expect("checked above");
                let mut sink = GradSink { grads: &mut grads };
                backward(&grad_out, &mut sink);
                grads[id] = Some(grad_out);
            }
        }
        Grads { grads }
    }
}

/// Handle to a tensor on a tape.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    pub(crate) tape: Tape<S>,
    pub id: usize,
}

impl<S: Scalar> Tensor<S> {
    /// Borrow the tensor value.
    pub fn value(&self) -> Rc<ArrayD<S>> {
        self.tape.value(self.id)
    }

    /// Copy of the value as an owned array.
    pub fn to_array(&self) -> ArrayD<S> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar payload of a `[1]` tensor.
    pub fn scalar(&self) -> S {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        *v.iter().next().expect("non-empty")
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes)
    }
}

/// Result of a backward sweep.
pub struct Grads<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the swept output with respect to node `id`, if any reached it.
    pub fn get(&self, id: usize) -> Option<&ArrayD<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

