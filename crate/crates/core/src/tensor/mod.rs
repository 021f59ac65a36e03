//! Dense row-major tensors with a dynamic reverse-mode tape.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations that
//! consume at least one tensor requiring gradients record a node holding
//! their inputs and a backward closure; [`Tensor::backward`] walks those
//! nodes in reverse topological order.

mod conv;
mod float;
pub mod gradcheck;
pub mod init;
pub mod io;
mod linalg;
mod nn;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::Conv2dOptions;
pub use float::{DType, Float};
pub use linalg::gemm;
pub use nn::{ResizeKind, IGNORE_LABEL};
pub use ops::ElementwiseKind;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub type TensorId = u64;

pub(crate) struct BackwardArgs<'a, T: Float> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    pub grad: &'a [T],
}

/// Returns one optional gradient per input, each the size of that input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Float> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

pub struct Tensor<T: Float> {
    inner: Arc<Inner<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![], false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Fresh leaf sharing no graph history with `self`.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Fresh leaf copy with the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), requires_grad, None)
    }

    /// Records an operation output. A node is attached only when gradients
    /// are enabled and some input requires them.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(data, shape, true, Some(Node { op, inputs, backward }))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::Shape(format!("expected a rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion; the result is a detached leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect();
        Tensor::build(data, self.inner.shape.clone(), false, None)
    }

    /// Nodes reachable from `self`, inputs before consumers.
    pub fn graph(&self) -> Graph<T> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // Iterative post-order DFS; graphs can be thousands of nodes deep.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    /// Reverse-mode differentiation of a scalar loss.
    ///
    /// Gradients of every reachable leaf that requires them are returned and
    /// also accumulated into that leaf's gradient slot.
    pub fn backward(&self) -> Result<GradMap<T>> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::DetachedGraph);
        }
        let graph = self.graph();
        let mut pending: HashMap<TensorId, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        let mut leaves = HashMap::new();
        for t in graph.order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.inner.node {
                None => {
                    {
                        let mut slot = t.inner.grad.lock().expect("grad lock poisoned");
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                            None => *slot = Some(g.clone()),
                        }
                    }
                    leaves.insert(t.id(), g);
                }
                Some(node) => {
                    let args = BackwardArgs { inputs: &node.inputs, output: t.data(), grad: &g };
                    let grads = (node.backward)(&args);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "op {}", node.op);
                    for (input, gi) in node.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel(), "op {}", node.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(GradMap { grads: leaves })
    }
}

/// Recorded operations reachable from a tensor in topological order.
pub struct Graph<T: Float> {
    order: Vec<Tensor<T>>,
}

impl<T: Float> Graph<T> {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.order
    }

    /// Every producer precedes its consumers and each tensor appears once.
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<TensorId, usize> =
            self.order.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        if pos.len() != self.order.len() {
            return false;
        }
        self.order.iter().enumerate().all(|(i, t)| match &t.inner.node {
            None => true,
            Some(n) => n.inputs.iter().filter(|x| x.requires_grad()).all(|x| pos[&x.id()] < i),
        })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradMap<T: Float> {
    grads: HashMap<TensorId, Vec<T>>,
}

impl<T: Float> GradMap<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
