//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Every operation that
//! consumes at least one tensor with `requires_grad` records a node holding
//! its parents and a backward closure; [`Tensor::backward`] walks the
//! resulting DAG once in reverse topological order.
//!
//! Storage is row-major. Binary elementwise ops accept identical shapes or a
//! single-element operand on either side; nothing else broadcasts.

mod gradcheck;
mod nnops;
mod ops;

pub use gradcheck::{check_gradients, check_gradients_wrt, numeric_gradient, relative_error, relu_margin};
pub use nnops::{multi_head_attention, AttentionOutput, AttentionScaling};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

/// Backward closure: receives the output gradient, the output values and the
/// parent handles, returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    tag: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Builds a constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Builds a leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} must be non-empty and positive"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != len {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} holds {numel} elements but data has {len}"),
            ));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data, false, None)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data, false, None)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = if low < high {
            let dist = Uniform::new(low, high).expect("low < high");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![low; n]
        };
        Self::from_parts(shape.to_vec(), data, false, None)
    }

    /// Copy of this tensor's values as a fresh leaf with gradients enabled.
    pub fn to_param(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), true, None)
    }

    /// Copy of this tensor's values with no graph linkage.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Operation tag of the node that produced this tensor, `None` for leaves.
    pub fn op_tag(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.tag)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.0.data.borrow()[flat]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values in place (used by optimizers and checkpoint loading).
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::shape("assign", &self.0.shape, &[values.len()]));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Records a new node. `parents` decide whether the result tracks gradients.
    pub(crate) fn from_op(
        tag: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::from_parts(shape, data, true, Some(Op { tag, parents, backward }))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients add into whatever is already stored on each node, so calling
    /// this twice without [`Tensor::zero_grad`] doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage("loss is not connected to any parameter".into()));
        }

        let order = self.topo_order();
        let index: HashMap<*const Node, usize> = order.iter().enumerate().map(|(i, t)| (Rc::as_ptr(&t.0), i)).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; order.len()];
        grads[order.len() - 1] = Some(vec![1.0]);

        for i in (0..order.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &order[i];
            if let Some(op) = &node.0.op {
                let parent_grads = {
                    let out = node.0.data.borrow();
                    (op.backward)(&g, &out, &op.parents)
                };
                debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.tag);
                for (parent, pg) in op.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    let j = index[&Rc::as_ptr(&parent.0)];
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            let mut stored = node.0.grad.borrow_mut();
            match stored.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *stored = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through gradient-tracking edges, parents first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: std::collections::HashSet<*const Node> = Default::default();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let ptr = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(ptr) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of distinct graph nodes reachable from this tensor.
    pub fn graph_size(&self) -> usize {
        self.topo_order().len()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_tag())
            .field("data", &preview)
            .finish()
    }
}

/// Clears stored gradients on every tensor in `params`.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a Tensor>) {
    for p in params {
        p.zero_grad();
    }
}
