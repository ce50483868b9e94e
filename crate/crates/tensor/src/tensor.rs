use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Result, TensorError};
use crate::ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` without recording any operations on this thread.
///
/// Results computed inside the closure never require gradients, so frozen
/// forward passes do not retain their intermediates.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _reset = Reset;
    f()
}

pub fn is_grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) op: Option<Op>,
}

/// Dense row-major `f64` array that may participate in a differentiation graph.
///
/// Cloning a `Tensor` is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Result of an operation: records `op` only if an input needs gradients.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let track = is_grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if track {
            Tensor::build(data, shape, true, Some(op))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(TensorError::Contract(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(data, &[rows.len(), cols]).expect("matrix shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(data, &[n]).expect("vector shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::build(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(vec![v; numel(shape)], shape).expect("full shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::build(data, vec![n, n], false, None)
    }

    /// Learnable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Tensor::new(data, shape)?.to_param())
    }

    /// Fresh leaf with the same values that records gradients.
    pub fn to_param(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// Fresh leaf with the same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// Row count of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            1 => 1,
            _ => self.0.shape[0],
        }
    }

    /// Column count of a matrix; the length of a vector.
    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[r * c..(r + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} entries", self.numel());
        self.0.data[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from this scalar.
    ///
    /// Every requires-grad leaf reachable from `self` receives an accumulated
    /// gradient (zeros if no path carries signal). Calling twice without
    /// [`Tensor::zero_grad`] sums the two contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && seen.insert(input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        // Inputs are always created before their consumers.
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in &order {
            let g = grads
                .remove(&t.id())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    op.backward(t, &g, &mut |input: &Tensor, contrib: Vec<f64>| {
                        if !input.requires_grad() {
                            return;
                        }
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), contrib);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
