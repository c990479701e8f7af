//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the rest of the crate needs: matrix products,
//! the elementwise table, softmax over the last axis, layer norm, a padded
//! 3x3 convolution, embedding lookup and a fused cross-entropy. Everything
//! is stored in row-major `Vec<f64>`; there is no broadcasting beyond
//! scalars and the explicit row/column-vector ops. The single switch point
//! for a float32 build would be the `Scalar` alias below.
//!
//! Graphs are recorded implicitly: every op that touches a tensor with
//! `requires_grad` stores its inputs, and [`Tensor::backward`] replays the
//! reachable nodes in reverse creation order, which doubles as a valid
//! topological order and makes gradients deterministic.
//!
//! ```
//! use hisem::tensor::Tensor;
//! let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).requires_grad();
//! let loss = x.mul(&x).unwrap().sum_all();
//! loss.backward().unwrap();
//! assert_eq!(x.grad_vec().unwrap(), vec![2.0, 4.0, 6.0]); // d/dx sum(x^2) = 2x
//! ```

mod ops;

pub mod gradcheck;

pub use gradcheck::grad_check;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{HisemError, Result};

/// Storage scalar for all math in the crate.
pub type Scalar = f64;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled (forward-only evaluation).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn recording() -> bool {
    !NO_GRAD.with(|c| c.get())
}

pub(crate) enum Op {
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Silu(Tensor),
    /// y = a*x + b with constant a, b.
    Affine(Tensor, Scalar),
    /// y = x * s where s is a one-element tensor.
    MulScalarT(Tensor, Tensor),
    SoftmaxLast(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: Scalar,
    },
    Conv3x3 {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    },
    SumAll(Tensor),
    /// y[i, :] = x[i, :] + b
    AddRowVec(Tensor, Tensor),
    ConcatCols(Tensor, Tensor),
    MeanRows(Tensor),
    Diag(Tensor),
    SumLast(Tensor),
    /// y[i, :] = x[i, :] / r[i]
    DivColVec(Tensor, Tensor),
    /// y[i, :] = x[i, :] * c[i]
    MulColVec(Tensor, Tensor),
    SliceCol(Tensor, usize),
    /// Elementwise product with a constant mask (no gradient to the mask).
    MulConst(Tensor, Rc<Vec<Scalar>>),
    /// Elementwise sum with a constant (attention masks).
    AddConst(Tensor),
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Tensor,
        start: usize,
    },
    /// Weighted sum over rows of (logsumexp(row) - row[target]).
    CeLogits {
        logits: Tensor,
        targets: Vec<usize>,
        weights: Vec<Scalar>,
    },
    Reshape(Tensor),
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<Scalar>>,
    grad: RefCell<Option<Vec<Scalar>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Handle to a node in the computation graph. Cloning is cheap and shares
/// storage; tying two parameters together is done by cloning the handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(data: Vec<Scalar>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(data: Vec<Scalar>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires = recording() && op_requires_grad(&op);
        let op = if requires { Some(op) } else { None };
        Tensor::new(data, shape, requires, op)
    }

    /// Leaf tensor from raw data; `requires_grad` is off.
    pub fn from_vec(data: Vec<Scalar>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::new(data, shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(v: Scalar) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    /// Marks this leaf as a differentiation target and returns it.
    pub fn requires_grad(self) -> Tensor {
        assert!(self.inner.op.is_none(), "requires_grad only applies to leaves");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.inner.data.borrow().clone()),
                grad: RefCell::new(None),
                requires_grad: true,
                op: None,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn to_vec(&self) -> Vec<Scalar> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<Scalar>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the stored values (parameter updates between steps).
    pub fn set_data(&self, data: &[Scalar]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[Scalar]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Same values, cut from the graph, no gradient flows through.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    /// Accumulates gradients of `self` (a scalar) into every reachable
    /// `requires_grad` tensor. Repeated calls add without zeroing.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(HisemError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Collect reachable nodes, then process in reverse creation order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                for input in op_inputs(op) {
                    stack.push(input.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.inner.id);

        let mut grads: std::collections::HashMap<u64, Vec<Scalar>> = std::collections::HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for node in nodes.iter().rev() {
            let Some(out_grad) = grads.remove(&node.inner.id) else {
                continue;
            };
            if node.inner.requires_grad {
                let mut g = node.inner.grad.borrow_mut();
                match g.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&out_grad) {
                            *a += b;
                        }
                    }
                    None => *g = Some(out_grad.clone()),
                }
            }
            if let Some(op) = &node.inner.op {
                ops::backward_op(op, node, &out_grad, &mut grads);
            }
        }
        Ok(())
    }
}

fn op_requires_grad(op: &Op) -> bool {
    op_inputs(op).iter().any(|t| t.inner.requires_grad)
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Matmul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulScalarT(a, b)
        | Op::AddRowVec(a, b)
        | Op::ConcatCols(a, b)
        | Op::DivColVec(a, b)
        | Op::MulColVec(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Silu(a)
        | Op::Affine(a, _)
        | Op::SoftmaxLast(a)
        | Op::SumAll(a)
        | Op::MeanRows(a)
        | Op::Diag(a)
        | Op::SumLast(a)
        | Op::SliceCol(a, _)
        | Op::MulConst(a, _)
        | Op::AddConst(a)
        | Op::Reshape(a) => vec![a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Conv3x3 { x, w, b } => vec![x, w, b],
        Op::Embedding { table, .. } => vec![table],
        Op::SliceRows { x, .. } => vec![x],
        Op::CeLogits { logits, .. } => vec![logits],
    }
}

pub(crate) fn add_into(acc: &mut std::collections::HashMap<u64, Vec<Scalar>>, t: &Tensor, g: Vec<Scalar>) {
    match acc.entry(t.inner.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}


/// Indices and values of the `k` largest entries, values descending,
/// ties broken by ascending index.
pub fn top_k(scores: &[Scalar], k: usize) -> Result<Vec<(usize, Scalar)>> {
    if k == 0 || k > scores.len() {
        return Err(HisemError::InvalidArgument(format!(
            "top_k: k={} out of range for {} scores",
            k,
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx.into_iter().take(k).map(|i| (i, scores[i])).collect())
}
