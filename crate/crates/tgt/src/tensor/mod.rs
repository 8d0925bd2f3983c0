//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable once created. Each op records its operands on the
//! implicit graph; [`Tensor::backward`] linearizes that graph into a
//! [`Tape`] (topological order) and walks it in exact reverse, accumulating
//! gradients into `requires_grad` leaves. Graphs are rebuilt every step and
//! dropped afterwards.
//!
//! Every op validates that its output is finite; NaN/Inf raises an error
//! naming the op instead of propagating.

pub mod io;
pub mod kernels;
pub mod ops;
pub mod rng;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
pub use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// trainable leaf: backward deposits gradients here
    requires_grad: bool,
    /// true when some trainable leaf is reachable through this node
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Cheap-to-clone handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}(id={})", self.shape(), self.id())
    }
}

fn check_shape(shape: &[usize], data_len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    if numel != data_len {
        return Err(Error::shape(format!(
            "shape {shape:?} wants {numel} elements, data has {data_len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Non-trainable leaf (a constant input).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                needs_grad: false,
                grad: RefCell::new(None),
                op: None,
            }),
        })
    }

    /// Trainable leaf: gradients accumulate here after `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: true,
                needs_grad: true,
                grad: RefCell::new(None),
                op: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(vec![0.0; n], shape).expect("zeros")
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(vec![v; n], shape).expect("full")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[1]).expect("scalar")
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, name: &str) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(name, "non-finite value in op output"));
        }
        let needs_grad = op.operands().iter().any(|t| t.needs_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad: false,
                needs_grad,
                // frozen subgraphs record no op, so they free immediately
                grad: RefCell::new(None),
                op: if needs_grad { Some(op) } else { None },
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }
    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }
    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }
    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Cut the graph: same values, no history, not trainable.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.data.clone(), &self.inner.shape).expect("detach")
    }

    fn accumulate_leaf_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g.iter()) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient pass from a scalar loss. Gradients accumulate on
    /// every reachable `requires_grad` leaf; call repeatedly to sum.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.needs_grad() {
            return Ok(()); // nothing trainable reachable
        }
        let tape = Tape::record(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in tape.nodes.iter().rev() {
            let Some(dy) = grads.remove(&node.id()) else { continue };
            if node.inner.requires_grad {
                node.accumulate_leaf_grad(&dy);
            }
            let Some(op) = node.inner.op.as_ref() else { continue };
            op.backward(node, &dy, &mut |operand: &Tensor, g: Vec<f64>| {
                debug_assert_eq!(g.len(), operand.numel());
                match grads.entry(operand.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, v) in e.get_mut().iter_mut().zip(g.iter()) {
                            *a += v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
            });
        }
        Ok(())
    }
}

/// Linearized operation record: nodes in topological order, so operands
/// always precede their consumers and the backward pass is the exact
/// reverse walk.
pub struct Tape {
    pub nodes: Vec<Tensor>,
}

impl Tape {
    fn record(root: &Tensor) -> Tape {
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut nodes = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![Visit::Enter(root.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    if let Some(op) = t.inner.op.as_ref() {
                        for operand in op.operands() {
                            if operand.needs_grad() && !seen.contains(&operand.id()) {
                                stack.push(Visit::Enter(operand.clone()));
                            }
                        }
                    }
                }
                Visit::Exit(t) => nodes.push(t),
            }
        }
        Tape { nodes }
    }
}

/// Max relative error between analytic gradients of `f` at `x` and central
/// finite differences with step `h`. The error at each coordinate is
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::contract(format!("grad_check step {h} outside [1e-6, 1e-3]")));
    }
    let leaf = Tensor::param(x.data().to_vec(), x.shape())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::contract("grad_check target must be scalar"));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::constant(plus, x.shape())?)?.item();
        let fm = f(&Tensor::constant(minus, x.shape())?)?.item();
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("grad_check", "non-finite function value"));
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
