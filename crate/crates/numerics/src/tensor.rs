use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Populated by `backward`. On leaf parameters it accumulates across
    /// calls until explicitly zeroed; on interior nodes it is consumed
    /// during the backward sweep.
    pub grad: Option<Vec<f64>>,
    /// Leaf flag set by `Tensor::param`.
    pub requires_grad: bool,
    /// True when this node or any ancestor is a parameter; prunes backward.
    pub needs_grad: bool,
    pub parents: Vec<Tensor>,
    pub op: Op,
}

/// Dense row-major f64 tensor. Cloning copies the handle, not the buffer.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(TensorError::DataLength {
            len: data.len(),
            shape: shape.to_vec(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            op: "new",
            expected: "positive dimensions",
            got: shape.to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub(crate) fn make(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, op: Op) -> Tensor {
        let needs_grad = parents
            .iter()
            .any(|p| p.inner.borrow().requires_grad || p.inner.borrow().needs_grad);
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad,
                parents,
                op,
            })),
        }
    }

    /// Constant tensor outside the gradient graph.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_len(&data, shape)?;
        Ok(Tensor::make(data, shape.to_vec(), Vec::new(), Op::Leaf))
    }

    /// Leaf parameter; `backward` accumulates into its grad buffer.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar shape is valid")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the underlying buffer.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.borrow().data[idx]
    }

    /// In-place write, used by optimizers and finite-difference probes.
    pub fn set_value_at(&self, idx: usize, v: f64) {
        self.inner.borrow_mut().data[idx] = v;
    }

    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: inner.shape.clone(),
            });
        }
        inner.data = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Adds into the grad buffer, allocating zeros on first use. Public so
    /// trainers can merge externally reduced gradients before an optimizer
    /// step.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad.as_mut() {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta.iter()) {
                    *gv += dv;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    fn participates(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.needs_grad
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable parameter; call repeatedly without zeroing to sum
/// contributions (e.g. over a mini-batch).
pub fn backward(loss: &Tensor) -> Result<()> {
    {
        let inner = loss.inner.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: inner.shape.clone(),
            });
        }
    }
    if !loss.participates() {
        return Ok(());
    }

    // Iterative DFS postorder over parents; reversed postorder is a valid
    // topological order (consumers before producers).
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child_idx)) = stack.pop() {
        let next_parent = {
            let inner = node.inner.borrow();
            inner.parents.get(child_idx).cloned()
        };
        match next_parent {
            Some(parent) => {
                stack.push((node, child_idx + 1));
                if parent.participates() && !visited.contains(&parent.id()) {
                    visited.insert(parent.id());
                    stack.push((parent, 0));
                }
            }
            None => order.push(node),
        }
    }

    loss.accumulate_grad(&[1.0]);
    for node in order.iter().rev() {
        let is_leaf = {
            let inner = node.inner.borrow();
            matches!(inner.op, Op::Leaf)
        };
        if is_leaf {
            continue;
        }
        // Consume the interior grad so a later backward pass on the same
        // graph starts clean while leaf grads keep accumulating.
        let grad_out = {
            let mut inner = node.inner.borrow_mut();
            inner.grad.take()
        };
        let Some(grad_out) = grad_out else { continue };
        crate::ops::backprop_node(node, &grad_out);
    }
    Ok(())
}
