//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`] and returns a
//! [`Var`] handle. Nodes are only ever appended, so their indices already form
//! a topological order: [`Tape::backward`] walks them once, in reverse, and
//! accumulates gradients into every node that requires one.
//!
//! ```
//! use memefuse_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;

pub use ops::Activation;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: ops::Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    param_vars: RefCell<Vec<Option<Var>>>,
    grads: RefCell<Option<Vec<Option<Vec<F>>>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, ops::Op::Leaf, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// gradients from every use of the parameter sum into one buffer.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(Some(var)) = self.param_vars.borrow().get(id.0) {
            return *var;
        }
        let var = self.push(
            store.get(id).value.clone(),
            ops::Op::Leaf,
            true,
            Some(id),
        );
        let mut vars = self.param_vars.borrow_mut();
        if vars.len() <= id.0 {
            vars.resize(id.0 + 1, None);
        }
        vars[id.0] = Some(var);
        var
    }

    pub fn value(&self, var: Var) -> Tensor<F> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn item(&self, var: Var) -> Result<F> {
        self.nodes.borrow()[var.0].value.item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    fn push(
        &self,
        value: Tensor<F>,
        op: ops::Op<F>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Appends a computed node; it requires grad iff any input does.
    fn record(&self, value: Tensor<F>, op: ops::Op<F>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, op, requires_grad, None)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Fails if a previous sweep's gradients are still held; call
    /// [`Tape::zero_grad`] to run it again.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut slot = self.grads.borrow_mut();
        if slot.is_some() {
            return Err(Error::BackwardTwice);
        }

        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            ops::backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        *slot = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward sweep with respect to `var`.
    ///
    /// Nodes the loss does not depend on report an all-zero gradient.
    /// Returns `None` if backward has not run.
    pub fn grad(&self, var: Var) -> Option<Tensor<F>> {
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let shape = self.shape(var);
        Some(match grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Drops the gradients of the last sweep.
    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    pub(crate) fn param_grads(&self) -> Result<Vec<(ParamId, Tensor<F>)>> {
        if self.grads.borrow().is_none() {
            return Err(Error::InvalidArgument(
                "no gradients: backward has not run".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for var in self.param_vars.borrow().iter().flatten() {
            let id = nodes[var.0].param.expect("param leaf");
            out.push((id, self.grad(*var).expect("gradients present")));
        }
        Ok(out)
    }
}
