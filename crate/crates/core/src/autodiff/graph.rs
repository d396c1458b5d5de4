use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::ops::{self, Op};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
    pub(crate) grad: Option<Tensor>,
}

/// Define-by-run trace. Nodes are appended in evaluation order, so the node
/// index is already a topological order and `backward` walks it in reverse.
///
/// A graph is built and differentiated by one thread; build a fresh graph per
/// step.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Non-finite checks are on in debug builds (which include the test
    /// profile) and off in release builds.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Result<Var<'_>> {
        self.leaf(Rc::new(t), true)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.leaf(Rc::new(t), false)
    }

    pub(crate) fn leaf(&self, t: Rc<Tensor>, requires_grad: bool) -> Result<Var<'_>> {
        if self.check_finite && !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        }))
    }

    pub(crate) fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            op,
            grad: None,
        }))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates the gradient slot of every trainable leaf with
    /// `d loss / d leaf`. Slots from an earlier call are cleared first, so
    /// calling `backward` on different losses of one trace is allowed.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(
            std::ptr::eq(loss.graph, self),
            "backward called with a Var from another graph"
        );
        {
            let mut nodes = self.nodes.borrow_mut();
            let shape = nodes[loss.id].value.shape().to_vec();
            if nodes[loss.id].value.len() != 1 {
                return Err(Error::NotScalar(shape));
            }
            for n in nodes.iter_mut() {
                n.grad = None;
            }
            if !nodes[loss.id].requires_grad {
                return Ok(());
            }
            nodes[loss.id].grad = Some(Tensor::ones(&shape));
        }

        for id in (0..=loss.id).rev() {
            let g = {
                let mut nodes = self.nodes.borrow_mut();
                let n = &mut nodes[id];
                if !n.requires_grad || matches!(n.op, Op::Leaf) {
                    continue;
                }
                match n.grad.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let contributions = {
                let nodes = self.nodes.borrow();
                ops::backward(&nodes, id, &g)
            };
            let mut nodes = self.nodes.borrow_mut();
            for (input, contrib) in contributions {
                let slot = &mut nodes[input];
                if !slot.requires_grad {
                    continue;
                }
                match slot.grad.as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => slot.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient of a trainable leaf after `backward`. `None` when the leaf
    /// was not reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Like [`Graph::grad`] but reports unreached leaves as zeros.
    pub fn grad_or_zeros(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Value of a single-element var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    /// Value-preserving copy with no trace parent: nothing downstream of the
    /// returned var can send gradient into `self` or its ancestors.
    pub fn detach(self) -> Var<'g> {
        let value = self.value();
        self.graph
            .leaf(value, false)
            .expect("detached value was already validated")
    }
}
