//! Define-by-run gradient tape.
//!
//! Every differentiable op appends a node holding its value and a backward
//! rule. Node ids are assigned in execution order, so the tape is always in
//! topological order and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradient accumulator handed to backward rules.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Zero-initialised gradient buffer for `id`, or `None` if the node does
    /// not require a gradient.
    pub fn slot(&mut self, id: NodeId) -> Option<&mut [f64]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub fn add(&mut self, id: NodeId, g: &[f64]) {
        if let Some(slot) = self.slot(id) {
            slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, None)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Rc::new(data),
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records the result of an op. The backward rule is dropped when no
    /// parent needs a gradient.
    pub(crate) fn record<'t>(
        &'t self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var<'t>],
        backward: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let bw: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(shape, data, requires_grad, bw)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient. Earlier gradients on this tape are discarded.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::DetachedGraph);
        }
        let nodes = self.nodes.borrow();
        let n = nodes[loss.id].value.len();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &nodes[i].backward {
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                    nodes: &nodes[..i],
                };
                bw(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        // Nodes that need a gradient but were unreachable get zeros.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.node().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Vec<f64>> {
        self.node().value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let node = self.node();
        Tensor::new(node.shape.clone(), node.value.as_ref().clone()).expect("node shape")
    }

    pub fn item(&self) -> f64 {
        self.node().value[0]
    }

    /// Gradient from the most recent `backward`, if this node required one.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Some(Tensor::new(self.shape(), g.clone()).expect("grad shape"))
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::DetachedGraph)
        }
    }
}
