use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries for inputs
/// that do not may be returned as `None`.
pub trait Function {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Define-by-run record of a forward pass. Nodes are appended in execution
/// order, so the vector order is already topological.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a free leaf, optionally tracked for gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            func: None,
            param: None,
            requires_grad,
        })
    }

    /// Records the current value of a stored parameter. Frozen parameters and
    /// buffers enter the tape as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = p.requires_grad();
        self.push_node(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            func: None,
            param: requires_grad.then_some(id),
            requires_grad,
        })
    }

    /// Appends the result of an operation. The backward rule is dropped when
    /// no input is tracked.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], func: impl Function + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Node {
            value,
            inputs: inputs.to_vec(),
            func: requires_grad.then(|| Box::new(func) as Box<dyn Function>),
            param: None,
            requires_grad,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; leaf gradients accumulate on the tape across calls.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.inputs.is_empty() {
                *g = None;
            }
        }
        accumulate(&mut self.grads[loss.0], &[1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(func) = &node.func else {
                continue;
            };
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let grads_in = func.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(grads_in.len(), node.inputs.len());
            let input_ids: Vec<usize> = node.inputs.iter().map(|v| v.0).collect();
            for ((j, g), need) in input_ids.into_iter().zip(grads_in).zip(needs) {
                if let (Some(g), true) = (g, need) {
                    debug_assert_eq!(g.len(), self.nodes[j].value.numel());
                    accumulate(&mut self.grads[j], &g);
                }
            }
        }

        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if let Some(id) = node.param {
                if let Some(g) = g.take() {
                    store.accumulate_grad(id, &g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
