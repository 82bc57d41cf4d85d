use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one primitive.
///
/// Returns one gradient per parent, in parent order, each shaped like the
/// corresponding input.
pub trait BackwardOp {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

struct Node {
    name: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in creation order, which is a
/// topological order, so the reverse pass is a reverse index walk.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: VarId) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            name: "leaf",
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a primitive application. Rejects non-finite outputs.
    pub fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor,
        parents: &[VarId],
        op: Box<dyn BackwardOp>,
    ) -> Result<VarId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name.to_string() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn op_name(&self, v: VarId) -> &'static str {
        self.nodes[v.0].name
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, output: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[output.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.nodes[output.0].value.shape()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_out) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&grad_out, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.name);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "{}", node.name);
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the output gradient for leaves only
            if node.parents.is_empty() {
                grads[idx] = Some(grad_out);
            }
        }
        Ok(Gradients { grads })
    }

    /// Re-arms the tape so `backward` may run again.
    pub fn reset(&mut self) {
        self.consumed = false;
    }
}
