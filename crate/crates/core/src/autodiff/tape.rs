use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded operation.
///
/// `grads[i]` is `Some` only for inputs that need a gradient; implementations
/// accumulate (`+=`) into it.
pub trait Op {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f32], grads: &mut [Option<Vec<f32>>]);
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op>>,
    needs_grad: bool,
    param: Option<String>,
}

/// Records operations in execution order for one reverse pass.
///
/// Confined to a single thread; build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            inputs: vec![],
            op: None,
            needs_grad: true,
            param: None,
        })
    }

    /// A leaf with no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            inputs: vec![],
            op: None,
            needs_grad: false,
            param: None,
        })
    }

    /// Loads a named parameter from the store as a gradient-receiving leaf.
    pub fn param(&self, store: &ParameterStore, name: &str) -> Result<Var<'_>> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        Ok(self.push(Node {
            value,
            inputs: vec![],
            op: None,
            needs_grad: true,
            param: Some(name.to_string()),
        }))
    }

    /// Records `output = op(inputs)`.
    pub fn record<'t>(&'t self, op: Box<dyn Op>, inputs: &[Var<'t>], output: Tensor) -> Var<'t> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].needs_grad)
        };
        self.push(Node {
            value: output,
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: Some(op),
            needs_grad,
            param: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one call.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g_out) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let mut slots: Vec<Option<Vec<f32>>> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].needs_grad.then(|| vec![0.0; nodes[i].value.len()]))
                .collect();
            op.backward(&inputs, &node.value, &g_out, &mut slots);
            for (&i, slot) in node.inputs.iter().zip(slots) {
                if let Some(g) = slot {
                    match &mut grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(g),
                    }
                }
            }
        }

        let mut by_id = HashMap::new();
        let mut by_param = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &nodes[id];
            if node.op.is_some() || !node.needs_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            match &node.param {
                Some(name) => {
                    let entry = by_param.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    entry.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                None => {
                    by_id.insert(id, g);
                }
            }
        }
        Ok(Gradients { by_id, by_param })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> Result<f32> {
        self.value().item()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Vec<f32>>,
    by_param: HashMap<String, Vec<f32>>,
}

impl Gradients {
    /// Gradient with respect to a leaf created with [`Tape::var`].
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f32]> {
        self.by_id.get(&v.id).map(Vec::as_slice)
    }

    pub fn param(&self, name: &str) -> Option<&[f32]> {
        self.by_param.get(name).map(Vec::as_slice)
    }

    /// Writes parameter gradients into the store. Parameters the loss does
    /// not reach receive zeros.
    pub fn apply_to(self, store: &mut ParameterStore) {
        let mut by_param = self.by_param;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let len = store.value(&name).map(Tensor::len).unwrap_or(0);
            let g = by_param.remove(&name).unwrap_or_else(|| vec![0.0; len]);
            store.set_grad(&name, g);
        }
    }
}
