use std::collections::BTreeMap;
use std::fmt;

use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a primitive needs to compute its vector-Jacobian product.
pub struct BackwardContext<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
    /// `needs_grad[i]` is false when input `i` cannot reach any gradient
    /// consumer; implementations may return `None` for it.
    pub needs_grad: Vec<bool>,
}

/// A differentiable primitive. The forward value is computed by the caller
/// and handed to [`Tape::apply`]; the tape keeps the function around for the
/// reverse sweep together with whatever it saved.
pub trait Function: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (same length as that input), or
    /// `None` where no gradient flows.
    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Vec<f64>>>>;
}

enum NodeKind {
    Leaf,
    Param(ParamId),
    Op {
        func: Box<dyn Function>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    kind: NodeKind,
    requires_grad: bool,
}

/// Define-by-run record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Adjoints of the leaves and parameters reached by a reverse sweep.
/// Intermediate adjoints are released as soon as they are consumed.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), NodeKind::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), NodeKind::Leaf, true)
    }

    /// Records a parameter read. Repeated reads share one node, so every use
    /// accumulates into the same adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.detached(), NodeKind::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The parameter a variable was created from, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].kind {
            NodeKind::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records `func` applied to `inputs` with precomputed `output`.
    pub fn apply(&mut self, func: Box<dyn Function>, inputs: &[Var], output: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            output,
            NodeKind::Op {
                func,
                inputs: inputs.to_vec(),
            },
            requires_grad,
        )
    }

    /// Reverse sweep from a scalar `loss`, visiting nodes in strict reverse
    /// execution order.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Op { func, inputs } = &node.kind else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_output) = adjoints[idx].take() else {
                continue;
            };
            let ctx = BackwardContext {
                inputs: inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad_output: &grad_output,
                needs_grad: inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let grads = func.backward(&ctx)?;
            if grads.len() != inputs.len() {
                return Err(TensorError::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    func.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (input, grad) in inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if grad.len() != self.nodes[input.0].value.numel() {
                    return Err(TensorError::Shape {
                        op: func.name(),
                        lhs: self.nodes[input.0].value.shape().to_vec(),
                        rhs: vec![grad.len()],
                    });
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { adjoints })
    }

    /// Runs [`Tape::gradients`] and adds each parameter's adjoint into its
    /// gradient slot in `store`. Gradients accumulate across calls; call
    /// [`ParamStore::zero_grads`] between optimizer steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(adj) = grads.get(v) {
                p.tensor.accumulate_grad(adj)?;
            } else if p.tensor.grad().is_none() {
                p.tensor.accumulate_grad(&vec![0.0; p.tensor.numel()])?;
            }
        }
        Ok(grads)
    }
}
