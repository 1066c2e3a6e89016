//! Operation tape and reverse-mode traversal.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs for its vector-Jacobian product. Nodes only ever
//! reference earlier nodes, so a single reverse sweep over the node list
//! visits operations in reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind<T> {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(T),
    Square,
    Scale(T),
    AddScalar,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
    },
    Unary {
        kind: UnaryKind<T>,
        input: usize,
    },
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    AvgDown {
        input: usize,
        factor: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Mse(usize, usize),
    BceLogits {
        logits: usize,
        targets: Tensor<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Replicate {
        input: usize,
        height: usize,
        width: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub param: Option<ParamKey>,
}

/// Ordered record of the operations executed in one forward pass.
///
/// A tape is single-threaded; build one per training step and drop it once
/// gradients have been extracted.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    /// Records a value whose gradient will be reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true, None)
    }

    pub(crate) fn param_leaf(&self, value: Tensor<T>, key: ParamKey) -> Var<'_, T> {
        self.push_leaf(value, true, Some(key))
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamKey>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Gradients of a value used several times are summed. The sweep order
    /// is fixed by the tape, so repeated calls give bit-identical results.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let tensor = Tensor::from_parts(node.value.shape().to_vec(), grad);
                if let Some(key) = node.param {
                    match out.params.get_mut(&key) {
                        Some(acc) => accumulate(acc.data_mut(), tensor.data()),
                        None => {
                            out.params.insert(key, tensor.clone());
                        }
                    }
                }
                out.leaves.insert(id, tensor);
                continue;
            }
            for (input, g) in ops::vjp(&nodes, id, &grad)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => accumulate(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn accumulate<T: Scalar>(acc: &mut [T], g: &[T]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    pub(crate) params: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf created by [`Tape::leaf`]
    /// or a trainable parameter binding. `None` when the loss does not
    /// depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }
}
