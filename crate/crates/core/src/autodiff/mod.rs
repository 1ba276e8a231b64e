//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order
//! for the backward sweep.

mod backward;
mod kernels;
mod ops;

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub use kernels::matmul_into;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row attention windows: row `r` attends to key rows
/// `start..start + len`.
pub type Windows = Rc<[(usize, usize)]>;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Transpose(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    RepeatRows(Var),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        windows: Windows,
        probs: Vec<f64>,
    },
    WindowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    WindowMean {
        x: Var,
        width: usize,
    },
    WindowSoftmaxPool {
        scores: Var,
        x: Var,
        width: usize,
        weights: Vec<f64>,
    },
    Bilinear {
        hs: Var,
        u: Var,
        he: Var,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
pub struct Graph<'p> {
    pub(crate) nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: SplitMix64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters, in evaluation mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            training: false,
            rng: SplitMix64::new(0),
        }
    }

    /// A graph reading parameters from `store`, in evaluation mode.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            ..Self::new()
        }
    }

    /// Switches to training mode; dropout masks are drawn from `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = SplitMix64::new(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph created without a parameter store");
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    /// Consumes the graph, keeping only the parameter gradients. Lets the
    /// caller release its borrow of the parameter store before updating it.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<f64>)> {
        self.nodes
            .into_iter()
            .filter_map(|n| match (n.op, n.grad) {
                (Op::Param(id), Some(g)) => Some((id, g)),
                _ => None,
            })
            .collect()
    }

    /// Inverted dropout driven by the graph's own mode and generator.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let training = self.training;
        let mut rng = std::mem::replace(&mut self.rng, SplitMix64::new(0));
        let out = self.dropout_with(x, p, training, &mut rng);
        self.rng = rng;
        out
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` at training
    /// time and evaluation is the identity.
    pub fn dropout_with(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        Ok(self.mul_const(x, Rc::new(mask)))
    }
}
