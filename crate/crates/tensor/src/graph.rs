//! Operation tape and reverse-mode replay.
//!
//! Every op appends one node holding its output value and enough context to
//! compute input gradients. Ids are assigned in recording order, so the tape is
//! always topologically sorted and backward is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Conv3 {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Sigmoid(usize),
    UpsampleNearest {
        input: usize,
        factor: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2(usize),
    Reshape(usize),
    ChannelsToTokens(usize),
    TokensToChannels(usize),
    SqDist {
        z: usize,
        v: usize,
    },
    GatherRows {
        table: usize,
        index: Vec<usize>,
    },
    StraightThrough {
        soft: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3 { .. } => "conv3",
            Op::GroupNorm { .. } => "group_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Softmax { .. } => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ChannelsToTokens(_) => "channels_to_tokens",
            Op::TokensToChannels(_) => "tokens_to_channels",
            Op::SqDist { .. } => "sq_dist",
            Op::GatherRows { .. } => "gather_rows",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// A recorded computation. One graph per forward pass; drop it afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a leaf holding a copy of `t`; it tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::Contract(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push_leaf(shape, data, false))
    }

    /// Records a leaf that receives gradient.
    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push_leaf(shape, data, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            !inputs
                .iter()
                .all(|&i| self.nodes[i].data.iter().all(|v| v.is_finite()))
                || data.iter().all(|v| v.is_finite()),
            "{} produced a non-finite value from finite inputs",
            op.kind()
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape matches data")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded,
    /// so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if n.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            ops::propagate(&self.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient slot of `id`, allocating zeros
/// on first touch. Inputs that do not track gradients are skipped.
pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    f(slot);
}
