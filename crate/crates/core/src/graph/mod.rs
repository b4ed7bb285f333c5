//! Static computation graphs with deterministic forward evaluation and
//! reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of primitive operations; a node may only
//! reference earlier nodes, so index order is a valid topological order and
//! the graph is acyclic by construction. Shapes are not fixed when building:
//! they are inferred on every [`Graph::evaluate`] so one graph serves any batch
//! size. [`Graph::backward`] accumulates `d output / d parameter` into the
//! [`ParamStore`] gradients.

mod kernels;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use kernels::{BN_MOMENTUM, NORM_EPS};

use crate::params::{BufferId, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} `{op}`{scope}: {detail}")]
    Shape { node: usize, op: &'static str, scope: String, detail: String },
    #[error("non-finite value produced at node {node} `{op}`{scope}")]
    NonFinite { node: usize, op: &'static str, scope: String },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("label {label} at batch row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: f64, classes: usize },
    #[error("backward requested before node {0} was evaluated")]
    NotEvaluated(usize),
    #[error("backward output node {node} is not scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    Param(ParamId),
    /// `[M,K] x [K,N]`, or batched `[G,M,K] x [G,K,N]`.
    Matmul(NodeId, NodeId),
    /// Grouped 1-D convolution, stride 1. `x: [B,Cin,T]`, `w: [Cout, Cin/groups, K]`.
    Conv1d { x: NodeId, w: NodeId, groups: usize, pad_left: usize, pad_right: usize },
    /// Normalizes axis 1 over all other axes.
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: BufferId, var: BufferId },
    /// Normalizes the last axis.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Elu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Window = stride over the last axis; a trailing remainder is dropped.
    AvgPool { x: NodeId, window: usize },
    /// Inverted dropout: kept activations are divided by `1 - rate`.
    Dropout { x: NodeId, rate: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds `b: [N]` along the last axis.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    /// At most one `-1` entry, inferred from the element count.
    Reshape(NodeId, Vec<isize>),
    SwapAxes(NodeId, usize, usize),
    Concat(Vec<NodeId>, usize),
    IndexSelect { x: NodeId, axis: usize, indices: Vec<usize> },
    MeanAxis(NodeId, usize),
    SumAxis(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    /// Identity forward, blocks gradients.
    Detach(NodeId),
    /// `-mean_b logp[b, label_b]` for `logp: [B,K]`, `labels: [B]`.
    Nll { logp: NodeId, labels: NodeId },
    /// Scaled dot-product attention over `[G,N,d]`.
    Attention { q: NodeId, k: NodeId, v: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Elu(_) => "elu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::AvgPool { .. } => "avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::SwapAxes(..) => "swap_axes",
            Op::Concat(..) => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAxis(..) => "sum_axis",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Detach(_) => "detach",
            Op::Nll { .. } => "nll",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta } => {
                vec![*x, *gamma, *beta]
            }
            Op::Elu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Scale(x, _)
            | Op::Reshape(x, _)
            | Op::SwapAxes(x, ..)
            | Op::MeanAxis(x, _)
            | Op::SumAxis(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Detach(x) => vec![*x],
            Op::AvgPool { x, .. } | Op::Dropout { x, .. } | Op::IndexSelect { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::Nll { logp, labels } => vec![*logp, *labels],
            Op::Attention { q, k, v } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
    scope: String,
}

#[derive(Debug, Clone, Default)]
enum Cache {
    #[default]
    None,
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Mask(Vec<f64>),
    Probs(Vec<f64>),
}

/// Named input bindings for one evaluation.
pub type Inputs<'a> = [(&'a str, &'a Tensor)];

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: String,
    values: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Prefix attached to nodes built from now on; shows up in error messages.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Detach(_) => false,
            Op::Nll { logp, .. } => self.nodes[logp.0].requires_grad,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        for i in op.inputs() {
            assert!(i.0 < self.nodes.len(), "node references a later node");
        }
        self.nodes.push(Node { op, requires_grad, scope: self.scope.clone() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(i) = self.nodes.iter().position(|n| n.op == Op::Input(name.to_string())) {
            return NodeId(i);
        }
        self.push(Op::Input(name.to_string()))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(i) = self.nodes.iter().position(|n| n.op == Op::Param(id)) {
            return NodeId(i);
        }
        self.push(Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Matmul(a, b))
    }

    /// Standard 1-D convolution, `w: [Cout, Cin, K]`, "same" padding.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, kernel: usize) -> NodeId {
        self.grouped_conv1d(x, w, 1, kernel)
    }

    /// Per-channel temporal convolution with `multiplier` filters per input
    /// channel, `w: [C * multiplier, 1, K]`, "same" padding.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, channels: usize, kernel: usize) -> NodeId {
        self.grouped_conv1d(x, w, channels, kernel)
    }

    /// Channel mixing with a `[Cout, Cin, 1]` kernel.
    pub fn pointwise_conv1d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.grouped_conv1d(x, w, 1, 1)
    }

    pub fn grouped_conv1d(&mut self, x: NodeId, w: NodeId, groups: usize, kernel: usize) -> NodeId {
        let pad_left = (kernel - 1) / 2;
        let pad_right = kernel - 1 - pad_left;
        self.push(Op::Conv1d { x, w, groups, pad_left, pad_right })
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: BufferId,
        var: BufferId,
    ) -> NodeId {
        self.push(Op::BatchNorm { x, gamma, beta, mean, var })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Elu(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(x))
    }

    pub fn avg_pool(&mut self, x: NodeId, window: usize) -> NodeId {
        self.push(Op::AvgPool { x, window })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        self.push(Op::Dropout { x, rate })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[isize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    pub fn swap_axes(&mut self, x: NodeId, a: usize, b: usize) -> NodeId {
        self.push(Op::SwapAxes(x, a, b))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn index_select(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> NodeId {
        self.push(Op::IndexSelect { x, axis, indices: indices.to_vec() })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::MeanAxis(x, axis))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumAxis(x, axis))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x))
    }

    pub fn nll(&mut self, logp: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::Nll { logp, labels })
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
        self.push(Op::Attention { q, k, v })
    }

    /// `x @ w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]` (rows flattened).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, in_dim: usize) -> NodeId {
        let flat = self.reshape(x, &[-1, in_dim as isize]);
        let y = self.matmul(flat, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).and_then(Tensor::item)
    }

    /// Attention probabilities `[G, N, M]` cached by the last evaluation of an
    /// attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match (self.nodes.get(id.0).map(|n| &n.op), self.caches.get(id.0)) {
            (Some(Op::Attention { .. }), Some(Cache::Probs(p))) => Some(p),
            _ => None,
        }
    }

    /// Evaluates every node.
    pub fn evaluate(
        &mut self,
        store: &mut ParamStore,
        inputs: &Inputs<'_>,
        mode: Mode,
        seed: u64,
    ) -> Result<(), GraphError> {
        let all: Vec<NodeId> = (0..self.nodes.len()).map(NodeId).collect();
        self.evaluate_targets(store, inputs, mode, seed, &all)
    }

    /// Evaluates only the ancestors of `targets` (inclusive). Nodes outside
    /// that set are left unevaluated, so their parameters and batch-norm
    /// buffers are untouched.
    pub fn evaluate_targets(
        &mut self,
        store: &mut ParamStore,
        inputs: &Inputs<'_>,
        mode: Mode,
        seed: u64,
        targets: &[NodeId],
    ) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        for t in targets {
            needed[t.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for j in self.nodes[i].op.inputs() {
                    needed[j.0] = true;
                }
            }
        }
        self.values = vec![None; n];
        self.caches = vec![Cache::None; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let (value, cache) = self.forward_node(i, store, inputs, mode, seed)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                    scope: self.scope_suffix(i),
                });
            }
            self.values[i] = Some(value);
            self.caches[i] = cache;
        }
        Ok(())
    }

    fn scope_suffix(&self, i: usize) -> String {
        if self.nodes[i].scope.is_empty() {
            String::new()
        } else {
            format!(" in `{}`", self.nodes[i].scope)
        }
    }

    fn shape_err(&self, i: usize, detail: String) -> GraphError {
        GraphError::Shape {
            node: i,
            op: self.nodes[i].op.name(),
            scope: self.scope_suffix(i),
            detail,
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("inputs are evaluated before their consumers")
    }

    fn forward_node(
        &self,
        i: usize,
        store: &mut ParamStore,
        inputs: &Inputs<'_>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor, Cache), GraphError> {
        let err = |d: String| self.shape_err(i, d);
        let mk = |shape: Vec<usize>, data: Vec<f64>| {
            Tensor::new(shape, data).map_err(|e| self.shape_err(i, format!("{e}")))
        };
        let out = match &self.nodes[i].op {
            Op::Input(name) => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                (t, Cache::None)
            }
            Op::Param(p) => (store.param(*p).value.clone(), Cache::None),
            Op::Matmul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (sa, sb) = (a.shape(), b.shape());
                match (sa.len(), sb.len()) {
                    (2, 2) if sa[1] == sb[0] => {
                        let mut y = vec![0.0; sa[0] * sb[1]];
                        kernels::matmul_acc(a.data(), b.data(), &mut y, sa[0], sa[1], sb[1]);
                        (mk(vec![sa[0], sb[1]], y)?, Cache::None)
                    }
                    (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                        let mut y = vec![0.0; g * m * n];
                        for gi in 0..g {
                            kernels::matmul_acc(
                                &a.data()[gi * m * k..(gi + 1) * m * k],
                                &b.data()[gi * k * n..(gi + 1) * k * n],
                                &mut y[gi * m * n..(gi + 1) * m * n],
                                m,
                                k,
                                n,
                            );
                        }
                        (mk(vec![g, m, n], y)?, Cache::None)
                    }
                    _ => return Err(err(format!("cannot multiply {sa:?} by {sb:?}"))),
                }
            }
            Op::Conv1d { x, w, groups, pad_left, pad_right } => {
                let (x, w) = (self.val(*x), self.val(*w));
                let geom = self.conv_geom(i, x.shape(), w.shape(), *groups, *pad_left, *pad_right)?;
                let y = kernels::conv1d_forward(x.data(), w.data(), &geom);
                (mk(vec![geom.batch, geom.out_ch, geom.len_out()], y)?, Cache::None)
            }
            Op::BatchNorm { x, gamma, beta, mean, var } => {
                let (xv, gv, bv) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let s = xv.shape();
                if s.len() < 2 {
                    return Err(err(format!("batch norm needs rank >= 2, got {s:?}")));
                }
                let ch = s[1];
                if gv.len() != ch || bv.len() != ch || store.buffer(*mean).value.len() != ch {
                    return Err(err(format!("{ch} channels but affine has {} entries", gv.len())));
                }
                let rest = numel(&s[2..]);
                let train = mode == Mode::Train;
                let mut rm = store.buffer(*mean).value.data().to_vec();
                let mut rv = store.buffer(*var).value.data().to_vec();
                let (y, xhat, inv_std) = kernels::batch_norm_forward(
                    xv.data(),
                    gv.data(),
                    bv.data(),
                    &mut rm,
                    &mut rv,
                    s[0],
                    ch,
                    rest,
                    train,
                );
                if train {
                    store.buffer_mut(*mean).value.data_mut().copy_from_slice(&rm);
                    store.buffer_mut(*var).value.data_mut().copy_from_slice(&rv);
                }
                (mk(s.to_vec(), y)?, Cache::Norm { xhat, inv_std, train })
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gv, bv) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let d = *xv.shape().last().unwrap_or(&0);
                if gv.len() != d || bv.len() != d {
                    return Err(err(format!("feature dim {d} but affine has {} entries", gv.len())));
                }
                let (y, xhat, inv_std) = kernels::layer_norm_forward(xv.data(), gv.data(), bv.data(), d);
                (mk(xv.shape().to_vec(), y)?, Cache::Norm { xhat, inv_std, train: true })
            }
            Op::Elu(x) => (self.val(*x).map(kernels::elu), Cache::None),
            Op::Softmax(x) => {
                let x = self.val(*x);
                let d = *x.shape().last().unwrap_or(&1);
                (mk(x.shape().to_vec(), kernels::softmax_rows(x.data(), d))?, Cache::None)
            }
            Op::LogSoftmax(x) => {
                let x = self.val(*x);
                let d = *x.shape().last().unwrap_or(&1);
                (mk(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), d))?, Cache::None)
            }
            Op::AvgPool { x, window } => {
                let x = self.val(*x);
                let len = *x.shape().last().unwrap_or(&0);
                if *window == 0 || len / window == 0 {
                    return Err(err(format!("window {window} longer than axis of length {len}")));
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().expect("rank >= 1") = len / window;
                (mk(shape, kernels::avg_pool_forward(x.data(), len, *window))?, Cache::None)
            }
            Op::Dropout { x, rate } => {
                let x = self.val(*x);
                if mode == Mode::Eval || *rate == 0.0 {
                    (x.clone(), Cache::None)
                } else {
                    let keep = 1.0 - rate;
                    let mut r = rng::stream(rng::mix(seed, i as u64), 0x64726f70);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let y = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (mk(x.shape().to_vec(), y)?, Cache::Mask(mask))
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if av.shape() != bv.shape() {
                    return Err(err(format!("{:?} vs {:?}", av.shape(), bv.shape())));
                }
                let f: fn(f64, f64) -> f64 = match &self.nodes[i].op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let y = av.data().iter().zip(bv.data()).map(|(p, q)| f(*p, *q)).collect();
                (mk(av.shape().to_vec(), y)?, Cache::None)
            }
            Op::AddBias(x, b) => {
                let (xv, bv) = (self.val(*x), self.val(*b));
                let d = *xv.shape().last().unwrap_or(&0);
                if bv.len() != d {
                    return Err(err(format!("bias of {} entries for last axis {d}", bv.len())));
                }
                let mut y = xv.data().to_vec();
                for row in y.chunks_mut(d) {
                    row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
                }
                (mk(xv.shape().to_vec(), y)?, Cache::None)
            }
            Op::Scale(x, c) => (self.val(*x).map(|v| v * c), Cache::None),
            Op::Reshape(x, spec) => {
                let x = self.val(*x);
                let shape = resolve_shape(spec, x.len()).ok_or_else(|| {
                    err(format!("cannot reshape {:?} to {spec:?}", x.shape()))
                })?;
                (mk(shape, x.data().to_vec())?, Cache::None)
            }
            Op::SwapAxes(x, a, b) => {
                let x = self.val(*x);
                let r = x.rank();
                if *a >= r || *b >= r {
                    return Err(err(format!("axes ({a},{b}) out of range for {:?}", x.shape())));
                }
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(*a, *b);
                let y = kernels::permute(x.data(), x.shape(), &perm);
                let shape = perm.iter().map(|&p| x.shape()[p]).collect();
                (mk(shape, y)?, Cache::None)
            }
            Op::Concat(xs, axis) => {
                let first = self.val(xs[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(err(format!("axis {axis} out of range for {first:?}")));
                }
                let outer = numel(&first[..*axis]);
                let inner = numel(&first[axis + 1..]);
                let mut total = 0;
                for x in xs {
                    let s = self.val(*x).shape();
                    if s.len() != first.len()
                        || s[..*axis] != first[..*axis]
                        || s[axis + 1..] != first[axis + 1..]
                    {
                        return Err(err(format!("{s:?} cannot be concatenated with {first:?}")));
                    }
                    total += s[*axis];
                }
                let mut y = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for x in xs {
                        let v = self.val(*x);
                        let chunk = v.shape()[*axis] * inner;
                        y.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                (mk(shape, y)?, Cache::None)
            }
            Op::IndexSelect { x, axis, indices } => {
                let x = self.val(*x);
                let s = x.shape();
                if *axis >= s.len() || indices.is_empty() || indices.iter().any(|&j| j >= s[*axis]) {
                    return Err(err(format!("indices {indices:?} invalid for axis {axis} of {s:?}")));
                }
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let mut y = Vec::with_capacity(outer * indices.len() * inner);
                for o in 0..outer {
                    for &j in indices {
                        let base = (o * s[*axis] + j) * inner;
                        y.extend_from_slice(&x.data()[base..base + inner]);
                    }
                }
                let mut shape = s.to_vec();
                shape[*axis] = indices.len();
                (mk(shape, y)?, Cache::None)
            }
            Op::MeanAxis(x, axis) | Op::SumAxis(x, axis) => {
                let x = self.val(*x);
                let s = x.shape();
                if *axis >= s.len() {
                    return Err(err(format!("axis {axis} out of range for {s:?}")));
                }
                let (outer, len, inner) = (numel(&s[..*axis]), s[*axis], numel(&s[axis + 1..]));
                let div = if matches!(self.nodes[i].op, Op::MeanAxis(..)) { len as f64 } else { 1.0 };
                let mut y = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        y[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                y.iter_mut().for_each(|v| *v /= div);
                let mut shape: Vec<usize> = s.to_vec();
                shape.remove(*axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                (mk(shape, y)?, Cache::None)
            }
            Op::Sum(x) => (Tensor::scalar(self.val(*x).data().iter().sum()), Cache::None),
            Op::Mean(x) => {
                let x = self.val(*x);
                (Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64), Cache::None)
            }
            Op::Detach(x) => (self.val(*x).clone(), Cache::None),
            Op::Nll { logp, labels } => {
                let (lp, lb) = (self.val(*logp), self.val(*labels));
                let s = lp.shape();
                if s.len() != 2 || lb.len() != s[0] {
                    return Err(err(format!("logp {s:?} with {} labels", lb.len())));
                }
                let k = s[1];
                let mut acc = 0.0;
                for (row, &y) in lb.data().iter().enumerate() {
                    if !(y >= 0.0 && y < k as f64 && libm::trunc(y) == y) {
                        return Err(GraphError::LabelOutOfRange { row, label: y, classes: k });
                    }
                    acc -= lp.data()[row * k + y as usize];
                }
                (Tensor::scalar(acc / s[0] as f64), Cache::None)
            }
            Op::Attention { q, k, v } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (sq, sk, sv) = (qv.shape(), kv.shape(), vv.shape());
                if sq.len() != 3 || sk.len() != 3 || sv != sk || sq[0] != sk[0] || sq[2] != sk[2] {
                    return Err(err(format!("q {sq:?}, k {sk:?}, v {sv:?}")));
                }
                let (g, n, m, d) = (sq[0], sq[1], sk[1], sq[2]);
                let (y, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), g, n, m, d);
                (mk(vec![g, n, d], y)?, Cache::Probs(probs))
            }
        };
        Ok(out)
    }

    fn conv_geom(
        &self,
        i: usize,
        xs: &[usize],
        ws: &[usize],
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<kernels::ConvGeom, GraphError> {
        if xs.len() != 3 || ws.len() != 3 {
            return Err(self.shape_err(i, format!("conv input {xs:?}, kernel {ws:?}")));
        }
        let g = kernels::ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            groups,
            len_in: xs[2],
            kernel: ws[2],
            pad_left,
            pad_right,
        };
        if groups == 0
            || !g.in_ch.is_multiple_of(groups)
            || !g.out_ch.is_multiple_of(groups)
            || ws[1] * groups != g.in_ch
            || g.len_in + pad_left + pad_right < g.kernel
        {
            return Err(self.shape_err(
                i,
                format!("conv input {xs:?} incompatible with kernel {ws:?} in {groups} groups"),
            ));
        }
        Ok(g)
    }

    /// Reverse pass from a scalar node; parameter gradients are overwritten
    /// with `d output / d parameter` (zero for parameters the output does not
    /// depend on).
    pub fn backward(&self, store: &mut ParamStore, output: NodeId) -> Result<(), GraphError> {
        self.backward_seeded(store, &[(output, 1.0)])
    }

    /// Reverse pass for `sum_i weight_i * output_i` over scalar nodes.
    pub fn backward_seeded(
        &self,
        store: &mut ParamStore,
        seeds: &[(NodeId, f64)],
    ) -> Result<(), GraphError> {
        store.zero_grad();
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for &(node, w) in seeds {
            let v = self.value(node).ok_or(GraphError::NotEvaluated(node.0))?;
            if v.len() != 1 {
                return Err(GraphError::NonScalarOutput { node: node.0, shape: v.shape().to_vec() });
            }
            if self.nodes[node.0].requires_grad {
                accumulate(&mut grads[node.0], &[w]);
            }
        }
        for i in (0..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads, store);
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(
        &self,
        i: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let y = self.values[i].as_ref().expect("seeded nodes are evaluated");
        let send = |grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]| {
            if self.needs(id) {
                accumulate(&mut grads[id.0], g);
            }
        };
        match &self.nodes[i].op {
            Op::Input(_) | Op::Detach(_) => {}
            Op::Param(p) => {
                store.param_mut(*p).grad.data_mut().iter_mut().zip(dy).for_each(|(a, b)| *a += b);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (g, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                if self.needs(*a) {
                    let mut da = vec![0.0; av.len()];
                    for gi in 0..g {
                        kernels::matmul_nt_acc(
                            &dy[gi * m * n..(gi + 1) * m * n],
                            &bv.data()[gi * k * n..(gi + 1) * k * n],
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for gi in 0..g {
                        kernels::matmul_tn_acc(
                            &av.data()[gi * m * k..(gi + 1) * m * k],
                            &dy[gi * m * n..(gi + 1) * m * n],
                            &mut db[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(grads, *b, &db);
                }
            }
            Op::Conv1d { x, w, groups, pad_left, pad_right } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let geom = self
                    .conv_geom(i, xv.shape(), wv.shape(), *groups, *pad_left, *pad_right)
                    .expect("validated during forward");
                let (dx, dw) = kernels::conv1d_backward(
                    dy,
                    xv.data(),
                    wv.data(),
                    &geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    send(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    send(grads, *w, &dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let Cache::Norm { xhat, inv_std, train } = &self.caches[i] else { unreachable!() };
                let s = y.shape();
                let (dx, dg, db) = kernels::batch_norm_backward(
                    dy,
                    xhat,
                    inv_std,
                    self.val(*gamma).data(),
                    s[0],
                    s[1],
                    numel(&s[2..]),
                    *train,
                );
                send(grads, *x, &dx);
                send(grads, *gamma, &dg);
                send(grads, *beta, &db);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Cache::Norm { xhat, inv_std, .. } = &self.caches[i] else { unreachable!() };
                let d = *y.shape().last().expect("rank >= 1");
                let (dx, dg, db) =
                    kernels::layer_norm_backward(dy, xhat, inv_std, self.val(*gamma).data(), d);
                send(grads, *x, &dx);
                send(grads, *gamma, &dg);
                send(grads, *beta, &db);
            }
            Op::Elu(x) => {
                let xv = self.val(*x);
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(dy)
                    .map(|((&xi, &yi), &g)| if xi > 0.0 { g } else { g * (yi + 1.0) })
                    .collect();
                send(grads, *x, &dx);
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().expect("rank >= 1");
                send(grads, *x, &kernels::softmax_backward(y.data(), dy, d));
            }
            Op::LogSoftmax(x) => {
                let d = *y.shape().last().expect("rank >= 1");
                send(grads, *x, &kernels::log_softmax_backward(y.data(), dy, d));
            }
            Op::AvgPool { x, window } => {
                let len = *self.val(*x).shape().last().expect("rank >= 1");
                send(grads, *x, &kernels::avg_pool_backward(dy, len, *window));
            }
            Op::Dropout { x, .. } => match &self.caches[i] {
                Cache::Mask(mask) => {
                    let dx: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                    send(grads, *x, &dx);
                }
                _ => send(grads, *x, dy),
            },
            Op::Add(a, b) => {
                send(grads, *a, dy);
                send(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                send(grads, *a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                send(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let da: Vec<f64> = dy.iter().zip(bv.data()).map(|(g, q)| g * q).collect();
                    send(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = dy.iter().zip(av.data()).map(|(g, p)| g * p).collect();
                    send(grads, *b, &db);
                }
            }
            Op::AddBias(x, b) => {
                send(grads, *x, dy);
                let d = self.val(*b).len();
                let mut db = vec![0.0; d];
                for row in dy.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                send(grads, *b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = dy.iter().map(|g| g * c).collect();
                send(grads, *x, &dx);
            }
            Op::Reshape(x, _) => send(grads, *x, dy),
            Op::SwapAxes(x, a, b) => {
                let mut perm: Vec<usize> = (0..y.rank()).collect();
                perm.swap(*a, *b);
                send(grads, *x, &kernels::permute(dy, y.shape(), &perm));
            }
            Op::Concat(xs, axis) => {
                let s = y.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let mut offset = 0;
                for x in xs {
                    let len = self.val(*x).shape()[*axis];
                    if self.needs(*x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * s[*axis] + offset) * inner;
                            dx.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        send(grads, *x, &dx);
                    }
                    offset += len;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let s = self.val(*x).shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let mut dx = vec![0.0; numel(s)];
                for o in 0..outer {
                    for (pos, &j) in indices.iter().enumerate() {
                        let src = (o * indices.len() + pos) * inner;
                        let dst = (o * s[*axis] + j) * inner;
                        for t in 0..inner {
                            dx[dst + t] += dy[src + t];
                        }
                    }
                }
                send(grads, *x, &dx);
            }
            Op::MeanAxis(x, axis) | Op::SumAxis(x, axis) => {
                let s = self.val(*x).shape();
                let (outer, len, inner) = (numel(&s[..*axis]), s[*axis], numel(&s[axis + 1..]));
                let div = if matches!(self.nodes[i].op, Op::MeanAxis(..)) { len as f64 } else { 1.0 };
                let mut dx = vec![0.0; numel(s)];
                for o in 0..outer {
                    for l in 0..len {
                        for t in 0..inner {
                            dx[(o * len + l) * inner + t] = dy[o * inner + t] / div;
                        }
                    }
                }
                send(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                send(grads, *x, &vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                send(grads, *x, &vec![dy[0] / n as f64; n]);
            }
            Op::Nll { logp, labels } => {
                let lp = self.val(*logp);
                let (b, k) = (lp.shape()[0], lp.shape()[1]);
                let mut dx = vec![0.0; lp.len()];
                for (row, &lab) in self.val(*labels).data().iter().enumerate() {
                    dx[row * k + lab as usize] = -dy[0] / b as f64;
                }
                send(grads, *logp, &dx);
            }
            Op::Attention { q, k, v } => {
                let Cache::Probs(probs) = &self.caches[i] else { unreachable!() };
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (sq, sk) = (qv.shape(), kv.shape());
                let (dq, dk, dv) = kernels::attention_backward(
                    dy,
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    sq[0],
                    sq[1],
                    sk[1],
                    sq[2],
                );
                send(grads, *q, &dq);
                send(grads, *k, &dk);
                send(grads, *v, &dv);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn resolve_shape(spec: &[isize], len: usize) -> Option<Vec<usize>> {
    let wild = spec.iter().filter(|&&d| d == -1).count();
    if wild > 1 || spec.iter().any(|&d| d == 0 || d < -1) {
        return None;
    }
    let known: usize = spec.iter().filter(|&&d| d > 0).map(|&d| d as usize).product();
    if known == 0 {
        return None;
    }
    let shape: Vec<usize> = if wild == 1 {
        if !len.is_multiple_of(known) || len / known == 0 {
            return None;
        }
        spec.iter().map(|&d| if d == -1 { len / known } else { d as usize }).collect()
    } else {
        spec.iter().map(|&d| d as usize).collect()
    };
    (numel(&shape) == len).then_some(shape)
}

#[cfg(test)]
mod tests;
