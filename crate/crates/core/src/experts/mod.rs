//! Expert networks.
//!
//! Both families map a batch `[B, C, T]` to a routed feature `[B, D_route]`
//! and class logits `[B, K]` through two separate linear heads on a shared
//! pooled representation.

mod cnet;
mod ctnet;

pub use cnet::CNetConfig;
pub use ctnet::{patch_embed, transformer_encode, CTNetConfig, PatchEmbed};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::{Graph, GraphError, Mode, NodeId};
use crate::nn::Builder;
use crate::params::{ParamError, ParamStore};
use crate::tensor::Tensor;

/// Every violated constraint of an expert config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid expert config: {}", self.violations.join("; "))
    }
}

impl core::error::Error for ConfigError {}

pub(crate) fn check(violations: &mut Vec<String>, ok: bool, msg: impl Into<String>) {
    if !ok {
        violations.push(msg.into());
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExpertError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input has {got:?} but the expert expects [{channels}, {time}]")]
    InputShape { got: Vec<usize>, channels: usize, time: usize },
}

/// Graph nodes of a built expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertNodes {
    pub feature: NodeId,
    pub logits: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub feature: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertConfig {
    CNet(CNetConfig),
    CTNet(CTNetConfig),
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            ExpertConfig::CNet(c) => c.validate(),
            ExpertConfig::CTNet(c) => c.validate(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ExpertConfig::CNet(c) => c.in_channels,
            ExpertConfig::CTNet(c) => c.in_channels,
        }
    }

    pub fn time_len(&self) -> usize {
        match self {
            ExpertConfig::CNet(c) => c.time_len,
            ExpertConfig::CTNet(c) => c.time_len,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ExpertConfig::CNet(c) => c.feature_dim,
            ExpertConfig::CTNet(c) => c.feature_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ExpertConfig::CNet(c) => c.num_classes,
            ExpertConfig::CTNet(c) => c.num_classes,
        }
    }

    /// Same architecture over a different channel count.
    pub fn with_channels(&self, channels: usize) -> Self {
        match self {
            ExpertConfig::CNet(c) => ExpertConfig::CNet(CNetConfig { in_channels: channels, ..c.clone() }),
            ExpertConfig::CTNet(c) => ExpertConfig::CTNet(CTNetConfig { in_channels: channels, ..c.clone() }),
        }
    }

    /// Registers parameters under `prefix` and appends the expert to `graph`.
    /// `x` must evaluate to `[B, in_channels, time_len]`.
    pub fn build(
        &self,
        graph: &mut Graph,
        store: &mut ParamStore,
        prefix: &str,
        x: NodeId,
        seed: u64,
    ) -> Result<ExpertNodes, ExpertError> {
        self.validate()?;
        let mut b = Builder::new(graph, store, prefix, seed);
        let nodes = match self {
            ExpertConfig::CNet(c) => cnet::build(c, &mut b, x)?,
            ExpertConfig::CTNet(c) => ctnet::build(c, &mut b, x)?.0,
        };
        graph.set_scope("");
        Ok(nodes)
    }
}

/// A standalone expert with its own parameters.
#[derive(Debug, Clone)]
pub struct Expert {
    pub config: ExpertConfig,
    pub store: ParamStore,
    graph: Graph,
    nodes: ExpertNodes,
}

impl Expert {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ExpertConfig, seed: u64) -> Result<Self, ExpertError> {
        let mut graph = Graph::new();
        let mut store = ParamStore::new();
        let x = graph.input("x");
        let nodes = config.build(&mut graph, &mut store, "", x, seed)?;
        Ok(Self { config, store, graph, nodes })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn nodes(&self) -> ExpertNodes {
        self.nodes
    }

    /// Forward over a batch `[B, C, T]`; returns `[B, D_route]` and `[B, K]`.
    pub fn forward_batch(&mut self, x: &Tensor, mode: Mode, seed: u64) -> Result<ExpertOutput, ExpertError> {
        let (c, t) = (self.config.in_channels(), self.config.time_len());
        if x.rank() != 3 || x.shape()[1] != c || x.shape()[2] != t {
            return Err(ExpertError::InputShape { got: x.shape().to_vec(), channels: c, time: t });
        }
        let targets = [self.nodes.feature, self.nodes.logits];
        self.graph.evaluate_targets(&mut self.store, &[("x", x)], mode, seed, &targets)?;
        let get = |n: NodeId| self.graph.value(n).cloned().expect("target evaluated");
        Ok(ExpertOutput { feature: get(self.nodes.feature), logits: get(self.nodes.logits) })
    }

    /// Forward for one trial `C x T`; returns vectors of length `D_route` and `K`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, seed: u64) -> Result<ExpertOutput, ExpertError> {
        let (c, t) = (self.config.in_channels(), self.config.time_len());
        if x.shape() != [c, t] {
            return Err(ExpertError::InputShape { got: x.shape().to_vec(), channels: c, time: t });
        }
        let batch = x.clone().reshaped(&[1, c, t]).expect("same element count");
        let out = self.forward_batch(&batch, mode, seed)?;
        let flat = |t: Tensor| {
            let n = t.len();
            t.reshaped(&[n]).expect("same element count")
        };
        Ok(ExpertOutput { feature: flat(out.feature), logits: flat(out.logits) })
    }
}

/// `[B, C, T] -> [B, F, C, T]`: one shared bank of `F` temporal filters run over
/// every channel row.
pub(crate) fn temporal_filter_bank(
    b: &mut Builder<'_>,
    x: NodeId,
    channels: usize,
    time: usize,
    filters: usize,
    kernel: usize,
) -> Result<NodeId, ParamError> {
    let w = b.weight("temporal.weight", &[filters, 1, kernel], kernel)?;
    let g = &mut *b.graph;
    let rows = g.reshape(x, &[-1, 1, time as isize]);
    let y = g.conv1d(rows, w, kernel);
    let y = g.reshape(y, &[-1, channels as isize, filters as isize, time as isize]);
    Ok(g.swap_axes(y, 1, 2))
}

pub(crate) fn heads(
    b: &mut Builder<'_>,
    pooled: NodeId,
    width: usize,
    feature_dim: usize,
    classes: usize,
) -> Result<ExpertNodes, ParamError> {
    let feature = b.linear(pooled, "feature_head", width, feature_dim)?;
    let logits = b.linear(pooled, "logits_head", width, classes)?;
    Ok(ExpertNodes { feature, logits })
}

#[cfg(test)]
pub(crate) fn random_batch(shape: &[usize], seed: u64) -> Tensor {
    let mut r = crate::rng::stream(seed, 0xba7c);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = crate::rng::normal(&mut r);
    }
    t
}
