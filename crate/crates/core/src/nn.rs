//! Layer helpers that register parameters and emit graph nodes in one call.

use alloc::format;
use alloc::string::String;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamError, ParamStore};
use crate::tensor::Tensor;

/// Builds layers under a name prefix, e.g. `global.block0.wq`.
pub struct Builder<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a mut ParamStore,
    prefix: String,
    seed: u64,
}

impl<'a> Builder<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a mut ParamStore, prefix: &str, seed: u64) -> Self {
        graph.set_scope(prefix);
        Self { graph, store, prefix: String::from(prefix), seed }
    }

    pub fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            String::from(local)
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    /// Fan-in scaled uniform weight.
    pub fn weight(&mut self, local: &str, shape: &[usize], fan_in: usize) -> Result<NodeId, ParamError> {
        let id = self.store.add_fan_in(&self.name(local), shape, fan_in, self.seed)?;
        Ok(self.graph.param(id))
    }

    pub fn constant(&mut self, local: &str, shape: &[usize], value: f64) -> Result<NodeId, ParamError> {
        let id = self.store.add(&self.name(local), Tensor::filled(shape, value))?;
        Ok(self.graph.param(id))
    }

    /// Batch norm over axis 1 with identity affine and fresh running stats.
    pub fn batch_norm(&mut self, x: NodeId, local: &str, channels: usize) -> Result<NodeId, ParamError> {
        let gamma = self.constant(&format!("{local}.gamma"), &[channels], 1.0)?;
        let beta = self.constant(&format!("{local}.beta"), &[channels], 0.0)?;
        let mean = self.store.add_buffer(&self.name(&format!("{local}.running_mean")), Tensor::zeros(&[channels]))?;
        let var = self.store.add_buffer(&self.name(&format!("{local}.running_var")), Tensor::filled(&[channels], 1.0))?;
        Ok(self.graph.batch_norm(x, gamma, beta, mean, var))
    }

    pub fn layer_norm(&mut self, x: NodeId, local: &str, dim: usize) -> Result<NodeId, ParamError> {
        let gamma = self.constant(&format!("{local}.gamma"), &[dim], 1.0)?;
        let beta = self.constant(&format!("{local}.beta"), &[dim], 0.0)?;
        Ok(self.graph.layer_norm(x, gamma, beta))
    }

    /// `x @ w + b` over the last axis; the result is rank 2 `[rows, out]`.
    pub fn linear(&mut self, x: NodeId, local: &str, input: usize, output: usize) -> Result<NodeId, ParamError> {
        let w = self.weight(&format!("{local}.weight"), &[input, output], input)?;
        let b = self.constant(&format!("{local}.bias"), &[output], 0.0)?;
        Ok(self.graph.linear(x, w, Some(b), input))
    }
}
