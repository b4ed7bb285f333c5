//! Softmax routing gate over expert features.
//!
//! Every expert feature `F_i` is scored by one shared linear map `h`, scores
//! are normalized with a softmax into weights `alpha`, and the fused vector
//! `sum_i alpha_i F_i` is classified by a linear head.
//!
//! The per-trial functions sum with [`math::sum_order_independent`], so
//! permuting the expert order permutes `alpha` and leaves the fused vector
//! unchanged bit for bit. The graph builder in [`build`] is used for training.

use alloc::vec::Vec;

use crate::graph::NodeId;
use crate::math;
use crate::nn::Builder;
use crate::params::ParamError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouterError {
    #[error("no experts to route over")]
    NoExperts,
    #[error("expert {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("{features} features but {weights} routing weights")]
    Length { features: usize, weights: usize },
}

/// Shared relevance projection `h(F) = w . F + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Linear classifier on the fused vector; `weight` is `[D][K]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

fn check_dims<F: AsRef<[f64]>>(features: &[F], dim: usize) -> Result<(), RouterError> {
    if features.is_empty() {
        return Err(RouterError::NoExperts);
    }
    for (index, f) in features.iter().enumerate() {
        let got = f.as_ref().len();
        if got != dim {
            return Err(RouterError::Dimension { index, got, expected: dim });
        }
    }
    Ok(())
}

pub fn route_scores<F: AsRef<[f64]>>(features: &[F], gate: &Gate) -> Result<Vec<f64>, RouterError> {
    check_dims(features, gate.weight.len())?;
    Ok(features
        .iter()
        .map(|f| {
            let mut terms: Vec<f64> = f.as_ref().iter().zip(&gate.weight).map(|(x, w)| x * w).collect();
            math::sum_order_independent(&mut terms) + gate.bias
        })
        .collect())
}

/// Max-shifted softmax.
pub fn routing_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| math::exp(s - max)).collect();
    let mut tmp = exps.clone();
    let total = math::sum_order_independent(&mut tmp);
    exps.iter().map(|e| e / total).collect()
}

pub fn route<F: AsRef<[f64]>>(features: &[F], gate: &Gate) -> Result<RoutingState, RouterError> {
    let scores = route_scores(features, gate)?;
    let weights = routing_weights(&scores);
    Ok(RoutingState { scores, weights })
}

/// Convex combination `sum_i alpha_i F_i`.
pub fn fuse<F: AsRef<[f64]>>(features: &[F], alpha: &[f64]) -> Result<Vec<f64>, RouterError> {
    if features.len() != alpha.len() {
        return Err(RouterError::Length { features: features.len(), weights: alpha.len() });
    }
    let dim = features.first().ok_or(RouterError::NoExperts)?.as_ref().len();
    check_dims(features, dim)?;
    let mut terms = Vec::with_capacity(features.len());
    Ok((0..dim)
        .map(|j| {
            terms.clear();
            terms.extend(features.iter().zip(alpha).map(|(f, a)| a * f.as_ref()[j]));
            math::sum_order_independent(&mut terms)
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(fused: &[f64], head: &Head) -> Result<(Vec<f64>, usize), RouterError> {
    let k = head.bias.len();
    if head.weight.len() != fused.len() * k {
        return Err(RouterError::Dimension { index: 0, got: fused.len(), expected: head.weight.len() / k.max(1) });
    }
    let logits: Vec<f64> = (0..k)
        .map(|c| {
            let mut terms: Vec<f64> = fused.iter().enumerate().map(|(d, x)| x * head.weight[d * k + c]).collect();
            math::sum_order_independent(&mut terms) + head.bias[c]
        })
        .collect();
    let class = argmax(&logits);
    Ok((logits, class))
}

/// Router nodes for a batch of `B` trials and `E` experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterNodes {
    /// `[B, E]`
    pub scores: NodeId,
    /// `[B, E]`
    pub alpha: NodeId,
    /// `[B, D]`
    pub fused: NodeId,
    /// `[B, K]`
    pub logits: NodeId,
}

/// Appends the gate, fusion and head over expert features `[B, D]` each.
pub fn build(b: &mut Builder<'_>, features: &[NodeId], dim: usize, classes: usize) -> Result<RouterNodes, ParamError> {
    let e = features.len() as isize;
    let d = dim as isize;
    let rows: Vec<NodeId> = features.iter().map(|f| b.graph.reshape(*f, &[-1, 1, d])).collect();
    let stacked = b.graph.concat(&rows, 1);
    let s = b.linear(stacked, "gate", dim, 1)?;
    let scores = b.graph.reshape(s, &[-1, e]);
    let alpha = b.graph.softmax(scores);
    let a = b.graph.reshape(alpha, &[-1, 1, e]);
    let fused = b.graph.matmul(a, stacked);
    let fused = b.graph.reshape(fused, &[-1, d]);
    let logits = b.linear(fused, "head", dim, classes)?;
    Ok(RouterNodes { scores, alpha, fused, logits })
}
