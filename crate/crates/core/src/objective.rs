//! Losses and the progress-driven loss-weight schedule.
//!
//! The total loss is `lambda * L_fused + alpha * L_global + beta * L_local +
//! gamma * L_distill`. After a global-only warm-up, training progress `P`
//! ramps from 0 to 1 over `transition` epochs; `lambda` interpolates from
//! `lambda_min` to `lambda_max`, the global weight decays to zero, and the
//! auxiliary weights are gated by how far the current fused loss sits below
//! `max_loss_estimate`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("distillation needs at least one student")]
    NoStudents,
    #[error("student {index} has {got} logits, teacher has {expected}")]
    LogitCount { index: usize, got: usize, expected: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, ObjectiveError> {
    if label >= logits.len() {
        return Err(ObjectiveError::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(math::log_sum_exp(logits) - logits[label])
}

/// Mean cross-entropy over rows.
pub fn cross_entropy_batch<R: AsRef<[f64]>>(rows: &[R], labels: &[usize]) -> Result<f64, ObjectiveError> {
    let mut total = 0.0;
    for (r, l) in rows.iter().zip(labels) {
        total += cross_entropy(r.as_ref(), *l)?;
    }
    Ok(total / rows.len().max(1) as f64)
}

fn log_softmax_t(logits: &[f64], t: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|v| v / t).collect();
    let lse = math::log_sum_exp(&z);
    z.iter().map(|v| v - lse).collect()
}

/// `sum_i KL(softmax(teacher / T) || softmax(student_i / T))`.
pub fn distill_loss<R: AsRef<[f64]>>(teacher: &[f64], students: &[R], temperature: f64) -> Result<f64, ObjectiveError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ObjectiveError::Temperature(temperature));
    }
    if students.is_empty() {
        return Err(ObjectiveError::NoStudents);
    }
    let lt = log_softmax_t(teacher, temperature);
    let mut total = 0.0;
    for (index, s) in students.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != teacher.len() {
            return Err(ObjectiveError::LogitCount { index, got: s.len(), expected: teacher.len() });
        }
        let ls = log_softmax_t(s, temperature);
        total += lt.iter().zip(&ls).map(|(a, b)| math::exp(*a) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Training progress in `[0, 1]`.
pub fn progress(epoch: usize, warmup: usize, transition: usize) -> f64 {
    ((epoch as f64 - warmup as f64) / transition.max(1) as f64).clamp(0.0, 1.0)
}

pub fn fused_weight(p: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    (1.0 - p) * lambda_min + p * lambda_max
}

/// Loss gate `1 - min(L_fused / max_loss, 1)`.
pub fn loss_gate(fused_loss: f64, max_loss_estimate: f64) -> f64 {
    1.0 - (fused_loss / max_loss_estimate).min(1.0)
}

pub fn aux_weight(x_max: f64, p: f64, fused_loss: f64, max_loss_estimate: f64) -> f64 {
    x_max * p * loss_gate(fused_loss, max_loss_estimate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub warmup: usize,
    pub transition: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub gamma_max: f64,
    pub max_loss_estimate: f64,
    pub temperature: f64,
}

impl ScheduleConfig {
    /// Defaults for a `classes`-way task; the loss bound is chance-level
    /// cross-entropy `ln K`.
    pub fn for_classes(classes: usize) -> Self {
        Self {
            warmup: 5,
            transition: 20,
            lambda_min: 0.2,
            lambda_max: 1.0,
            alpha_max: 0.8,
            beta_max: 0.5,
            gamma_max: 0.5,
            max_loss_estimate: math::ln(classes.max(2) as f64),
            temperature: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Schedule(m));
        if self.transition < 1 {
            return bad(format!("transition must be >= 1, got {}", self.transition));
        }
        if !(self.lambda_min <= self.lambda_max) {
            return bad(format!("lambda_min {} > lambda_max {}", self.lambda_min, self.lambda_max));
        }
        for (name, v) in [
            ("lambda_min", self.lambda_min),
            ("alpha_max", self.alpha_max),
            ("beta_max", self.beta_max),
            ("gamma_max", self.gamma_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.max_loss_estimate > 0.0 && self.max_loss_estimate.is_finite()) {
            return bad(format!("max_loss_estimate must be > 0, got {}", self.max_loss_estimate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ObjectiveError::Temperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScheduledWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda, self.alpha, self.beta, self.gamma]
    }
}

/// Weights for one step at `epoch` given the detached fused loss of the batch.
pub fn schedule_weights(epoch: usize, fused_loss: f64, cfg: &ScheduleConfig) -> ScheduledWeights {
    if epoch < cfg.warmup {
        return ScheduledWeights { lambda: 0.0, alpha: cfg.alpha_max, beta: 0.0, gamma: 0.0 };
    }
    let p = progress(epoch, cfg.warmup, cfg.transition);
    let gate = loss_gate(fused_loss, cfg.max_loss_estimate);
    ScheduledWeights {
        lambda: fused_weight(p, cfg.lambda_min, cfg.lambda_max),
        alpha: cfg.alpha_max * (1.0 - p) * gate,
        beta: aux_weight(cfg.beta_max, p, fused_loss, cfg.max_loss_estimate),
        gamma: aux_weight(cfg.gamma_max, p, fused_loss, cfg.max_loss_estimate) * p,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub fused: f64,
    pub global: f64,
    pub local: f64,
    pub distill: f64,
    pub total: f64,
}

pub fn total_loss(fused: f64, global: f64, local: f64, distill: f64, w: &ScheduledWeights) -> LossBreakdown {
    LossBreakdown {
        fused,
        global,
        local,
        distill,
        total: w.lambda * fused + w.alpha * global + w.beta * local + w.gamma * distill,
    }
}

/// Mean cross-entropy node for `logits: [B, K]` and `labels: [B]`.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, labels: NodeId) -> NodeId {
    let lp = g.log_softmax(logits);
    g.nll(lp, labels)
}

/// Unweighted mean of several scalar nodes.
pub fn mean_of(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Batch-mean distillation loss. The teacher is detached, so gradients reach
/// the students only.
pub fn distill_node(g: &mut Graph, teacher: NodeId, students: &[NodeId], classes: usize, temperature: f64) -> NodeId {
    let t = g.detach(teacher);
    let t = g.scale(t, 1.0 / temperature);
    let pt = g.softmax(t);
    let lt = g.log_softmax(t);
    let mut acc: Option<NodeId> = None;
    for s in students {
        let s = g.scale(*s, 1.0 / temperature);
        let ls = g.log_softmax(s);
        let diff = g.sub(lt, ls);
        let prod = g.mul(pt, diff);
        // mean over B*K entries times K is the per-trial sum averaged over B
        let m = g.mean(prod);
        let kl = g.scale(m, classes as f64);
        acc = Some(match acc {
            Some(a) => g.add(a, kl),
            None => kl,
        });
    }
    acc.expect("at least one student")
}
