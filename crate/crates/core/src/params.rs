//! Learnable parameters, non-learnable buffers and the SGD optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub usize);

/// A learnable tensor together with its gradient and momentum buffer, all of
/// identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter or buffer name `{0}`")]
    Duplicate(String),
    #[error("non-finite gradient in parameter `{0}`; step aborted")]
    NonFiniteGrad(String),
    #[error("invalid optimizer setting: {0}")]
    InvalidHyper(&'static str),
    #[error("tensor `{name}` missing from checkpoint")]
    Missing { name: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// All parameters and buffers of a model, addressed by id or unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn name_taken(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        if self.name_taken(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: zeros.clone(),
            momentum: zeros,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter drawn from `U(-bound, bound)` with `bound = sqrt(3 / fan_in)`
    /// (unit-variance preserving). The stream is derived from `seed` and the name.
    pub fn add_fan_in(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        seed: u64,
    ) -> Result<ParamId, ParamError> {
        let mut r: StreamRng = rng::labeled(seed, name);
        let bound = crate::math::sqrt(3.0 / fan_in.max(1) as f64);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng::uniform(&mut r, -bound, bound);
        }
        self.add(name, t)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<BufferId, ParamError> {
        if self.name_taken(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.buffers.push(Buffer { name: name.to_string(), value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Every named tensor (parameters first, then buffers) in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    /// Overwrites values from `(name, tensor)` pairs. Every parameter and
    /// buffer of `self` must be present with a matching shape; extra entries
    /// are ignored.
    pub fn load_named<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<(), ParamError> {
        let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
        let lookup = |name: &str| entries.iter().find(|(n, _)| *n == name).map(|(_, t)| *t);
        let apply = |name: &str, dst: &mut Tensor| -> Result<(), ParamError> {
            let src = lookup(name).ok_or_else(|| ParamError::Missing { name: name.to_string() })?;
            if src.shape() != dst.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: name.to_string(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
            Ok(())
        };
        for p in &mut self.params {
            apply(&p.name, &mut p.value)?;
        }
        for b in &mut self.buffers {
            apply(&b.name, &mut b.value)?;
        }
        Ok(())
    }
}

/// SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD step over every parameter:
/// `v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v`.
/// Gradients are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, opt: Sgd) -> Result<(), ParamError> {
    sgd_step_filtered(store, opt, |_| true)
}

/// [`sgd_step`] restricted to parameters accepted by `active`. Parameters
/// that are filtered out keep value and momentum untouched; all gradients are
/// still zeroed.
pub fn sgd_step_filtered(
    store: &mut ParamStore,
    opt: Sgd,
    active: impl Fn(&Parameter) -> bool,
) -> Result<(), ParamError> {
    if !(opt.lr > 0.0 && opt.lr.is_finite()) {
        return Err(ParamError::InvalidHyper("lr must be positive"));
    }
    if !(0.0..1.0).contains(&opt.momentum) {
        return Err(ParamError::InvalidHyper("momentum must lie in [0, 1)"));
    }
    if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
        return Err(ParamError::InvalidHyper("weight decay must be nonnegative"));
    }
    if let Some(bad) = store.params.iter().find(|p| active(p) && !p.grad.is_finite()) {
        return Err(ParamError::NonFiniteGrad(bad.name.clone()));
    }
    for p in &mut store.params {
        if active(p) {
            let theta = p.value.data_mut();
            let v = p.momentum.data_mut();
            for ((t, m), g) in theta.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
                *m = opt.momentum * *m + g + opt.weight_decay * *t;
                *t -= opt.lr * *m;
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(theta)).unwrap();
        s.param_mut(id).grad = Tensor::scalar(grad);
        (s, id)
    }

    #[test]
    fn plain_sgd() {
        let (mut s, id) = single(1.0, 2.0);
        sgd_step(&mut s, Sgd { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert!((s.param(id).value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.param(id).grad.data()[0], 0.0);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19 = -0.29
        let (mut s, id) = single(0.0, 1.0);
        let opt = Sgd { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut s, opt).unwrap();
        s.param_mut(id).grad = Tensor::scalar(1.0);
        sgd_step(&mut s, opt).unwrap();
        assert!((s.param(id).value.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn pure_weight_decay() {
        let (mut s, id) = single(1.0, 0.0);
        sgd_step(&mut s, Sgd { lr: 0.1, momentum: 0.0, weight_decay: 1e-4 }).unwrap();
        assert!((s.param(id).value.data()[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts_whole_step() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0)).unwrap();
        let b = s.add("b", Tensor::scalar(1.0)).unwrap();
        s.param_mut(a).grad = Tensor::scalar(1.0);
        s.param_mut(b).grad = Tensor::scalar(f64::NAN);
        let err = sgd_step(&mut s, Sgd { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert_eq!(err, Err(ParamError::NonFiniteGrad("b".into())));
        assert_eq!(s.param(a).value.data()[0], 1.0);
    }

    #[test]
    fn filtered_step_leaves_inactive_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("global.w", Tensor::scalar(1.0)).unwrap();
        let b = s.add("region.w", Tensor::scalar(1.0)).unwrap();
        s.param_mut(a).grad = Tensor::scalar(1.0);
        s.param_mut(b).grad = Tensor::scalar(1.0);
        let opt = Sgd { lr: 0.1, momentum: 0.9, weight_decay: 1e-4 };
        sgd_step_filtered(&mut s, opt, |p| p.name.starts_with("global.")).unwrap();
        assert_ne!(s.param(a).value.data()[0], 1.0);
        assert_eq!(s.param(b).value.data()[0], 1.0);
        assert_eq!(s.param(b).momentum.data()[0], 0.0);
        assert_eq!(s.param(b).grad.data()[0], 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
        assert!(s.add_buffer("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn fan_in_init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut c = ParamStore::new();
        a.add_fan_in("w", &[4, 4], 4, 1).unwrap();
        b.add_fan_in("w", &[4, 4], 4, 1).unwrap();
        c.add_fan_in("w", &[4, 4], 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = crate::math::sqrt(3.0 / 4.0);
        assert!(a.params()[0].value.data().iter().all(|v| v.abs() <= bound));
    }
}
