//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever calls the forward loss, so it stays independent of
//! the backward kernels it is used to check.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::GraphError;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradcheckError {
    #[error("epsilon must be positive and finite")]
    InvalidEpsilon,
    #[error("oracle invalid: loss function returned {first} then {second} for identical parameters")]
    OracleInvalid { first: f64, second: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Central-difference estimate `(f(p + eps) - f(p - eps)) / (2 eps)` for every
/// entry of every parameter. Parameter values are restored afterwards.
pub fn finite_difference_gradient<F>(
    store: &mut ParamStore,
    epsilon: f64,
    mut loss: F,
) -> Result<Vec<Tensor>, GradcheckError>
where
    F: FnMut(&mut ParamStore) -> Result<f64, GraphError>,
{
    check_determinism(store, epsilon, &mut loss)?;
    let mut out = Vec::with_capacity(store.params().len());
    for p in 0..store.params().len() {
        let n = store.params()[p].value.len();
        let mut g = Tensor::zeros(store.params()[p].value.shape());
        for e in 0..n {
            g.data_mut()[e] = central_difference(store, p, e, epsilon, &mut loss)?;
        }
        out.push(g);
    }
    Ok(out)
}

fn check_determinism<F>(store: &mut ParamStore, epsilon: f64, loss: &mut F) -> Result<(), GradcheckError>
where
    F: FnMut(&mut ParamStore) -> Result<f64, GraphError>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(GradcheckError::InvalidEpsilon);
    }
    let first = loss(store)?;
    let second = loss(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradcheckError::OracleInvalid { first, second });
    }
    Ok(())
}

fn central_difference<F>(
    store: &mut ParamStore,
    param: usize,
    entry: usize,
    epsilon: f64,
    loss: &mut F,
) -> Result<f64, GradcheckError>
where
    F: FnMut(&mut ParamStore) -> Result<f64, GraphError>,
{
    let orig = store.params()[param].value.data()[entry];
    store.params_mut()[param].value.data_mut()[entry] = orig + epsilon;
    let plus = loss(store);
    store.params_mut()[param].value.data_mut()[entry] = orig - epsilon;
    let minus = loss(store);
    store.params_mut()[param].value.data_mut()[entry] = orig;
    Ok((plus? - minus?) / (2.0 * epsilon))
}

/// Agreement between backward and the oracle for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, NORM_FLOOR)`
    /// over the checked entries.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    /// Normwise relative error over every checked entry of every parameter.
    pub rel_err: f64,
}

impl GradReport {
    /// Largest per-tensor relative error.
    pub fn max_param_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Gradient norms below this are treated as zero when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-8;

/// Compares gradients left in `store` by `backward` against central
/// differences of `loss`.
///
/// `backward` must populate `store` gradients for the current values.
/// With `max_entries = Some(n)` at most `n` entries per tensor (chosen with a
/// seeded stream) are probed; `None` probes all of them.
pub fn check_gradients<F, B>(
    store: &mut ParamStore,
    epsilon: f64,
    mut loss: F,
    backward: B,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradReport, GradcheckError>
where
    F: FnMut(&mut ParamStore) -> Result<f64, GraphError>,
    B: FnOnce(&mut ParamStore) -> Result<(), GraphError>,
{
    backward(store)?;
    let analytic: Vec<Tensor> = store.params().iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    check_determinism(store, epsilon, &mut loss)?;

    let mut params = Vec::with_capacity(analytic.len());
    let (mut tot_diff, mut tot_a, mut tot_n) = (0.0, 0.0, 0.0);
    for (p, a) in analytic.iter().enumerate() {
        let n = a.len();
        let entries: Vec<usize> = match max_entries {
            Some(k) if k < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut r = rng::stream(seed, p as u64);
                rng::shuffle(&mut r, &mut idx);
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let num = central_difference(store, p, e, epsilon, &mut loss)?;
            let an = a.data()[e];
            diff += (an - num) * (an - num);
            na += an * an;
            nn += num * num;
        }
        tot_diff += diff;
        tot_a += na;
        tot_n += nn;
        params.push(ParamCheck {
            name: store.params()[p].name.clone(),
            entries_checked: entries.len(),
            rel_err: normwise(diff, na, nn),
        });
    }
    Ok(GradReport { params, rel_err: normwise(tot_diff, tot_a, tot_n) })
}

pub fn normwise(diff_sq: f64, a_sq: f64, n_sq: f64) -> f64 {
    let denom = crate::math::sqrt(a_sq).max(crate::math::sqrt(n_sq)).max(NORM_FLOOR);
    crate::math::sqrt(diff_sq) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Mode};

    #[test]
    fn sine_at_zero() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(0.0)).unwrap();
        let g = finite_difference_gradient(&mut s, 1e-5, |s| {
            Ok(crate::math::sin(s.param(id).value.data()[0]))
        })
        .unwrap();
        assert!((g[0].data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(alloc::vec![1.0, -2.0])).unwrap();
        let g = finite_difference_gradient(&mut s, 1e-3, |_| Ok(3.25)).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0.0;
        let err = finite_difference_gradient(&mut s, 1e-3, |_| {
            calls += 1.0;
            Ok(calls)
        });
        assert!(matches!(err, Err(GradcheckError::OracleInvalid { .. })));
    }

    #[test]
    fn rejects_bad_epsilon() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            finite_difference_gradient(&mut s, 0.0, |_| Ok(0.0)),
            Err(GradcheckError::InvalidEpsilon)
        );
    }

    #[test]
    fn cross_entropy_oracle_self_consistency() {
        let mut s = ParamStore::new();
        let w = s.add("logits", Tensor::new(alloc::vec![2, 3], alloc::vec![0.3, -1.2, 2.0, 0.1, 0.0, -0.4]).unwrap()).unwrap();
        let mut g = Graph::new();
        let z = g.param(w);
        let lp = g.log_softmax(z);
        let lab = g.input("labels");
        let loss = g.nll(lp, lab);
        let labels = Tensor::from_vec(alloc::vec![2.0, 0.0]);
        let g = core::cell::RefCell::new(g);
        let report = check_gradients(
            &mut s,
            1e-3,
            |s| {
                let mut g = g.borrow_mut();
                g.evaluate(s, &[("labels", &labels)], Mode::Eval, 0)?;
                Ok(g.scalar(loss).unwrap())
            },
            |s| {
                let mut gm = g.borrow_mut();
                gm.evaluate(s, &[("labels", &labels)], Mode::Eval, 0)?;
                gm.backward(s, loss)
            },
            None,
            0,
        )
        .unwrap();
        assert!(report.max_param_rel_err() < 1e-4, "{report:?}");
    }
}
