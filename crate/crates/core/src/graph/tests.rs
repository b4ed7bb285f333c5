use super::*;
use crate::gradcheck::check_gradients;
use core::cell::RefCell;

fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = values.iter().map(|(n, t)| s.add(n, t.clone()).unwrap()).collect();
    (s, ids)
}

#[test]
fn square_and_its_gradient() {
    let (mut s, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
    let mut g = Graph::new();
    let x = g.param(ids[0]);
    let y = g.mul(x, x);
    g.evaluate(&mut s, &[], Mode::Eval, 0).unwrap();
    assert_eq!(g.scalar(y), Some(9.0));
    g.backward(&mut s, y).unwrap();
    assert_eq!(s.param(ids[0]).grad.data(), &[6.0]);
}

#[test]
fn product_gradient() {
    let (mut s, ids) = store_with(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(5.0))]);
    let mut g = Graph::new();
    let (x, y) = (g.param(ids[0]), g.param(ids[1]));
    let z = g.mul(x, y);
    g.evaluate(&mut s, &[], Mode::Eval, 0).unwrap();
    g.backward(&mut s, z).unwrap();
    assert_eq!(s.param(ids[0]).grad.data(), &[5.0]);
    assert_eq!(s.param(ids[1]).grad.data(), &[2.0]);
}

#[test]
fn identity_graph_returns_input() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x");
    let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 9).unwrap();
    assert_eq!(g.value(x), Some(&t));
}

#[test]
fn softmax_closed_form() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.softmax(x);
    let t = Tensor::from_vec(vec![0.0, core::f64::consts::LN_2]);
    g.evaluate(&mut s, &[("x", &t)], Mode::Eval, 0).unwrap();
    let v = g.value(y).unwrap().data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn untouched_parameters_get_zero_gradient() {
    let (mut s, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(7.0))]);
    s.param_mut(ids[1]).grad = Tensor::scalar(123.0);
    let mut g = Graph::new();
    let a = g.param(ids[0]);
    let _b = g.param(ids[1]);
    let y = g.scale(a, 3.0);
    g.evaluate(&mut s, &[], Mode::Eval, 0).unwrap();
    g.backward(&mut s, y).unwrap();
    assert_eq!(s.param(ids[0]).grad.data(), &[3.0]);
    assert_eq!(s.param(ids[1]).grad.data(), &[0.0]);
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let (mut s, ids) = store_with(&[("a", Tensor::scalar(2.0))]);
    let mut g = Graph::new();
    let a = g.param(ids[0]);
    let y = g.sum(a);
    assert_eq!(g.backward(&mut s, y), Err(GraphError::NotEvaluated(y.0)));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let (mut s, ids) = store_with(&[("a", Tensor::from_vec(vec![1.0, 2.0]))]);
    let mut g = Graph::new();
    let a = g.param(ids[0]);
    let y = g.scale(a, 2.0);
    g.evaluate(&mut s, &[], Mode::Eval, 0).unwrap();
    assert!(matches!(g.backward(&mut s, y), Err(GraphError::NonScalarOutput { .. })));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    g.set_scope("head");
    let c = g.matmul(a, b);
    let ta = Tensor::zeros(&[2, 3]);
    let tb = Tensor::zeros(&[4, 2]);
    let err = g.evaluate(&mut s, &[("a", &ta), ("b", &tb)], Mode::Eval, 0).unwrap_err();
    match err {
        GraphError::Shape { node, op, scope, .. } => {
            assert_eq!(node, c.0);
            assert_eq!(op, "matmul");
            assert!(scope.contains("head"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unbound_input_reported() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    g.input("missing");
    assert_eq!(
        g.evaluate(&mut s, &[], Mode::Eval, 0),
        Err(GraphError::UnboundInput("missing".into()))
    );
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.scale(x, f64::MAX);
    let z = g.scale(y, 10.0);
    let t = Tensor::scalar(1.0);
    let err = g.evaluate(&mut s, &[("x", &t)], Mode::Eval, 0).unwrap_err();
    assert!(matches!(err, GraphError::NonFinite { node, .. } if node == z.0));
}

#[test]
fn dropout_active_only_in_train_mode() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.dropout(x, 0.5);
    let t = Tensor::filled(&[1, 1000], 1.0);
    g.evaluate(&mut s, &[("x", &t)], Mode::Eval, 1).unwrap();
    assert_eq!(g.value(y), Some(&t));
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 1).unwrap();
    let v = g.value(y).unwrap().data().to_vec();
    assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
    let kept = v.iter().filter(|&&a| a == 2.0).count();
    assert!((400..600).contains(&kept));
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 1).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &v[..]);
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 2).unwrap();
    assert_ne!(g.value(y).unwrap().data(), &v[..]);
}

#[test]
fn batch_norm_train_statistics() {
    let mut s = ParamStore::new();
    let gamma = s.add("g", Tensor::filled(&[3], 1.0)).unwrap();
    let beta = s.add("b", Tensor::zeros(&[3])).unwrap();
    let rm = s.add_buffer("rm", Tensor::zeros(&[3])).unwrap();
    let rv = s.add_buffer("rv", Tensor::filled(&[3], 1.0)).unwrap();
    let mut g = Graph::new();
    let x = g.input("x");
    let (gn, bn) = (g.param(gamma), g.param(beta));
    let y = g.batch_norm(x, gn, bn, rm, rv);
    let mut r = rng::labeled(4, "bn");
    let data: Vec<f64> = (0..4 * 3 * 5).map(|_| 3.0 + 2.0 * rng::normal(&mut r)).collect();
    let t = Tensor::new(vec![4, 3, 5], data).unwrap();
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 0).unwrap();
    let v = g.value(y).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| v.data()[(b * 3 + c) * 5..(b * 3 + c + 1) * 5].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
    // running stats moved towards the batch statistics
    assert!(s.buffer(rm).value.data().iter().all(|&m| m > 0.1));
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut s = ParamStore::new();
    let gamma = s.add("g", Tensor::filled(&[1], 1.0)).unwrap();
    let beta = s.add("b", Tensor::zeros(&[1])).unwrap();
    let rm = s.add_buffer("rm", Tensor::scalar(1.0)).unwrap();
    let rv = s.add_buffer("rv", Tensor::scalar(4.0 - NORM_EPS)).unwrap();
    let mut g = Graph::new();
    let x = g.input("x");
    let (gn, bn) = (g.param(gamma), g.param(beta));
    let y = g.batch_norm(x, gn, bn, rm, rv);
    let t = Tensor::new(vec![1, 1, 2], vec![1.0, 5.0]).unwrap();
    g.evaluate(&mut s, &[("x", &t)], Mode::Eval, 0).unwrap();
    let v = g.value(y).unwrap().data();
    assert!((v[0] - 0.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
    assert_eq!(s.buffer(rm).value.data(), &[1.0]);
}

#[test]
fn evaluate_is_bit_reproducible() {
    let mut s = ParamStore::new();
    let w = s.add_fan_in("w", &[4, 3, 5], 15, 1).unwrap();
    let mut g = Graph::new();
    let x = g.input("x");
    let wn = g.param(w);
    let c = g.conv1d(x, wn, 5);
    let d = g.dropout(c, 0.3);
    let e = g.elu(d);
    let out = g.sum(e);
    let mut r = rng::labeled(1, "x");
    let t = Tensor::new(vec![2, 3, 16], (0..96).map(|_| rng::normal(&mut r)).collect()).unwrap();
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 42).unwrap();
    let a = g.scalar(out).unwrap();
    g.evaluate(&mut s, &[("x", &t)], Mode::Train, 42).unwrap();
    assert_eq!(a.to_bits(), g.scalar(out).unwrap().to_bits());
}

#[test]
fn evaluate_targets_skips_unrelated_nodes() {
    let mut s = ParamStore::new();
    let ga = s.add("g", Tensor::filled(&[1], 1.0)).unwrap();
    let be = s.add("b", Tensor::zeros(&[1])).unwrap();
    let rm = s.add_buffer("rm", Tensor::zeros(&[1])).unwrap();
    let rv = s.add_buffer("rv", Tensor::filled(&[1], 1.0)).unwrap();
    let mut g = Graph::new();
    let x = g.input("x");
    let a = g.sum(x);
    let (gn, bn) = (g.param(ga), g.param(be));
    let normed = g.batch_norm(x, gn, bn, rm, rv);
    let t = Tensor::new(vec![2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    g.evaluate_targets(&mut s, &[("x", &t)], Mode::Train, 0, &[a]).unwrap();
    assert_eq!(g.scalar(a), Some(26.0));
    assert!(g.value(normed).is_none());
    assert_eq!(s.buffer(rm).value.data(), &[0.0]);
}

#[test]
fn single_token_attention_weight_is_one() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let q = g.input("q");
    let a = g.attention(q, q, q);
    let t = Tensor::new(vec![3, 1, 4], (0..12).map(f64::from).collect()).unwrap();
    g.evaluate(&mut s, &[("q", &t)], Mode::Eval, 0).unwrap();
    assert!(g.attention_probs(a).unwrap().iter().all(|&p| p == 1.0));
    assert_eq!(g.value(a), Some(&t));
}

#[test]
fn reshape_infers_wildcard() {
    assert_eq!(resolve_shape(&[-1, 4], 12), Some(vec![3, 4]));
    assert_eq!(resolve_shape(&[-1, 5], 12), None);
    assert_eq!(resolve_shape(&[-1, -1], 12), None);
    assert_eq!(resolve_shape(&[3, 4], 12), Some(vec![3, 4]));
}

#[test]
fn nll_rejects_out_of_range_label() {
    let mut s = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x");
    let l = g.input("y");
    g.nll(x, l);
    let t = Tensor::zeros(&[1, 3]);
    let y = Tensor::scalar(3.0);
    assert!(matches!(
        g.evaluate(&mut s, &[("x", &t), ("y", &y)], Mode::Eval, 0),
        Err(GraphError::LabelOutOfRange { .. })
    ));
}

/// Gradcheck of `sum(op(params) * R)` for a random projection `R`.
fn gradcheck_op(build: impl Fn(&mut Graph, &mut ParamStore, &mut rng::StreamRng) -> NodeId, seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let mut r = rng::labeled(seed, "op");
    let mut g = Graph::new();
    let y = build(&mut g, &mut s, &mut r);
    let proj = g.input("proj");
    let prod = g.mul(y, proj);
    let loss = g.sum(prod);
    g.evaluate_targets(&mut s, &[("proj", &Tensor::scalar(0.0))], Mode::Train, seed, &[y]).unwrap();
    let shape = g.value(y).unwrap().shape().to_vec();
    let rt = Tensor::new(shape.clone(), (0..numel(&shape)).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let g = RefCell::new(g);
    let report = check_gradients(
        &mut s,
        1e-3,
        |s| {
            let mut g = g.borrow_mut();
            g.evaluate(s, &[("proj", &rt)], Mode::Train, seed)?;
            Ok(g.scalar(loss).unwrap())
        },
        |s| {
            let mut gm = g.borrow_mut();
            gm.evaluate(s, &[("proj", &rt)], Mode::Train, seed)?;
            gm.backward(s, loss)
        },
        None,
        seed,
    )
    .unwrap();
    report.rel_err
}

fn rand_param(s: &mut ParamStore, r: &mut rng::StreamRng, name: &str, shape: &[usize]) -> ParamId {
    let data = (0..numel(shape)).map(|_| rng::normal(r)).collect();
    s.add(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

#[test]
fn grouped_conv_gradcheck() {
    for seed in 0..5 {
        let err = gradcheck_op(
            |g, s, r| {
                let x = rand_param(s, r, "x", &[2, 4, 9]);
                let w = rand_param(s, r, "w", &[6, 2, 4]);
                let (x, w) = (g.param(x), g.param(w));
                g.grouped_conv1d(x, w, 2, 4)
            },
            seed,
        );
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn attention_and_layer_norm_gradcheck() {
    for seed in 0..5 {
        let err = gradcheck_op(
            |g, s, r| {
                let q = rand_param(s, r, "q", &[2, 3, 4]);
                let k = rand_param(s, r, "k", &[2, 5, 4]);
                let v = rand_param(s, r, "v", &[2, 5, 4]);
                let ga = rand_param(s, r, "g", &[4]);
                let be = rand_param(s, r, "b", &[4]);
                let (q, k, v, ga, be) = (g.param(q), g.param(k), g.param(v), g.param(ga), g.param(be));
                let a = g.attention(q, k, v);
                g.layer_norm(a, ga, be)
            },
            seed,
        );
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
