//! Finite-difference gradient checks for every primitive op and for the
//! assembled networks.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::str::FromStr;

use crate::experts::{CNetConfig, CTNetConfig, Expert, ExpertConfig};
use crate::gradcheck::{check_gradients, GradReport, GradcheckError};
use crate::graph::{Graph, Mode, NodeId};
use crate::model::{Model, ModelConfig, Variant};
use crate::montage::desk16;
use crate::nn::Builder;
use crate::objective::ScheduledWeights;
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::router;
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Entries probed per tensor in the network-level checks.
pub const MAX_ENTRIES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Ops,
    CNet,
    CTNet,
    Router,
    Objective,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Ops, Suite::CNet, Suite::CTNet, Suite::Router, Suite::Objective];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::CNet => "cnet",
            Suite::CTNet => "ctnet",
            Suite::Router => "router",
            Suite::Objective => "objective",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown gradcheck module '{0}' (expected ops, cnet, ctnet, router, objective or all)")]
pub struct UnknownSuite(pub String);

impl FromStr for Suite {
    type Err = UnknownSuite;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| UnknownSuite(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    /// Tensor with the largest per-tensor error.
    pub worst: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }

    fn from_report(name: &str, seed: u64, r: &GradReport) -> Self {
        Self { name: name.to_string(), seed, rel_err: r.rel_err, worst: r.worst().map(|p| p.name.clone()) }
    }
}

/// Runs one suite for one seed.
pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>, GradcheckError> {
    match suite {
        Suite::Ops => {
            let mut out: Vec<CheckResult> =
                OPS.iter().map(|(name, build)| check_op(name, *build, seed)).collect::<Result<_, _>>()?;
            out.push(detach_check(seed)?);
            Ok(out)
        }
        Suite::CNet => Ok(vec![expert(ExpertConfig::CNet(CNetConfig::tiny(4, 32, 3)), seed)?]),
        Suite::CTNet => Ok(vec![expert(ExpertConfig::CTNet(CTNetConfig::tiny(6, 32, 3)), seed)?]),
        Suite::Router => Ok(vec![router_check(seed)?]),
        Suite::Objective => Ok(vec![total_loss(seed)?]),
    }
}

/// Checks `loss` over every parameter of `store`.
#[allow(clippy::too_many_arguments)]
fn check_graph(
    name: &str,
    graph: Graph,
    store: &mut ParamStore,
    inputs: &[(&str, &Tensor)],
    loss: NodeId,
    max_entries: Option<usize>,
    mode: Mode,
    seed: u64,
) -> Result<CheckResult, GradcheckError> {
    let g = RefCell::new(graph);
    let report = check_gradients(
        store,
        EPSILON,
        |s| {
            let mut g = g.borrow_mut();
            g.evaluate(s, inputs, mode, seed)?;
            Ok(g.scalar(loss).expect("scalar loss"))
        },
        |s| {
            let mut g = g.borrow_mut();
            g.evaluate(s, inputs, mode, seed)?;
            g.backward(s, loss)
        },
        max_entries,
        seed,
    )?;
    Ok(CheckResult::from_report(name, seed, &report))
}

struct OpCtx<'a> {
    g: &'a mut Graph,
    s: &'a mut ParamStore,
    r: StreamRng,
    inputs: Vec<(String, Tensor)>,
}

impl OpCtx<'_> {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut self.r)).collect()).expect("sized")
    }

    fn p(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let t = self.normal(shape);
        let id = self.s.add(name, t).expect("unique name");
        self.g.param(id)
    }
}

type OpBuild = fn(&mut OpCtx<'_>) -> NodeId;

const OPS: &[(&str, OpBuild)] = &[
    ("matmul", |c| {
        let (a, b) = (c.p("a", &[3, 4]), c.p("b", &[4, 5]));
        c.g.matmul(a, b)
    }),
    ("matmul_batched", |c| {
        let (a, b) = (c.p("a", &[2, 3, 4]), c.p("b", &[2, 4, 2]));
        c.g.matmul(a, b)
    }),
    ("conv1d", |c| {
        let (x, w) = (c.p("x", &[2, 3, 9]), c.p("w", &[4, 3, 4]));
        c.g.conv1d(x, w, 4)
    }),
    ("depthwise_conv1d", |c| {
        let (x, w) = (c.p("x", &[2, 3, 8]), c.p("w", &[6, 1, 3]));
        c.g.depthwise_conv1d(x, w, 3, 3)
    }),
    ("pointwise_conv1d", |c| {
        let (x, w) = (c.p("x", &[2, 3, 5]), c.p("w", &[4, 3, 1]));
        c.g.pointwise_conv1d(x, w)
    }),
    ("grouped_conv1d", |c| {
        let (x, w) = (c.p("x", &[2, 4, 9]), c.p("w", &[6, 2, 4]));
        c.g.grouped_conv1d(x, w, 2, 4)
    }),
    ("batch_norm", |c| {
        let (x, ga, be) = (c.p("x", &[3, 4, 5]), c.p("gamma", &[4]), c.p("beta", &[4]));
        let m = c.s.add_buffer("mean", Tensor::zeros(&[4])).expect("unique");
        let v = c.s.add_buffer("var", Tensor::from_vec(vec![1.0; 4])).expect("unique");
        c.g.batch_norm(x, ga, be, m, v)
    }),
    ("layer_norm", |c| {
        let (x, ga, be) = (c.p("x", &[3, 6]), c.p("gamma", &[6]), c.p("beta", &[6]));
        c.g.layer_norm(x, ga, be)
    }),
    ("elu", |c| {
        let x = c.p("x", &[4, 5]);
        c.g.elu(x)
    }),
    ("softmax", |c| {
        let x = c.p("x", &[3, 5]);
        c.g.softmax(x)
    }),
    ("log_softmax", |c| {
        let x = c.p("x", &[3, 5]);
        c.g.log_softmax(x)
    }),
    ("avg_pool", |c| {
        let x = c.p("x", &[2, 3, 11]);
        c.g.avg_pool(x, 3)
    }),
    ("dropout", |c| {
        let x = c.p("x", &[4, 6]);
        c.g.dropout(x, 0.3)
    }),
    ("add", |c| {
        let (a, b) = (c.p("a", &[3, 4]), c.p("b", &[3, 4]));
        c.g.add(a, b)
    }),
    ("sub", |c| {
        let (a, b) = (c.p("a", &[3, 4]), c.p("b", &[3, 4]));
        c.g.sub(a, b)
    }),
    ("mul", |c| {
        let (a, b) = (c.p("a", &[3, 4]), c.p("b", &[3, 4]));
        c.g.mul(a, b)
    }),
    ("add_bias", |c| {
        let (x, b) = (c.p("x", &[2, 3, 4]), c.p("b", &[4]));
        c.g.add_bias(x, b)
    }),
    ("scale", |c| {
        let x = c.p("x", &[3, 4]);
        c.g.scale(x, -2.5)
    }),
    ("reshape", |c| {
        let x = c.p("x", &[2, 3, 4]);
        c.g.reshape(x, &[-1, 4, 3])
    }),
    ("swap_axes", |c| {
        let x = c.p("x", &[2, 3, 4]);
        c.g.swap_axes(x, 0, 2)
    }),
    ("concat", |c| {
        let (a, b) = (c.p("a", &[2, 1, 3]), c.p("b", &[2, 2, 3]));
        c.g.concat(&[a, b], 1)
    }),
    ("index_select", |c| {
        let x = c.p("x", &[2, 5, 3]);
        c.g.index_select(x, 1, &[4, 0, 2])
    }),
    ("mean_axis", |c| {
        let x = c.p("x", &[2, 3, 4]);
        c.g.mean_axis(x, 1)
    }),
    ("sum_axis", |c| {
        let x = c.p("x", &[2, 3, 4]);
        c.g.sum_axis(x, 2)
    }),
    ("sum", |c| {
        let x = c.p("x", &[3, 4]);
        c.g.sum(x)
    }),
    ("mean", |c| {
        let x = c.p("x", &[3, 4]);
        c.g.mean(x)
    }),
    ("nll", |c| {
        let x = c.p("logits", &[4, 3]);
        let lp = c.g.log_softmax(x);
        let labels = c.g.input("labels");
        c.inputs.push(("labels".into(), Tensor::from_vec(vec![0.0, 2.0, 1.0, 2.0])));
        c.g.nll(lp, labels)
    }),
    ("attention", |c| {
        let (q, k, v) = (c.p("q", &[2, 3, 4]), c.p("k", &[2, 5, 4]), c.p("v", &[2, 5, 4]));
        c.g.attention(q, k, v)
    }),
    ("linear", |c| {
        let (x, w, b) = (c.p("x", &[3, 4]), c.p("w", &[4, 2]), c.p("b", &[2]));
        c.g.linear(x, w, Some(b), 4)
    }),
];

/// Names of the primitive-op checks, in run order.
pub fn op_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = OPS.iter().map(|(n, _)| *n).collect();
    v.push("detach");
    v
}

/// Finite differences see straight through a detach, so the oracle here is
/// the closed form: `d/dx [sum(detach(x) * R) + sum(x * S)] = S`.
fn detach_check(seed: u64) -> Result<CheckResult, GradcheckError> {
    let mut g = Graph::new();
    let mut s = ParamStore::new();
    let id = s.add("x", random_tensor(&[3, 4], seed, "x")).expect("fresh store");
    let x = g.param(id);
    let d = g.detach(x);
    let (ri, si) = (g.input("r"), g.input("s"));
    let a = g.mul(d, ri);
    let b = g.mul(x, si);
    let y = g.add(a, b);
    let loss = g.sum(y);
    let (r, sv) = (random_tensor(&[3, 4], seed, "r"), random_tensor(&[3, 4], seed, "s"));
    g.evaluate(&mut s, &[("r", &r), ("s", &sv)], Mode::Train, seed)?;
    g.backward(&mut s, loss)?;
    let grad = s.param(id).grad.data();
    let (mut diff, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (gv, ev) in grad.iter().zip(sv.data()) {
        diff += (gv - ev) * (gv - ev);
        a2 += gv * gv;
        n2 += ev * ev;
    }
    Ok(CheckResult {
        name: "detach".into(),
        seed,
        rel_err: crate::gradcheck::normwise(diff, a2, n2),
        worst: Some("x".into()),
    })
}

/// Checks `sum(op(params) * R)` for a random projection `R`.
fn check_op(name: &str, build: OpBuild, seed: u64) -> Result<CheckResult, GradcheckError> {
    let mut g = Graph::new();
    let mut s = ParamStore::new();
    let mut ctx = OpCtx { g: &mut g, s: &mut s, r: rng::labeled(seed, name), inputs: Vec::new() };
    let y = build(&mut ctx);
    let (mut r, mut inputs) = (ctx.r, ctx.inputs);
    let proj = g.input("proj");
    let prod = g.mul(y, proj);
    let loss = g.sum(prod);
    inputs.push(("proj".into(), Tensor::scalar(0.0)));
    let bound: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
    g.evaluate_targets(&mut s, &bound, Mode::Train, seed, &[y])?;
    let shape = g.value(y).expect("evaluated").shape().to_vec();
    let n = shape.iter().product();
    let rt = Tensor::new(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).expect("sized");
    inputs.pop();
    inputs.push(("proj".into(), rt));
    let bound: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
    check_graph(name, g, &mut s, &bound, loss, None, Mode::Train, seed)
}

fn random_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut r = rng::labeled(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).expect("sized")
}

/// Cross-entropy of the logits plus `mean(feature^2)`, so both heads are
/// covered, on a train-mode batch of two.
pub fn expert(cfg: ExpertConfig, seed: u64) -> Result<CheckResult, GradcheckError> {
    let name = match cfg {
        ExpertConfig::CNet(_) => "cnet",
        ExpertConfig::CTNet(_) => "ctnet",
    };
    let mut e = Expert::init(cfg.clone(), seed).expect("valid check config");
    let x = random_tensor(&[2, cfg.in_channels(), cfg.time_len()], seed, "x");
    let labels = Tensor::from_vec(vec![0.0, (cfg.num_classes() - 1) as f64]);
    let mut g = e.graph().clone();
    let nodes = e.nodes();
    let lp = g.log_softmax(nodes.logits);
    let lab = g.input("labels");
    let ce = g.nll(lp, lab);
    let fsq = g.mul(nodes.feature, nodes.feature);
    let fm = g.mean(fsq);
    let loss = g.add(ce, fm);
    check_graph(name, g, &mut e.store, &[("x", &x), ("labels", &labels)], loss, Some(MAX_ENTRIES), Mode::Train, seed)
}

/// Gate, fusion and head over random expert features.
pub fn router_check(seed: u64) -> Result<CheckResult, GradcheckError> {
    let (e, d, k, b) = (5, 6, 3, 4);
    let mut g = Graph::new();
    let mut s = ParamStore::new();
    let mut feats = Vec::new();
    for i in 0..e {
        let id = s.add(&alloc::format!("feature{i}"), random_tensor(&[b, d], seed, &alloc::format!("f{i}")))
            .expect("unique");
        feats.push(g.param(id));
    }
    let nodes = router::build(&mut Builder::new(&mut g, &mut s, "router", seed), &feats, d, k)
        .expect("fresh store");
    let lp = g.log_softmax(nodes.logits);
    let lab = g.input("labels");
    let loss = g.nll(lp, lab);
    let labels = Tensor::from_vec(vec![0.0, 2.0, 1.0, 1.0]);
    check_graph("router", g, &mut s, &[("labels", &labels)], loss, None, Mode::Train, seed)
}

/// Small model for the total-loss check: desk montage, T = 32, K = 3.
pub fn check_model_config() -> ModelConfig {
    let (c, t, k) = (16, 32, 3);
    ModelConfig { channels: c, time_len: t, num_classes: k, cnet: CNetConfig::tiny(c, t, k), ctnet: CTNetConfig::tiny(c, t, k) }
}

/// `lambda L_fused + alpha L_global + beta L_local + gamma L_distill` with
/// all four weights nonzero, through the whole model in eval mode
/// (train-mode batch norm and dropout are covered by the op and expert
/// checks). The distillation
/// teacher is fed in as a constant (its stop-gradient is part of the
/// objective), evaluated once at the unperturbed parameters.
const TOTAL_BATCH: usize = 4;

pub fn total_loss(seed: u64) -> Result<CheckResult, GradcheckError> {
    let (_, p) = desk16();
    let cfg = check_model_config();
    let mut model = Model::new(Variant::Full, &cfg, &p, 4.0, seed).expect("valid check config");
    let w = ScheduledWeights { lambda: 0.6, alpha: 0.3, beta: 0.5, gamma: 0.4 };
    let x = random_tensor(&[TOTAL_BATCH, cfg.channels, cfg.time_len], seed, "x");
    let labels = Tensor::from_vec((0..TOTAL_BATCH).map(|i| (i % cfg.num_classes) as f64).collect());
    let experts = model.experts().to_vec();
    let l = model.losses();
    let mut g = model.graph().clone();
    g.evaluate_targets(&mut model.store, &[("x", &x), ("labels", &labels)], Mode::Eval, seed, &[experts[0].logits])?;
    let teacher_value = g.value(experts[0].logits).expect("evaluated").clone();
    let teacher = g.input("teacher");
    let students: Vec<NodeId> = experts.iter().filter(|e| e.region.is_some()).map(|e| e.logits).collect();
    let distill = crate::objective::distill_node(&mut g, teacher, &students, cfg.num_classes, 4.0);
    let terms = [
        (l.fused, w.lambda),
        (l.global.expect("full variant"), w.alpha),
        (l.local.expect("full variant"), w.beta),
        (distill, w.gamma),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for (node, weight) in &terms[1..] {
        let t = g.scale(*node, *weight);
        total = g.add(total, t);
    }
    let mut store = model.store.clone();
    let inputs = [("x", &x), ("labels", &labels), ("teacher", &teacher_value)];
    check_graph("total_loss", g, &mut store, &inputs, total, Some(12), Mode::Eval, seed)
}
