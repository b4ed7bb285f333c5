//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILING` are evaluated and reported like every
//! other criterion but do not fail the process.
//! Set `ACCEPTANCE_ONLY=1,3,8` to run a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use brainstack::csvio;
use brainstack::formats::{self, FormatError};
use brainstack_core::analysis;
use brainstack_core::checks::{self, Suite};
use brainstack_core::data::{generate_synthetic, session_split, SynthConfig, TrialSet};
use brainstack_core::graph::{Graph, Mode};
use brainstack_core::model::{Model, ModelConfig, Variant};
use brainstack_core::montage::{desk16, Region, RegionPartition};
use brainstack_core::objective::{self, ScheduleConfig};
use brainstack_core::router::{self, Gate};
use brainstack_core::train::{self, TrainConfig};
use brainstack_core::{ParamStore, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const KNOWN_FAILING: &[u8] = &[5];

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ROUTER_CASES: u32 = 1000;
const SIMPLEX_TOL: f64 = 1e-9;
const DISTILL_TOL: f64 = 1e-9;
const CE_TOL: f64 = 1e-10;
const LEARN_EPOCHS: usize = 50;
const LEARN_TARGET: f64 = 0.90;
const RUN_BUDGET: Duration = Duration::from_secs(300);
const SEEDS: [u64; 3] = [0, 1, 2];
const ATTRIBUTION_MIN_SEEDS: usize = 2;
const ABLATION_TIE: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// The default synthetic task, z-scored and split by session.
struct Task {
    partition: RegionPartition,
    mc: ModelConfig,
    train: TrialSet,
    val: TrialSet,
    test: TrialSet,
}

fn task() -> Task {
    let (_, partition) = desk16();
    let cfg = SynthConfig::desk();
    let ts = generate_synthetic(&cfg, &partition).unwrap().zscored();
    let (train, val, test) = session_split(&ts, 2, 1, 1).unwrap();
    Task { mc: ModelConfig::desk(cfg.channels, cfg.time_len, cfg.num_classes), partition, train, val, test }
}

struct Run {
    seed: u64,
    model: Model,
    best_epoch: usize,
    best_val_acc: f64,
    test_acc: f64,
    elapsed: Duration,
}

fn train_run(t: &Task, variant: Variant, seed: u64) -> Run {
    let tc = TrainConfig { variant, seed, max_epochs: LEARN_EPOCHS, ..TrainConfig::defaults(4) };
    let start = Instant::now();
    let mut out = train::train(&t.mc, &t.partition, &t.train, &t.val, &tc, |_| {}).unwrap();
    let elapsed = start.elapsed();
    let test_acc = train::accuracy(&mut out.model, &t.test).unwrap();
    eprintln!(
        "  trained {:<11} seed {seed}: best epoch {:2}, val {:.3}, test {:.3}, {:.0}s",
        variant.name(),
        out.best_epoch,
        out.best_val_acc,
        test_acc,
        elapsed.as_secs_f64()
    );
    Run { seed, model: out.model, best_epoch: out.best_epoch, best_val_acc: out.best_val_acc, test_acc, elapsed }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    let mut failures = 0;
    for suite in Suite::ALL {
        for seed in 0..GRAD_SEEDS {
            for r in checks::run(suite, seed).unwrap() {
                count += 1;
                failures += usize::from(!r.passed());
                if r.rel_err > worst.0 {
                    worst = (r.rel_err, format!("{} seed {}", r.name, r.seed));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < GRAD_BUDGET,
        format!(
            "{count} checks over {GRAD_SEEDS} seeds, {failures} failed, max rel_err {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn routing_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64, usize, Vec<usize>)> {
    (1usize..10, 1usize..12).prop_flat_map(|(e, d)| {
        (
            proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, d), e),
            proptest::collection::vec(-3.0f64..3.0, d),
            -2.0f64..2.0,
            0..e,
            Just((0..e).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

fn routing_invariants() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: ROUTER_CASES, failure_persistence: None, ..Config::default() });
    let result = runner.run(&routing_case(), |(features, weight, bias, pick, perm)| {
        let gate = Gate { weight, bias };
        let state = router::route(&features, &gate).unwrap();
        let sum: f64 = state.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() <= SIMPLEX_TOL, "sum {}", sum);
        prop_assert!(state.weights.iter().all(|a| (0.0..=1.0).contains(a)));

        let mut one_hot = vec![0.0; features.len()];
        one_hot[pick] = 1.0;
        let selected = router::fuse(&features, &one_hot).unwrap();
        prop_assert!(selected.iter().zip(&features[pick]).all(|(a, b)| a.to_bits() == b.to_bits()));

        let fused = router::fuse(&features, &state.weights).unwrap();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| features[i].clone()).collect();
        let pstate = router::route(&permuted, &gate).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pstate.weights[j].to_bits(), state.weights[i].to_bits());
        }
        let pfused = router::fuse(&permuted, &pstate.weights).unwrap();
        prop_assert!(pfused.iter().zip(&fused).all(|(a, b)| a.to_bits() == b.to_bits()));
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, format!("{ROUTER_CASES} random cases: simplex, one-hot selection, permutation")),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn objective_invariants() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |pass: bool, what: String| {
        ok &= pass;
        if !pass {
            notes.push(what);
        }
    };

    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    let logits = (2usize..8).prop_flat_map(|k| {
        (
            proptest::collection::vec(-20.0f64..20.0, k),
            proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, k), 7),
            0.5f64..8.0,
        )
    });
    let r = runner.run(&logits, |(teacher, students, t)| {
        let d = objective::distill_loss(&teacher, &students, t).unwrap();
        prop_assert!(d >= 0.0, "distill {}", d);
        let same = vec![teacher.clone(); 7];
        prop_assert!(objective::distill_loss(&teacher, &same, t).unwrap().abs() <= DISTILL_TOL);
        Ok(())
    });
    check(r.is_ok(), format!("distill: {r:?}"));

    // teacher gradient through the graph
    let mut s = ParamStore::new();
    let data = |seed: u64| Tensor::new(vec![3, 4], (0..12).map(|i| ((i as u64 * 7 + seed) % 11) as f64 - 5.0).collect());
    let teacher = s.add("teacher", data(1).unwrap()).unwrap();
    let students: Vec<_> = (0..7).map(|i| s.add(&format!("s{i}"), data(i + 2).unwrap()).unwrap()).collect();
    let mut g = Graph::new();
    let tn = g.param(teacher);
    let sn: Vec<_> = students.iter().map(|p| g.param(*p)).collect();
    let kl = objective::distill_node(&mut g, tn, &sn, 4, 4.0);
    g.evaluate(&mut s, &[], Mode::Train, 0).unwrap();
    g.backward(&mut s, kl).unwrap();
    let teacher_zero = s.param(teacher).grad.data().iter().all(|v| *v == 0.0);
    let students_move = students.iter().all(|p| s.param(*p).grad.norm() > 0.0);
    check(teacher_zero && students_move, "teacher gradient not exactly zero".into());

    let ce = objective::cross_entropy(&[0.3; 4], 2).unwrap();
    check((ce - 4f64.ln()).abs() <= CE_TOL, format!("uniform CE {ce}"));

    let cfg = ScheduleConfig::for_classes(4);
    let (tw, tt) = (cfg.warmup, cfg.transition);
    let at = |e: usize| objective::schedule_weights(e, 0.0, &cfg);
    let (w0, ww, we) = (at(0), at(tw), at(tw + tt));
    check(w0.lambda == 0.0 && w0.alpha == 0.8 && w0.beta == 0.0 && w0.gamma == 0.0, format!("epoch 0: {w0:?}"));
    check((ww.lambda - 0.2).abs() < 1e-12 && (ww.alpha - 0.8).abs() < 1e-12, format!("epoch {tw}: {ww:?}"));
    check(
        (we.lambda - 1.0).abs() < 1e-12 && we.alpha == 0.0 && we.beta == cfg.beta_max && we.gamma == cfg.gamma_max,
        format!("epoch {}: {we:?}", tw + tt),
    );
    let closed = objective::schedule_weights(tw + 3, cfg.max_loss_estimate, &cfg);
    check(closed.alpha == 0.0 && closed.beta == 0.0 && closed.gamma == 0.0, format!("closed gate: {closed:?}"));

    let detail = if ok {
        format!(
            "distill >= 0 and 0 on identical logits, teacher grad 0, CE(uniform) = ln 4 ({ce:.12}), \
             schedule at epochs 0/{tw}/{}: lambda {}/{}/{}, global {}/{}/{}",
            tw + tt,
            w0.lambda,
            ww.lambda,
            we.lambda,
            w0.alpha,
            ww.alpha,
            we.alpha
        )
    } else {
        notes.join("; ")
    };
    outcome(ok, detail)
}

fn learnability(runs: &[Run]) -> Outcome {
    let pass = runs.iter().all(|r| r.best_val_acc >= LEARN_TARGET && r.elapsed < RUN_BUDGET);
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} val {:.3} at epoch {} in {:.0}s", r.seed, r.best_val_acc, r.best_epoch, r.elapsed.as_secs_f64()))
        .collect();
    outcome(pass, per.join(", "))
}

fn attribution(t: &Task, runs: &mut [Run]) -> Outcome {
    let informative = [Region::LeftTemporal.tag(), Region::Occipital.tag()];
    let mut good = 0;
    let mut per = Vec::new();
    for r in runs.iter_mut() {
        let rep = analysis::route_report(&mut [(&mut r.model, &t.test)]).unwrap();
        let alpha = |name: &str| rep.mean_alpha[rep.experts.iter().position(|e| e == name).unwrap()];
        let inf_min = informative.iter().map(|n| alpha(n)).fold(f64::INFINITY, f64::min);
        let other_max = Region::ALL
            .iter()
            .map(|r| r.tag())
            .filter(|n| !informative.contains(n))
            .map(alpha)
            .fold(f64::NEG_INFINITY, f64::max);
        good += usize::from(inf_min > other_max);
        let cells: Vec<String> = rep.experts.iter().zip(&rep.mean_alpha).map(|(e, a)| format!("{e} {a:.4}")).collect();
        per.push(format!("seed {}: informative min {inf_min:.4} vs other max {other_max:.4} [{}]", r.seed, cells.join(" ")));
    }
    outcome(good >= ATTRIBUTION_MIN_SEEDS, format!("{good}/3 seeds; {}", per.join("; ")))
}

fn ablation_order(full: &[Run], no_distill: &[Run], local_only: &[Run]) -> Outcome {
    let mean = |rs: &[Run]| rs.iter().map(|r| r.test_acc).sum::<f64>() / rs.len() as f64;
    let (f, nd, lo) = (mean(full), mean(no_distill), mean(local_only));
    outcome(
        f >= nd - ABLATION_TIE && f >= lo - ABLATION_TIE,
        format!("mean test accuracy: full {f:.4}, no_distill {nd:.4}, local_only {lo:.4}"),
    )
}

fn leakage_and_determinism() -> Outcome {
    let (_, p) = desk16();
    let mut checked = 0;
    let mut leaks = 0;
    for seed in 0..4u64 {
        let subjects: Vec<TrialSet> = ["A", "B", "C"]
            .iter()
            .map(|s| {
                let cfg = SynthConfig {
                    time_len: 16,
                    sessions: 5,
                    trials_per_session: 4,
                    subject: s.to_string(),
                    seed: seed * 10 + s.len() as u64,
                    ..SynthConfig::desk()
                };
                generate_synthetic(&cfg, &p).unwrap()
            })
            .collect();
        let mut trials: Vec<_> = subjects.iter().flat_map(|s| s.trials.iter().cloned()).collect();
        trials.reverse();
        let all = subjects[0].with_trials(trials);
        for a in 0..=5 {
            for b in 0..=5 - a {
                let (tr, va, te) = session_split(&all, a, b, 5 - a - b).unwrap();
                let key = |ts: &TrialSet| ts.trials.iter().map(|t| (t.subject.clone(), t.session)).collect::<BTreeSet<_>>();
                let (x, y, z) = (key(&tr), key(&va), key(&te));
                checked += 1;
                if !x.is_disjoint(&y) || !x.is_disjoint(&z) || !y.is_disjoint(&z) || tr.len() + va.len() + te.len() != all.len() {
                    leaks += 1;
                }
            }
        }
    }

    let cfg = SynthConfig { time_len: 64, sessions: 4, trials_per_session: 8, ..SynthConfig::desk() };
    let ts = generate_synthetic(&cfg, &p).unwrap().zscored();
    let (tr, va, _) = session_split(&ts, 2, 1, 1).unwrap();
    let mut mc = ModelConfig::desk(16, 64, 4);
    mc.cnet.temporal_kernel = 16;
    mc.cnet.pool2 = 4;
    mc.ctnet.layers = 1;
    let mut tc = TrainConfig { max_epochs: 5, batch_size: 8, seed: 3, ..TrainConfig::defaults(4) };
    tc.schedule.warmup = 1;
    tc.schedule.transition = 2;
    let history = || {
        let out = train::train(&mc, &p, &tr, &va, &tc, |_| {}).unwrap();
        csvio::history_string(&out.history)
    };
    let (h1, h2) = (history(), history());
    let identical = h1.as_bytes() == h2.as_bytes();
    outcome(
        leaks == 0 && identical,
        format!(
            "{checked} splits of 3-subject sets, {leaks} leaking; rerun history CSVs {} ({} bytes)",
            if identical { "byte-identical" } else { "differ" },
            h1.len()
        ),
    )
}

fn format_round_trips(model: &Model) -> Outcome {
    let (_, p) = desk16();
    let ts = generate_synthetic(&SynthConfig { sessions: 2, trials_per_session: 8, ..SynthConfig::desk() }, &p).unwrap();
    let mut problems = Vec::new();

    let bytes = formats::encode_trials(&ts).unwrap();
    let back = formats::decode_trials(&bytes).unwrap();
    let bit_exact = back.trials.iter().zip(&ts.trials).all(|(a, b)| {
        a.label == b.label
            && a.session == b.session
            && a.subject == b.subject
            && a.trial_id == b.trial_id
            && a.x.data().iter().zip(b.x.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    if !(bit_exact && back.len() == ts.len() && formats::encode_trials(&back).unwrap() == bytes) {
        problems.push("trial file round trip".to_string());
    }

    let ck = formats::encode_checkpoint(model.store.named_tensors()).unwrap();
    let entries = formats::decode_checkpoint(&ck).unwrap();
    let stored_exact = entries.iter().zip(model.store.named_tensors()).all(|((n, t), (n0, t0))| {
        n == n0 && t.shape() == t0.shape() && t.data().iter().zip(t0.data()).all(|(a, b)| a.to_bits() == (*b as f32 as f64).to_bits())
    });
    let re = formats::encode_checkpoint(entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    let mut reload = model.clone();
    reload.store.load_named(entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    let re_store = formats::encode_checkpoint(reload.store.named_tensors()).unwrap();
    if !(stored_exact && re == ck && re_store == ck) {
        problems.push("checkpoint round trip".to_string());
    }

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    if !matches!(formats::decode_trials(&bad), Err(FormatError::Magic { found, .. }) if &found == b"XXXX") {
        problems.push("trial magic".into());
    }
    let mut bad = ck.clone();
    bad[..4].copy_from_slice(b"XXXX");
    if !matches!(formats::decode_checkpoint(&bad), Err(FormatError::Magic { .. })) {
        problems.push("checkpoint magic".into());
    }
    let mut cuts = 0;
    for (buf, is_trials) in [(&bytes, true), (&ck, false)] {
        for cut in [0, 2, 6, 11, 25, buf.len() / 2, buf.len() - 1] {
            let err = if is_trials {
                formats::decode_trials(&buf[..cut]).err()
            } else {
                formats::decode_checkpoint(&buf[..cut]).err()
            };
            cuts += 1;
            if !matches!(err, Some(FormatError::Truncated { offset, .. }) if offset == cut) {
                problems.push(format!("truncation at {cut} ({})", if is_trials { "trials" } else { "checkpoint" }));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} trials and {} checkpoint tensors bit-exact; magic and {cuts} truncations reported with offsets",
                ts.len(),
                entries.len()
            )
        } else {
            problems.join(", ")
        },
    )
}

fn main() {
    let only: Option<BTreeSet<u8>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u8| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |id: u8, name: &'static str, o: Outcome| {
        let tag = match (o.pass, KNOWN_FAILING.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id} [{name}]: {tag}: {}", o.detail);
        results.push((id, name, o));
    };

    if wanted(1) {
        report(1, "gradient oracle", gradient_oracle());
    }
    if wanted(2) {
        report(2, "routing invariants", routing_invariants());
    }
    if wanted(3) {
        report(3, "objective invariants", objective_invariants());
    }
    let needs_training = [4, 5, 6, 8].iter().any(|&i| wanted(i));
    if needs_training {
        let t = task();
        let mut full: Vec<Run> = SEEDS.iter().map(|&s| train_run(&t, Variant::Full, s)).collect();
        if wanted(4) {
            report(4, "synthetic learnability", learnability(&full));
        }
        if wanted(5) {
            report(5, "routing attribution", attribution(&t, &mut full));
        }
        if wanted(6) {
            let nd: Vec<Run> = SEEDS.iter().map(|&s| train_run(&t, Variant::NoDistill, s)).collect();
            let lo: Vec<Run> = SEEDS.iter().map(|&s| train_run(&t, Variant::LocalOnly, s)).collect();
            report(6, "ablation ordering", ablation_order(&full, &nd, &lo));
        }
        if wanted(8) {
            report(8, "format round-trips", format_round_trips(&full[0].model));
        }
    }
    if wanted(7) {
        report(7, "leakage and determinism", leakage_and_determinism());
    }

    let unexpected: Vec<u8> =
        results.iter().filter(|(id, _, o)| !o.pass && !KNOWN_FAILING.contains(id)).map(|(id, _, _)| *id).collect();
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}

