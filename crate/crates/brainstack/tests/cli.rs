use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
time_len = 64
sessions = 4
trials_per_session = 12

[cnet]
temporal_kernel = 16
pool2 = 4

[ctnet]
layers = 1

[train]
max_epochs = 3
batch_size = 8

[schedule]
warmup = 1
transition = 1
"#;

fn brainstack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainstack")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brainstack(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    brainstack(dir, args).status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    dir
}

#[test]
fn synth_train_eval() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth", "--config", "exp.toml", "--out", "s.sseg"]);
    ok(d, &["train", "--config", "exp.toml", "--data", "s.sseg", "--out", "m.bstk", "--log", "h.csv"]);
    let history = std::fs::read_to_string(d.join("h.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next().unwrap(), "epoch,P,lambda,alpha,beta,gamma,L_fused,L_global,L_local,L_distill,L_total,val_acc");
    assert_eq!(lines.count(), 3);
    assert!(d.join("m.bstk.toml").exists());

    ok(d, &["eval", "--ckpt", "m.bstk", "--data", "s.sseg", "--report", "r.csv"]);
    let report = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.starts_with("key,value\naccuracy,"));
    assert!(report.contains("confusion_3_3,"));
    ok(d, &["eval", "--ckpt", "m.bstk", "--data", "s.sseg", "--report", "all.csv", "--split", "all", "--config", "exp.toml"]);
}

#[test]
fn training_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth", "--config", "exp.toml", "--out", "s.sseg"]);
    for log in ["a.csv", "b.csv"] {
        ok(d, &["train", "--config", "exp.toml", "--data", "s.sseg", "--out", "m.bstk", "--log", log]);
    }
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn route_report_over_subjects() {
    let dir = setup();
    let d = dir.path();
    std::fs::create_dir_all(d.join("ckpt")).unwrap();
    std::fs::create_dir_all(d.join("data")).unwrap();
    for (i, subject) in ["s01", "s02", "s03"].iter().enumerate() {
        let cfg = TINY
            .replace("[data]\n", &format!("[data]\nsubject = \"{subject}\"\nseed = {i}\n"));
        std::fs::write(d.join("cfg.toml"), cfg).unwrap();
        let data = format!("data/{subject}.sseg");
        ok(d, &["synth", "--config", "cfg.toml", "--out", &data]);
        let ckpt = format!("ckpt/{subject}.bstk");
        ok(d, &["train", "--config", "cfg.toml", "--data", &data, "--out", &ckpt, "--log", "h.csv"]);
    }
    let stdout = ok(d, &["route-report", "--ckpt-dir", "ckpt", "--data-dir", "data", "--out", "routes.csv"]);
    assert!(stdout.contains("occipital"));
    let routes = std::fs::read_to_string(d.join("routes.csv")).unwrap();
    let mut rows = routes.lines();
    assert_eq!(
        rows.next().unwrap(),
        "trial_id,subject,label,pred,alpha_global,alpha_prefrontal,alpha_frontal,alpha_central,\
         alpha_ltemporal,alpha_rtemporal,alpha_parietal,alpha_occipital"
    );
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 3 * 12);
    for r in &rows {
        let alpha: f64 = r.split(',').skip(4).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((alpha - 1.0).abs() < 1e-9);
    }
    let summary = std::fs::read_to_string(d.join("routes_summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("subject:s02,")));
    assert!(summary.lines().any(|l| l.starts_with("pearson_r,")));
}

#[test]
fn ablate_writes_summary_and_runs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["ablate", "--config", "exp.toml", "--variants", "global_only,local_only", "--seeds", "0", "--out", "ab.csv"]);
    let table = std::fs::read_to_string(d.join("ab.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,runs,mean,min,max");
    assert!(lines[1].starts_with("global_only,1,"));
    assert!(lines[2].starts_with("local_only,1,"));
    let runs = std::fs::read_to_string(d.join("ab_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
}

#[test]
fn gradcheck_module() {
    let dir = setup();
    let stdout = ok(dir.path(), &["gradcheck", "--module", "router", "--seeds", "2"]);
    assert!(stdout.contains("all gradient checks passed"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(d, &["nonsense"]), 1);
    assert_eq!(code(d, &["train", "--config", "exp.toml"]), 1);
    assert_eq!(code(d, &["gradcheck", "--module", "everything"]), 1);
    assert_eq!(code(d, &["ablate", "--config", "exp.toml", "--variants", "bogus", "--out", "x.csv"]), 1);
    assert_eq!(code(d, &["--help"]), 0);

    std::fs::write(d.join("junk.sseg"), b"XXXX\x01\0\0\0").unwrap();
    let out = brainstack(d, &["train", "--config", "exp.toml", "--data", "junk.sseg", "--out", "m.bstk", "--log", "h.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    std::fs::write(d.join("bad.toml"), "[train]\nlr = \"fast\"\n").unwrap();
    assert_eq!(code(d, &["synth", "--config", "bad.toml", "--out", "s.sseg"]), 2);

    std::fs::write(d.join("hot.toml"), TINY.replace("batch_size = 8", "batch_size = 8\nlr = 1e300")).unwrap();
    ok(d, &["synth", "--config", "hot.toml", "--out", "s.sseg"]);
    let out = brainstack(d, &["train", "--config", "hot.toml", "--data", "s.sseg", "--out", "m.bstk", "--log", "h.csv"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
