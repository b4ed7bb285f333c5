use std::path::Path;

use brainstack::config::{ConfigError, Experiment};
use brainstack_core::model::Variant;
use brainstack_core::montage::Region;

fn parse(text: &str) -> Result<Experiment, ConfigError> {
    Experiment::parse(text, Path::new("."))
}

#[test]
fn empty_config_gives_library_defaults() {
    let e = parse("").unwrap();
    assert_eq!(e.montage.len(), 16);
    assert_eq!(e.split(), [2, 1, 1]);
    let s = e.synth().unwrap();
    assert_eq!((s.channels, s.time_len, s.num_classes, s.snr_db), (16, 256, 4, 20.0));
    assert_eq!(s.informative_regions[3], vec![Region::Occipital, Region::LeftTemporal]);
    let tc = e.train_config(4).unwrap();
    assert_eq!((tc.lr, tc.momentum, tc.batch_size, tc.patience, tc.max_epochs), (5e-3, 0.9, 32, 5, 100));
    assert_eq!(tc.variant, Variant::Full);
    assert_eq!((tc.schedule.lambda_min, tc.schedule.lambda_max), (0.2, 1.0));
    assert!((tc.schedule.max_loss_estimate - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn sections_override_defaults() {
    let e = parse(
        r#"
split = [3, 1, 0]

[data]
sessions = 4
snr_db = -5.0
informative_regions = { 0 = ["Occipital"], 1 = ["ltemporal"], 2 = ["occipital"], 3 = ["Occipital", "Frontal"] }

[model]
feature_dim = 24

[cnet]
pool2 = 4

[ctnet]
layers = 1
heads = 2

[train]
lr = 0.01
variant = "no_distill"
seed = 5

[schedule]
warmup = 3
gamma_max = 0.5
"#,
    )
    .unwrap();
    assert_eq!(e.split(), [3, 1, 0]);
    let s = e.synth().unwrap();
    assert_eq!(s.snr_db, -5.0);
    assert_eq!(s.informative_regions[1], vec![Region::LeftTemporal]);
    assert_eq!(s.informative_regions[2], vec![Region::Occipital]);
    let mc = e.model_config(16, 256, 4);
    assert_eq!((mc.cnet.feature_dim, mc.ctnet.feature_dim, mc.cnet.pool2), (24, 24, 4));
    assert_eq!((mc.ctnet.layers, mc.ctnet.heads), (1, 2));
    let tc = e.train_config(4).unwrap();
    assert_eq!((tc.lr, tc.seed, tc.variant), (0.01, 5, Variant::NoDistill));
    assert_eq!((tc.schedule.warmup, tc.schedule.gamma_max), (3, 0.5));
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    assert!(matches!(parse("[train]\nlearning_rate = 1.0"), Err(ConfigError::Syntax(_))));
    assert!(matches!(parse("bogus = 1"), Err(ConfigError::Syntax(_))));
    assert!(matches!(parse("[train]\nvariant = \"mixture\""), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("[train]\nlr = -1.0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("[train]\npatience = 0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("[data]\nchannels = 12"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("[data]\ninformative_regions = [\"Cerebellum\"]"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("[data]\ninformative_regions = { 7 = [\"Occipital\"] }"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse("montage = \"missing.txt\""), Err(ConfigError::Io { .. })));
}

#[test]
fn std64_and_montage_files() {
    let e = parse("montage = \"std64\"").unwrap();
    assert_eq!(e.montage.len(), 64);
    assert_eq!(e.synth().unwrap().channels, 64);

    let dir = tempfile::tempdir().unwrap();
    let (m, p) = brainstack_core::montage::desk16();
    std::fs::write(dir.path().join("m.txt"), brainstack_core::montage::to_config_text(&m, &p)).unwrap();
    std::fs::write(dir.path().join("exp.toml"), "montage = \"m.txt\"\n[train]\nmax_epochs = 3\n").unwrap();
    let e = Experiment::load(&dir.path().join("exp.toml")).unwrap();
    assert_eq!(e.partition, p);

    // the serialized form stands alone: it reloads from another directory
    let text = e.to_toml().unwrap();
    let again = Experiment::parse(&text, Path::new("/")).unwrap();
    assert_eq!(again.partition, p);
    assert_eq!(again.train_config(4).unwrap().max_epochs, 3);
}
