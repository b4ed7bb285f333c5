//! The `brainstack` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use brainstack_core::analysis::{self, AblationTask};
use brainstack_core::checks::{self, Suite};
use brainstack_core::data::{self, TrialSet};
use brainstack_core::metrics;
use brainstack_core::model::{Model, Variant};
use brainstack_core::train::{self, HistoryRow, TrainError};
use clap::{Parser, Subcommand};

use crate::config::Experiment;
use crate::csvio;
use crate::formats;

#[derive(Debug, Parser)]
#[command(name = "brainstack", version, about = "Mixture-of-experts EEG decoding on region-partitioned montages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trial file from the config's [data] section.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a trial file; writes the checkpoint, a `<out>.toml` config
    /// sidecar and the per-epoch history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Score a checkpoint on one split of a trial file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the checkpoint's sidecar.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Finite-difference gradient checks; exits 0 only if all pass.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Train every variant for every seed and tabulate test accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Trial file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Routing weights of per-subject checkpoints on their test sessions.
    /// Pairs `<ckpt-dir>/<name>.bstk` with `<data-dir>/<name>.sseg`.
    RouteReport {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

macro_rules! data_err {
    ($($t:ty),*) => {
        $( impl From<$t> for CliError {
            fn from(e: $t) -> Self { CliError::Data(e.to_string()) }
        } )*
    };
}

data_err!(
    crate::config::ConfigError,
    crate::formats::FormatError,
    crate::csvio::CsvError,
    brainstack_core::data::DataError,
    brainstack_core::model::ModelError,
    brainstack_core::metrics::MetricsError,
    brainstack_core::params::ParamError
);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<analysis::AnalysisError> for CliError {
    fn from(e: analysis::AnalysisError) -> Self {
        match e {
            analysis::AnalysisError::Train(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print and succeed.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            return Err(CliError::Usage(msg.strip_prefix("error: ").unwrap_or(&msg).trim_end().to_string()));
        }
    };
    match cli.command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Train { config, data, out, log } => train_cmd(&config, &data, &out, &log),
        Command::Eval { ckpt, data, report, config, split } => eval(&ckpt, &data, &report, config.as_deref(), &split),
        Command::Gradcheck { module, seeds } => gradcheck(&module, seeds),
        Command::Ablate { config, variants, seeds, out, data } => ablate(&config, &variants, &seeds, &out, data.as_deref()),
        Command::RouteReport { ckpt_dir, data_dir, out } => route_report(&ckpt_dir, &data_dir, &out),
    }
}

/// `<ckpt>.toml`
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".toml");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn synth(config: &Path, out: &Path) -> Result<(), CliError> {
    let exp = Experiment::load(config)?;
    let ts = data::generate_synthetic(&exp.synth()?, &exp.partition)?;
    formats::save_trials(out, &ts)?;
    println!("wrote {} trials ({} x {}, {} classes) to {}", ts.len(), ts.channels, ts.time_len, ts.num_classes, out.display());
    Ok(())
}

fn check_channels(exp: &Experiment, ts: &TrialSet) -> Result<(), CliError> {
    if ts.channels != exp.montage.len() {
        return Err(CliError::Data(format!(
            "data has {} channels but the montage has {}",
            ts.channels,
            exp.montage.len()
        )));
    }
    Ok(())
}

/// Z-scored train/val/test splits.
fn splits(exp: &Experiment, ts: &TrialSet) -> Result<(TrialSet, TrialSet, TrialSet), CliError> {
    check_channels(exp, ts)?;
    let [a, b, c] = exp.split();
    Ok(data::session_split(&ts.zscored(), a, b, c)?)
}

fn print_row(r: &HistoryRow) {
    eprintln!(
        "epoch {:3}  P {:.2}  lambda {:.2}  fused {:.4}  total {:.4}  val_acc {:.4}",
        r.epoch, r.progress, r.weights.lambda, r.losses.fused, r.total, r.val_acc
    );
}

fn train_cmd(config: &Path, data_path: &Path, out: &Path, log: &Path) -> Result<(), CliError> {
    let exp = Experiment::load(config)?;
    let ts = formats::load_trials(data_path)?;
    let (tr, va, te) = splits(&exp, &ts)?;
    let mc = exp.model_config(ts.channels, ts.time_len, ts.num_classes);
    let tc = exp.train_config(ts.num_classes)?;
    let mut outcome = train::train(&mc, &exp.partition, &tr, &va, &tc, print_row)?;
    csvio::to_file(log, |w| csvio::write_history(w, &outcome.history))?;
    formats::save_checkpoint(out, &outcome.model.store)?;
    write_text(&sidecar_path(out), &exp.to_toml()?)?;
    let test_acc = if te.is_empty() { None } else { Some(train::accuracy(&mut outcome.model, &te)?) };
    println!(
        "best epoch {}  val_acc {}  test_acc {}",
        outcome.best_epoch,
        outcome.best_val_acc,
        test_acc.map(|a| a.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Rebuilds the model described by the sidecar (or `config`) and loads the
/// checkpoint into it.
fn load_model(ckpt: &Path, config: Option<&Path>, ts: &TrialSet) -> Result<(Experiment, Model), CliError> {
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(ckpt));
    let exp = Experiment::load(&cfg_path)?;
    check_channels(&exp, ts)?;
    let mc = exp.model_config(ts.channels, ts.time_len, ts.num_classes);
    let tc = exp.train_config(ts.num_classes)?;
    let mut model = Model::new(tc.variant, &mc, &exp.partition, tc.schedule.temperature, tc.seed)?;
    let entries = formats::load_checkpoint(ckpt)?;
    model.store.load_named(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok((exp, model))
}

fn eval(ckpt: &Path, data_path: &Path, report: &Path, config: Option<&Path>, split: &str) -> Result<(), CliError> {
    let ts = formats::load_trials(data_path)?;
    let (exp, mut model) = load_model(ckpt, config, &ts)?;
    let set = match split {
        "all" => ts.zscored(),
        _ => {
            let (tr, va, te) = splits(&exp, &ts)?;
            match split {
                "train" => tr,
                "val" => va,
                _ => te,
            }
        }
    };
    let preds = train::predict_classes(&mut model, &set)?;
    let m = metrics::evaluate(&preds, &set.labels(), set.num_classes)?;
    csvio::to_file(report, |w| csvio::write_metrics(w, &m))?;
    println!("{split}: {} trials  accuracy {}  macro_f1 {}", set.len(), m.accuracy, m.macro_f1);
    Ok(())
}

fn gradcheck(module: &str, seeds: u64) -> Result<(), CliError> {
    let suites: Vec<Suite> = match module {
        "all" => Suite::ALL.to_vec(),
        m => vec![m.parse().map_err(|e: checks::UnknownSuite| CliError::Usage(e.to_string()))?],
    };
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut failed = Vec::new();
    for suite in suites {
        let mut worst = 0.0f64;
        let mut count = 0;
        for seed in 0..seeds {
            let results = checks::run(suite, seed).map_err(|e| CliError::Numeric(format!("{suite} seed {seed}: {e}")))?;
            for r in results {
                count += 1;
                worst = worst.max(r.rel_err);
                if !r.passed() {
                    failed.push(format!("{} seed {} rel_err {:e} ({})", r.name, r.seed, r.rel_err, r.worst.unwrap_or_default()));
                }
            }
        }
        println!("{suite:<9} {count:4} checks  max rel_err {worst:.2e}");
    }
    if failed.is_empty() {
        println!("all gradient checks passed (tolerance {:e})", checks::TOLERANCE);
        Ok(())
    } else {
        for f in &failed {
            println!("FAIL {f}");
        }
        Err(CliError::Numeric(format!("{} gradient checks failed", failed.len())))
    }
}

/// `<out>` with `suffix` replacing the extension.
fn companion(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn ablate(config: &Path, variants: &[String], seeds: &[u64], out: &Path, data_path: Option<&Path>) -> Result<(), CliError> {
    let exp = Experiment::load(config)?;
    let variants: Vec<Variant> = variants
        .iter()
        .map(|v| v.parse().map_err(|e: brainstack_core::model::UnknownVariant| CliError::Usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    let ts = match data_path {
        Some(p) => formats::load_trials(p)?,
        None => data::generate_synthetic(&exp.synth()?, &exp.partition)?,
    };
    let (tr, va, te) = splits(&exp, &ts)?;
    let mc = exp.model_config(ts.channels, ts.time_len, ts.num_classes);
    let base = exp.train_config(ts.num_classes)?;
    let task = AblationTask { config: &mc, partition: &exp.partition, train: &tr, val: &va, test: &te };
    let table = analysis::run_ablation(task, &base, &variants, seeds, |r| {
        eprintln!("{:<17} seed {}  best epoch {:3}  test_acc {}", r.variant.name(), r.seed, r.best_epoch, r.test.accuracy);
    })?;
    csvio::to_file(out, |w| csvio::write_ablation(w, &table))?;
    csvio::to_file(&companion(out, "_runs.csv"), |w| csvio::write_ablation_runs(w, &table))?;
    for s in &table.summary {
        println!("{:<17} mean {:.4}  min {:.4}  max {:.4}", s.variant.name(), s.mean, s.min, s.max);
    }
    Ok(())
}

fn route_report(ckpt_dir: &Path, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let read = fs::read_dir(ckpt_dir).map_err(|e| CliError::Data(format!("{}: {e}", ckpt_dir.display())))?;
    let mut ckpts: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bstk"))
        .collect();
    ckpts.sort();
    if ckpts.is_empty() {
        return Err(CliError::Data(format!("no .bstk checkpoints in {}", ckpt_dir.display())));
    }
    let mut loaded = Vec::new();
    for ckpt in &ckpts {
        let stem = ckpt.file_stem().expect("has extension").to_string_lossy().into_owned();
        let ts = formats::load_trials(&data_dir.join(format!("{stem}.sseg")))?;
        let (exp, model) = load_model(ckpt, None, &ts)?;
        let (_, _, te) = splits(&exp, &ts)?;
        loaded.push((model, te));
    }
    let mut runs: Vec<(&mut Model, &TrialSet)> = loaded.iter_mut().map(|(m, t)| (m, &*t)).collect();
    let report = analysis::route_report(&mut runs)?;
    csvio::to_file(out, |w| csvio::write_routes(w, &report))?;
    csvio::to_file(&companion(out, "_summary.csv"), |w| csvio::write_route_summary(w, &report))?;
    for (i, e) in report.experts.iter().enumerate() {
        let r = report.correlation[i].map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
        println!("{e:<11} mean alpha {:.4}  pearson r {r}", report.mean_alpha[i]);
    }
    Ok(())
}
