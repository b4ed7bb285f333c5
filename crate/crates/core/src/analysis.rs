//! Routing-weight reports and the ablation runner.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::TrialSet;
use crate::metrics::{self, Metrics, MetricsError};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::montage::RegionPartition;
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("nothing to report")]
    Empty,
    #[error("models disagree on expert list: {0:?} vs {1:?}")]
    ExpertMismatch(Vec<String>, Vec<String>),
}

/// Routing weights of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRow {
    pub trial_id: u32,
    pub subject: String,
    pub label: usize,
    pub pred: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRoute {
    pub subject: String,
    pub mean_alpha: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteReport {
    pub experts: Vec<String>,
    pub rows: Vec<RouteRow>,
    pub subjects: Vec<SubjectRoute>,
    /// Mean weight per expert over every trial.
    pub mean_alpha: Vec<f64>,
    /// Correlation across subjects between an expert's mean weight and
    /// subject accuracy; `None` with fewer than two subjects or when either
    /// side is constant.
    pub correlation: Vec<Option<f64>>,
}

const BATCH: usize = 64;

fn mean_rows(rows: &[&RouteRow], e: usize) -> Vec<f64> {
    let mut m = vec![0.0; e];
    for r in rows {
        m.iter_mut().zip(&r.alpha).for_each(|(s, a)| *s += a);
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|s| *s /= n);
    m
}

/// Eval-mode routing weights for every trial; each model is scored on its
/// own set, grouped by subject.
pub fn route_report(runs: &mut [(&mut Model, &TrialSet)]) -> Result<RouteReport, AnalysisError> {
    let first = runs.first().ok_or(AnalysisError::Empty)?;
    let experts: Vec<String> = first.0.expert_names().iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (model, set) in runs.iter_mut() {
        let names: Vec<String> = model.expert_names().iter().map(|s| s.to_string()).collect();
        if names != experts {
            return Err(AnalysisError::ExpertMismatch(experts, names));
        }
        let e = names.len();
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(BATCH) {
            let (x, _) = set.batch(chunk);
            let p = model.predict(&x)?;
            for (r, &i) in chunk.iter().enumerate() {
                let t = &set.trials[i];
                rows.push(RouteRow {
                    trial_id: t.trial_id,
                    subject: t.subject.clone(),
                    label: t.label,
                    pred: p.classes[r],
                    alpha: p.alpha.data()[r * e..(r + 1) * e].to_vec(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let e = experts.len();
    let mut subject_names: Vec<String> = Vec::new();
    for r in &rows {
        if !subject_names.contains(&r.subject) {
            subject_names.push(r.subject.clone());
        }
    }
    let subjects: Vec<SubjectRoute> = subject_names
        .into_iter()
        .map(|s| {
            let mine: Vec<&RouteRow> = rows.iter().filter(|r| r.subject == s).collect();
            let correct = mine.iter().filter(|r| r.pred == r.label).count();
            SubjectRoute { accuracy: correct as f64 / mine.len() as f64, mean_alpha: mean_rows(&mine, e), subject: s }
        })
        .collect();
    let all: Vec<&RouteRow> = rows.iter().collect();
    let mean_alpha = mean_rows(&all, e);
    let acc: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
    let correlation = (0..e)
        .map(|j| {
            let w: Vec<f64> = subjects.iter().map(|s| s.mean_alpha[j]).collect();
            metrics::pearson_r(&w, &acc).ok()
        })
        .collect();
    Ok(RouteReport { experts, rows, subjects, mean_alpha, correlation })
}

/// Data and model shapes shared by every ablation run.
#[derive(Debug, Clone, Copy)]
pub struct AblationTask<'a> {
    pub config: &'a ModelConfig,
    pub partition: &'a RegionPartition,
    pub train: &'a TrialSet,
    pub val: &'a TrialSet,
    pub test: &'a TrialSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, variant: Variant) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

/// Trains each variant from scratch once per seed and scores it on the test
/// split.
pub fn run_ablation(
    task: AblationTask<'_>,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationTable, AnalysisError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let tc = TrainConfig { variant, seed, ..base.clone() };
            let mut out = train::train(task.config, task.partition, task.train, task.val, &tc, |_| {})?;
            let preds = train::predict_classes(&mut out.model, task.test)?;
            let test = metrics::evaluate(&preds, &task.test.labels(), task.test.num_classes)?;
            let run = AblationRun { variant, seed, best_epoch: out.best_epoch, val_acc: out.best_val_acc, test };
            on_run(&run);
            runs.push(run);
        }
    }
    let summary = variants
        .iter()
        .map(|&variant| {
            let acc: Vec<f64> =
                runs.iter().filter(|r| r.variant == variant).map(|r| r.test.accuracy).collect();
            AblationSummary {
                variant,
                runs: acc.len(),
                mean: acc.iter().sum::<f64>() / acc.len() as f64,
                min: acc.iter().copied().fold(f64::INFINITY, f64::min),
                max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(AblationTable { runs, summary })
}
