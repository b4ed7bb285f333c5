//! Minibatch training with a global warm-up, scheduled loss weights and
//! early stopping on validation accuracy.

use alloc::vec::Vec;

use crate::data::TrialSet;
use crate::graph::{GraphError, Mode};
use crate::model::{LossValues, Model, ModelConfig, ModelError, Variant, GLOBAL};
use crate::montage::RegionPartition;
use crate::objective::{self, ObjectiveError, ScheduleConfig, ScheduledWeights};
use crate::params::{sgd_step, sgd_step_filtered, ParamError, ParamStore, Sgd};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub variant: Variant,
}

impl TrainConfig {
    pub fn defaults(num_classes: usize) -> Self {
        Self {
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            schedule: ScheduleConfig::for_classes(num_classes),
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &'static str| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.patience < 1 || self.max_epochs < 1 || self.batch_size < 1 {
            return bad("patience, max_epochs and batch_size must be >= 1");
        }
        self.schedule.validate()?;
        Ok(())
    }

    /// Schedule after applying the variant's overrides.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        let mut s = self.schedule.clone();
        if !self.variant.warms_up() {
            s.warmup = 0;
        }
        if !self.variant.distills() {
            s.gamma_max = 0.0;
        }
        s
    }

    fn sgd(&self) -> Sgd {
        Sgd { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Schedule(#[from] ObjectiveError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: alloc::string::String },
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub progress: f64,
    pub weights: ScheduledWeights,
    pub losses: LossValues,
    pub total: f64,
    pub val_acc: f64,
    /// Eval-mode fused cross-entropy on the validation split.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters restored from the best validation epoch.
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Builds a fresh model for `tc.variant` and trains it.
pub fn train(
    config: &ModelConfig,
    partition: &RegionPartition,
    train_set: &TrialSet,
    val_set: &TrialSet,
    tc: &TrainConfig,
    on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let model = Model::new(tc.variant, config, partition, tc.schedule.temperature, tc.seed)?;
    train_model(model, train_set, val_set, tc, on_epoch)
}

/// Eval-mode accuracy of the fused prediction.
pub fn accuracy(model: &mut Model, set: &TrialSet) -> Result<f64, ModelError> {
    let preds = predict_classes(model, set)?;
    let correct = preds.iter().zip(&set.trials).filter(|(p, t)| **p == t.label).count();
    Ok(correct as f64 / set.len().max(1) as f64)
}

const EVAL_BATCH: usize = 64;

/// Eval-mode accuracy and mean fused cross-entropy in one pass.
pub fn accuracy_and_loss(model: &mut Model, set: &TrialSet) -> Result<(f64, f64), ModelError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let k = model.config.num_classes;
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = set.batch(chunk);
        let p = model.predict(&x)?;
        for ((row, &pred), &i) in p.logits.data().chunks(k).zip(&p.classes).zip(chunk) {
            let label = set.trials[i].label;
            correct += usize::from(pred == label);
            loss += objective::cross_entropy(row, label).expect("TrialSet labels are in range");
        }
    }
    let n = set.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn predict_classes(model: &mut Model, set: &TrialSet) -> Result<Vec<usize>, ModelError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = set.batch(chunk);
        out.extend(model.predict(&x)?.classes);
    }
    Ok(out)
}

fn non_finite(epoch: usize, batch: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Graph(g @ GraphError::NonFinite { .. }) => {
            TrainError::NonFinite { epoch, batch, detail: alloc::format!("{g}") }
        }
        other => TrainError::Model(other),
    }
}

/// Zeroes the weight of every loss term the variant does not have.
pub fn mask_weights(mut w: ScheduledWeights, variant: Variant) -> ScheduledWeights {
    if !variant.has_global() {
        w.alpha = 0.0;
    }
    if !variant.has_regional() {
        w.beta = 0.0;
    }
    if !variant.distills() {
        w.gamma = 0.0;
    }
    w
}

pub fn train_model(
    mut model: Model,
    train_set: &TrialSet,
    val_set: &TrialSet,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let sched = tc.effective_schedule();
    let global_prefix = alloc::format!("{GLOBAL}.");
    let mut history = Vec::with_capacity(tc.max_epochs);
    let mut best: Option<(usize, f64, f64, ParamStore)> = None;

    for epoch in 0..tc.max_epochs {
        let warm = epoch < sched.warmup;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng::shuffle(&mut rng::stream(tc.seed, 0x5eed_0000 + epoch as u64), &mut order);

        let mut sums = [0.0f64; 9];
        let mut weight_total = 0.0;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let (x, labels) = train_set.batch(chunk);
            let step_seed = rng::mix(tc.seed, ((epoch as u64) << 32) | bi as u64);
            let wrap = non_finite(epoch, bi);
            let (vals, w) = if warm {
                // Logged components come from an eval-mode pass, which leaves
                // every batch-norm buffer untouched.
                let logged = model.forward_losses(&x, &labels, Mode::Eval, 0, false).map_err(&wrap)?;
                let g = model.forward_losses(&x, &labels, Mode::Train, step_seed, true).map_err(&wrap)?;
                let w = objective::schedule_weights(epoch, logged.fused, &sched);
                (LossValues { global: g.global, ..logged }, w)
            } else {
                let vals = model.forward_losses(&x, &labels, Mode::Train, step_seed, false).map_err(&wrap)?;
                (vals, objective::schedule_weights(epoch, vals.fused, &sched))
            };
            let w = mask_weights(w, tc.variant);
            let total = objective::total_loss(vals.fused, vals.global, vals.local, vals.distill, &w).total;
            if !total.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: alloc::format!("total loss {total}") });
            }
            model.backward(&w).map_err(&wrap)?;
            let step = if warm {
                sgd_step_filtered(&mut model.store, tc.sgd(), |p| p.name.starts_with(&global_prefix))
            } else {
                sgd_step(&mut model.store, tc.sgd())
            };
            step.map_err(|e| match e {
                ParamError::NonFiniteGrad(name) => {
                    TrainError::NonFinite { epoch, batch: bi, detail: alloc::format!("gradient of {name}") }
                }
                other => TrainError::Model(ModelError::Param(other)),
            })?;
            let n = chunk.len() as f64;
            let row = [
                w.lambda, w.alpha, w.beta, w.gamma, vals.fused, vals.global, vals.local, vals.distill, total,
            ];
            sums.iter_mut().zip(row).for_each(|(s, v)| *s += v * n);
            weight_total += n;
        }
        let m: Vec<f64> = sums.iter().map(|s| s / weight_total).collect();
        let (val_acc, val_loss) = accuracy_and_loss(&mut model, val_set)?;
        let row = HistoryRow {
            epoch,
            progress: objective::progress(epoch, sched.warmup, sched.transition),
            weights: ScheduledWeights { lambda: m[0], alpha: m[1], beta: m[2], gamma: m[3] },
            losses: LossValues { fused: m[4], global: m[5], local: m[6], distill: m[7] },
            total: m[8],
            val_acc,
            val_loss,
        };
        on_epoch(&row);
        history.push(row);

        if warm {
            continue;
        }
        // Accuracy ties go to the lower validation loss.
        let improved = match &best {
            Some((_, acc, loss, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
            None => true,
        };
        if improved {
            best = Some((epoch, val_acc, val_loss, model.store.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= tc.patience {
            break;
        }
    }

    let (best_epoch, best_val_acc) = match best {
        Some((e, acc, _, store)) => {
            model.store = store;
            (e, acc)
        }
        None => {
            let last = history.last().expect("max_epochs >= 1");
            (last.epoch, last.val_acc)
        }
    };
    Ok(TrainOutcome { model, history, best_epoch, best_val_acc })
}
