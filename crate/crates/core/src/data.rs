//! Trials, synthetic region-localized EEG, z-scoring and session splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::montage::{Region, RegionPartition};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("trial {trial_id}: {detail}")]
    Trial { trial_id: u32, detail: String },
    #[error("subject `{subject}` has {have} sessions but the split asks for {want}")]
    SplitCount { subject: String, have: usize, want: usize },
    #[error("empty trial set")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// `C x T`
    pub x: Tensor,
    pub label: usize,
    pub subject: String,
    pub session: u32,
    pub trial_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub channels: usize,
    pub time_len: usize,
    pub num_classes: usize,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    /// Checks shapes, labels and finiteness of every trial.
    pub fn new(channels: usize, time_len: usize, num_classes: usize, trials: Vec<Trial>) -> Result<Self, DataError> {
        for t in &trials {
            let bad = |detail: String| Err(DataError::Trial { trial_id: t.trial_id, detail });
            if t.x.shape() != [channels, time_len] {
                return bad(format!("shape {:?}, expected [{channels}, {time_len}]", t.x.shape()));
            }
            if t.label >= num_classes {
                return bad(format!("label {} outside [0, {num_classes})", t.label));
            }
            if !t.x.is_finite() {
                return bad("non-finite sample".into());
            }
        }
        Ok(Self { channels, time_len, num_classes, trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Same dimensions, different trials.
    pub fn with_trials(&self, trials: Vec<Trial>) -> Self {
        Self { trials, ..self.clone_empty() }
    }

    fn clone_empty(&self) -> Self {
        Self { channels: self.channels, time_len: self.time_len, num_classes: self.num_classes, trials: Vec::new() }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Distinct subjects in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.subject) {
                out.push(t.subject.clone());
            }
        }
        out
    }

    /// Sorted distinct session ids per subject.
    pub fn sessions(&self) -> BTreeMap<String, Vec<u32>> {
        let mut map: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for t in &self.trials {
            let s = map.entry(t.subject.clone()).or_default();
            if !s.contains(&t.session) {
                s.push(t.session);
            }
        }
        map.values_mut().for_each(|v| v.sort_unstable());
        map
    }

    /// Stacks trials into `x: [B, C, T]` and `labels: [B]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(indices.len() * self.channels * self.time_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.trials[i].x.data());
            labels.push(self.trials[i].label as f64);
        }
        let x = Tensor::new(vec![indices.len(), self.channels, self.time_len], x).expect("consistent trial shapes");
        (x, Tensor::from_vec(labels))
    }

    pub fn zscored(&self) -> Self {
        self.with_trials(self.trials.iter().map(zscore_normalize).collect())
    }
}

/// Epsilon added to the per-channel standard deviation.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Per-channel `(x - mean) / (std + eps)` with the population std.
pub fn zscore_normalize(trial: &Trial) -> Trial {
    let t = trial.x.shape()[1];
    let mut x = trial.x.clone();
    for row in x.data_mut().chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let sd = crate::math::sqrt(var) + ZSCORE_EPS;
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Trial { x, ..trial.clone() }
}

/// Splits each subject's sessions in time order: the first `n_train` train,
/// the next `n_val` validate, the last `n_test` test.
pub fn session_split(
    ts: &TrialSet,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<(TrialSet, TrialSet, TrialSet), DataError> {
    if ts.is_empty() {
        return Err(DataError::Empty);
    }
    let want = n_train + n_val + n_test;
    let sessions = ts.sessions();
    for (subject, s) in &sessions {
        if s.len() != want {
            return Err(DataError::SplitCount { subject: subject.clone(), have: s.len(), want });
        }
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for t in &ts.trials {
        let pos = sessions[&t.subject].iter().position(|s| *s == t.session).expect("session listed");
        let dst = if pos < n_train {
            &mut tr
        } else if pos < n_train + n_val {
            &mut va
        } else {
            &mut te
        };
        dst.push(t.clone());
    }
    Ok((ts.with_trials(tr), ts.with_trials(va), ts.with_trials(te)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub channels: usize,
    pub time_len: usize,
    pub num_classes: usize,
    pub sessions: usize,
    pub trials_per_session: usize,
    pub sample_rate: f64,
    pub snr_db: f64,
    /// Regions carrying each class's burst; indexed by class.
    pub informative_regions: Vec<Vec<Region>>,
    /// Class `k` uses `lo + (hi - lo) * k / (K - 1)` Hz.
    pub carrier_lo: f64,
    pub carrier_hi: f64,
    pub subject: String,
    pub seed: u64,
}

impl SynthConfig {
    /// 16 channels, 1 s at 256 Hz, 4 classes, 4 sessions of 80 trials, signal in
    /// the occipital and left temporal regions.
    pub fn desk() -> Self {
        Self {
            channels: 16,
            time_len: 256,
            num_classes: 4,
            sessions: 4,
            trials_per_session: 80,
            sample_rate: 256.0,
            snr_db: 20.0,
            informative_regions: vec![vec![Region::Occipital, Region::LeftTemporal]; 4],
            carrier_lo: 8.0,
            carrier_hi: 30.0,
            subject: String::from("S01"),
            seed: 0,
        }
    }

    pub fn validate(&self, partition: &RegionPartition) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.channels == 0 || self.time_len < 2 || self.num_classes == 0 || self.sessions == 0 {
            return bad("channels, classes and sessions must be >= 1 and time_len >= 2".into());
        }
        if self.trials_per_session == 0 || !self.trials_per_session.is_multiple_of(self.num_classes) {
            return bad(format!(
                "trials_per_session {} must be a positive multiple of num_classes {}",
                self.trials_per_session, self.num_classes
            ));
        }
        if !self.snr_db.is_finite() || !(self.sample_rate > 0.0) {
            return bad("snr_db must be finite and sample_rate positive".into());
        }
        if !(self.carrier_lo > 0.0 && self.carrier_lo <= self.carrier_hi && self.carrier_hi.is_finite()) {
            return bad(format!("carrier range {}..{} invalid", self.carrier_lo, self.carrier_hi));
        }
        if self.informative_regions.len() != self.num_classes {
            return bad(format!(
                "{} informative-region lists for {} classes",
                self.informative_regions.len(),
                self.num_classes
            ));
        }
        for (k, regions) in self.informative_regions.iter().enumerate() {
            if regions.is_empty() {
                return bad(format!("class {k} has no informative regions"));
            }
        }
        if let Some(&i) = partition.union().last() {
            if i >= self.channels {
                return bad(format!("partition uses channel {i} but only {} channels", self.channels));
            }
        }
        Ok(())
    }

    pub fn carrier(&self, class: usize) -> f64 {
        if self.num_classes == 1 {
            return self.carrier_lo;
        }
        self.carrier_lo + (self.carrier_hi - self.carrier_lo) * class as f64 / (self.num_classes - 1) as f64
    }

    /// Burst amplitude whose mean power over the trial is `snr_db` above the
    /// unit-variance noise.
    pub fn amplitude(&self) -> f64 {
        // Hann-windowed sine over half the trial has mean square A^2 * 3/32.
        crate::math::sqrt(crate::math::powf(10.0, self.snr_db / 10.0) * 32.0 / 3.0)
    }
}

const NOISE_AR: f64 = 0.8;

/// Generates unit-variance AR(1) noise on every channel plus a Hann-windowed
/// class-frequency burst (random onset and phase, per-channel gain) on the
/// channels of the class's informative regions. Labels are balanced within
/// each session. Samples are rounded to `f32` precision.
pub fn generate_synthetic(cfg: &SynthConfig, partition: &RegionPartition) -> Result<TrialSet, DataError> {
    cfg.validate(partition)?;
    let (c, t) = (cfg.channels, cfg.time_len);
    let burst = (t / 2).max(1);
    let amp = cfg.amplitude();
    let hann: Vec<f64> = (0..burst)
        .map(|i| 0.5 - 0.5 * crate::math::cos(2.0 * PI * i as f64 / (burst.max(2) - 1) as f64))
        .collect();
    let mut trials = Vec::with_capacity(cfg.sessions * cfg.trials_per_session);
    for session in 0..cfg.sessions {
        let mut r = rng::stream(cfg.seed, session as u64);
        let mut labels: Vec<usize> = (0..cfg.trials_per_session).map(|i| i % cfg.num_classes).collect();
        rng::shuffle(&mut r, &mut labels);
        for (i, &label) in labels.iter().enumerate() {
            let mut x = vec![0.0; c * t];
            for row in x.chunks_mut(t) {
                let mut prev = rng::normal(&mut r);
                for v in row.iter_mut() {
                    *v = prev;
                    prev = NOISE_AR * prev + crate::math::sqrt(1.0 - NOISE_AR * NOISE_AR) * rng::normal(&mut r);
                }
            }
            let onset = (rng::uniform(&mut r, 0.0, 1.0) * (t - burst + 1) as f64) as usize;
            let phase = rng::uniform(&mut r, 0.0, 2.0 * PI);
            let w = 2.0 * PI * cfg.carrier(label) / cfg.sample_rate;
            for region in &cfg.informative_regions[label] {
                for &ch in partition.indices(*region) {
                    let gain = amp * rng::uniform(&mut r, 0.5, 1.0);
                    let row = &mut x[ch * t..(ch + 1) * t];
                    for (j, h) in hann.iter().enumerate() {
                        let n = onset + j;
                        row[n] += gain * h * crate::math::sin(w * n as f64 + phase);
                    }
                }
            }
            let x = x.into_iter().map(|v| v as f32 as f64).collect();
            trials.push(Trial {
                x: Tensor::new(vec![c, t], x).expect("sized above"),
                label,
                subject: cfg.subject.clone(),
                session: session as u32,
                trial_id: (session * cfg.trials_per_session + i) as u32,
            });
        }
    }
    TrialSet::new(c, t, cfg.num_classes, trials)
}
