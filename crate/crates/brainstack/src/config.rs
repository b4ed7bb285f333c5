//! Experiment configuration files.
//!
//! A config is TOML: top-level `montage` and `split`, then optional
//! `[data]`, `[model]`, `[cnet]`, `[ctnet]`, `[train]` and `[schedule]`
//! sections. Every key is optional and falls back to the library default.
//!
//! ```toml
//! montage = "desk16"
//! split = [2, 1, 1]
//!
//! [data]
//! snr_db = 20.0
//! informative_regions = ["Occipital", "LeftTemporal"]
//!
//! [train]
//! variant = "full"
//! max_epochs = 50
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use brainstack_core::data::SynthConfig;
use brainstack_core::model::{ModelConfig, Variant};
use brainstack_core::montage::{self, Montage, MontageError, Region, RegionPartition};
use brainstack_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("montage: {0}")]
    Montage(#[from] MontageError),
    #[error("{0}")]
    Invalid(String),
}

macro_rules! apply {
    ($src:expr, $dst:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = v; } )*
    };
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub channels: Option<usize>,
    pub time_len: Option<usize>,
    pub num_classes: Option<usize>,
    pub sessions: Option<usize>,
    pub trials_per_session: Option<usize>,
    pub sample_rate: Option<f64>,
    pub snr_db: Option<f64>,
    pub informative_regions: Option<RegionSpec>,
    pub carrier_lo: Option<f64>,
    pub carrier_hi: Option<f64>,
    pub subject: Option<String>,
    pub seed: Option<u64>,
}

/// Either one region list shared by every class, or a table from class
/// index to region list.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum RegionSpec {
    All(Vec<String>),
    PerClass(BTreeMap<String, Vec<String>>),
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CNetSection {
    pub temporal_kernel: Option<usize>,
    pub temporal_filters: Option<usize>,
    pub depth_multiplier: Option<usize>,
    pub separable_kernel: Option<usize>,
    pub pool1: Option<usize>,
    pub pool2: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CTNetSection {
    pub temporal_kernel: Option<usize>,
    pub temporal_filters: Option<usize>,
    pub spatial_filters: Option<usize>,
    pub embed_dim: Option<usize>,
    pub pool: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub warmup: Option<usize>,
    pub transition: Option<usize>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub alpha_max: Option<f64>,
    pub beta_max: Option<f64>,
    pub gamma_max: Option<f64>,
    pub max_loss_estimate: Option<f64>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// `desk16`, `std64`, or a montage file path relative to the config.
    pub montage: Option<String>,
    pub split: Option<[usize; 3]>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub cnet: CNetSection,
    #[serde(default)]
    pub ctnet: CTNetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
}

/// A parsed config with the montage resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub file: ConfigFile,
    pub montage: Montage,
    pub partition: RegionPartition,
    base_dir: PathBuf,
}

pub const DEFAULT_SPLIT: [usize; 3] = [2, 1, 1];

impl Experiment {
    pub fn defaults() -> Self {
        Self::from_file(ConfigFile::default(), Path::new(".")).expect("built-in defaults are valid")
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        Self::from_file(toml::from_str(text)?, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn from_file(file: ConfigFile, base_dir: &Path) -> Result<Self, ConfigError> {
        let (montage, partition) = match file.montage.as_deref().unwrap_or("desk16") {
            "desk16" => montage::desk16(),
            "std64" => montage::std64(),
            path => {
                let p: PathBuf = base_dir.join(path);
                let text = std::fs::read_to_string(&p)
                    .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                montage::parse_montage(&text)?
            }
        };
        let exp = Self { file, montage, partition, base_dir: base_dir.to_path_buf() };
        exp.synth()?;
        exp.variant()?;
        exp.train_config(exp.synth()?.num_classes)?;
        Ok(exp)
    }

    /// Self-contained TOML for this experiment; a montage file path is made
    /// absolute.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        let mut file = self.file.clone();
        if let Some(m) = &file.montage {
            if m != "desk16" && m != "std64" {
                let p = std::path::absolute(self.base_dir.join(m))
                    .map_err(|source| ConfigError::Io { path: m.clone(), source })?;
                file.montage = Some(p.display().to_string());
            }
        }
        toml::to_string(&file).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn split(&self) -> [usize; 3] {
        self.file.split.unwrap_or(DEFAULT_SPLIT)
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        match &self.file.train.variant {
            None => Ok(Variant::Full),
            Some(v) => v.parse().map_err(|e| ConfigError::Invalid(format!("{e}"))),
        }
    }

    pub fn synth(&self) -> Result<SynthConfig, ConfigError> {
        let d = &self.file.data;
        let mut s = SynthConfig { channels: self.montage.len(), ..SynthConfig::desk() };
        apply!(d, s; channels, time_len, num_classes, sessions, trials_per_session, sample_rate, snr_db,
            carrier_lo, carrier_hi, subject, seed);
        let parse = |names: &[String]| -> Result<Vec<Region>, ConfigError> {
            names.iter().map(|n| n.parse::<Region>().map_err(|e| ConfigError::Invalid(format!("{e}")))).collect()
        };
        s.informative_regions = match &d.informative_regions {
            None => vec![s.informative_regions[0].clone(); s.num_classes],
            Some(RegionSpec::All(names)) => vec![parse(names)?; s.num_classes],
            Some(RegionSpec::PerClass(map)) => {
                let mut out = vec![Vec::new(); s.num_classes];
                for (k, names) in map {
                    let class: usize = k
                        .parse()
                        .ok()
                        .filter(|c| *c < s.num_classes)
                        .ok_or_else(|| ConfigError::Invalid(format!("informative_regions: bad class key '{k}'")))?;
                    out[class] = parse(names)?;
                }
                out
            }
        };
        if s.channels != self.montage.len() {
            return Err(ConfigError::Invalid(format!(
                "data.channels = {} but the montage has {} channels",
                s.channels,
                self.montage.len()
            )));
        }
        s.validate(&self.partition).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }

    /// Model shapes for data with `channels x time_len` trials and `classes`
    /// labels.
    pub fn model_config(&self, channels: usize, time_len: usize, classes: usize) -> ModelConfig {
        let mut m = ModelConfig::desk(channels, time_len, classes);
        apply!(self.file.cnet, m.cnet; temporal_kernel, temporal_filters, depth_multiplier, separable_kernel,
            pool1, pool2, dropout);
        apply!(self.file.ctnet, m.ctnet; temporal_kernel, temporal_filters, spatial_filters, embed_dim, pool,
            layers, heads, ff_dim, dropout);
        if let Some(d) = self.file.model.feature_dim {
            m.cnet.feature_dim = d;
            m.ctnet.feature_dim = d;
        }
        m
    }

    pub fn train_config(&self, classes: usize) -> Result<TrainConfig, ConfigError> {
        let mut tc = TrainConfig { variant: self.variant()?, ..TrainConfig::defaults(classes) };
        apply!(self.file.train, tc; lr, momentum, weight_decay, batch_size, max_epochs, patience, seed);
        apply!(self.file.schedule, tc.schedule; warmup, transition, lambda_min, lambda_max, alpha_max, beta_max,
            gamma_max, max_loss_estimate, temperature);
        tc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(tc)
    }
}
