//! Compact convolutional regional expert (EEGNet-style).

use alloc::format;

use super::{check, heads, temporal_filter_bank, ConfigError, ExpertNodes};
use crate::nn::Builder;
use crate::params::ParamError;
use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct CNetConfig {
    pub in_channels: usize,
    pub time_len: usize,
    pub temporal_kernel: usize,
    pub temporal_filters: usize,
    pub depth_multiplier: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl CNetConfig {
    /// Desk-scale defaults for a region of `in_channels` electrodes.
    pub fn desk(in_channels: usize, time_len: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            time_len,
            temporal_kernel: 64,
            temporal_filters: 8,
            depth_multiplier: 2,
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
            feature_dim: 32,
            num_classes,
        }
    }

    /// Small configuration for finite-difference checks.
    pub fn tiny(in_channels: usize, time_len: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            time_len,
            temporal_kernel: 8,
            temporal_filters: 3,
            depth_multiplier: 2,
            separable_kernel: 4,
            pool1: 2,
            pool2: 2,
            dropout: 0.25,
            feature_dim: 5,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = alloc::vec::Vec::new();
        for (name, val) in [
            ("in_channels", self.in_channels),
            ("time_len", self.time_len),
            ("temporal_kernel", self.temporal_kernel),
            ("temporal_filters", self.temporal_filters),
            ("depth_multiplier", self.depth_multiplier),
            ("separable_kernel", self.separable_kernel),
            ("pool1", self.pool1),
            ("pool2", self.pool2),
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
        ] {
            check(&mut v, val >= 1, format!("{name} must be >= 1"));
        }
        let pools = self.pool1 * self.pool2;
        check(
            &mut v,
            pools > 0 && self.time_len.is_multiple_of(pools),
            format!("time_len {} not divisible by pool1*pool2 = {pools}", self.time_len),
        );
        check(&mut v, (0.0..1.0).contains(&self.dropout), format!("dropout {} outside [0, 1)", self.dropout));
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    /// Channels after the separable block.
    pub fn separable_filters(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }

    /// Length of the flattened representation feeding both heads.
    pub fn flat_dim(&self) -> usize {
        self.separable_filters() * (self.time_len / (self.pool1 * self.pool2))
    }
}

pub(super) fn build(c: &CNetConfig, b: &mut Builder<'_>, x: NodeId) -> Result<ExpertNodes, ParamError> {
    let (ch, f1) = (c.in_channels, c.temporal_filters);
    let f2 = c.separable_filters();

    let y = temporal_filter_bank(b, x, ch, c.time_len, f1, c.temporal_kernel)?;
    let y = b.batch_norm(y, "bn1", f1)?;
    let y = b.graph.reshape(y, &[-1, (f1 * ch) as isize, c.time_len as isize]);

    let w = b.weight("spatial.weight", &[f2, ch, 1], ch)?;
    let y = b.graph.grouped_conv1d(y, w, f1, 1);
    let y = b.batch_norm(y, "bn2", f2)?;
    let y = b.graph.elu(y);
    let y = b.graph.avg_pool(y, c.pool1);
    let y = b.graph.dropout(y, c.dropout);

    let dw = b.weight("separable.depthwise", &[f2, 1, c.separable_kernel], c.separable_kernel)?;
    let y = b.graph.depthwise_conv1d(y, dw, f2, c.separable_kernel);
    let pw = b.weight("separable.pointwise", &[f2, f2, 1], f2)?;
    let y = b.graph.pointwise_conv1d(y, pw);
    let y = b.batch_norm(y, "bn3", f2)?;
    let y = b.graph.elu(y);
    let y = b.graph.avg_pool(y, c.pool2);
    let y = b.graph.dropout(y, c.dropout);

    let flat = c.flat_dim();
    let y = b.graph.reshape(y, &[-1, flat as isize]);
    heads(b, y, flat, c.feature_dim, c.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{random_batch, Expert, ExpertConfig};
    use crate::graph::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn output_shapes_and_pooled_length() {
        let cfg = CNetConfig { feature_dim: 12, ..CNetConfig::desk(2, 128, 5) };
        assert_eq!(cfg.time_len / (cfg.pool1 * cfg.pool2), 4);
        let mut e = Expert::init(ExpertConfig::CNet(cfg), 0).unwrap();
        let out = e.forward(&random_batch(&[2, 128], 1), Mode::Eval, 0).unwrap();
        assert_eq!(out.feature.shape(), &[12]);
        assert_eq!(out.logits.shape(), &[5]);
        let batch = e.forward_batch(&random_batch(&[3, 2, 128], 1), Mode::Train, 0).unwrap();
        assert_eq!(batch.feature.shape(), &[3, 12]);
        assert_eq!(batch.logits.shape(), &[3, 5]);
    }

    #[test]
    fn zero_input_gives_head_biases() {
        let mut e = Expert::init(ExpertConfig::CNet(CNetConfig::desk(3, 256, 4)), 2).unwrap();
        let id = e.store.find("logits_head.bias").unwrap();
        let bias = Tensor::from_vec(alloc::vec![0.5, -1.0, 0.25, 2.0]);
        e.store.param_mut(id).value = bias.clone();
        let out = e.forward(&Tensor::zeros(&[3, 256]), Mode::Eval, 0).unwrap();
        assert_eq!(out.logits, bias);
    }

    #[test]
    fn invalid_configs_list_every_violation() {
        let err = CNetConfig { dropout: 1.0, ..CNetConfig::desk(2, 256, 4) }.validate().unwrap_err();
        assert_eq!(err.violations.len(), 1);
        let err = CNetConfig { dropout: -0.1, time_len: 100, in_channels: 0, ..CNetConfig::desk(2, 256, 4) }
            .validate()
            .unwrap_err();
        assert_eq!(err.violations.len(), 3, "{err}");
        assert!(Expert::init(ExpertConfig::CNet(CNetConfig { pool1: 0, ..CNetConfig::desk(2, 256, 4) }), 0).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut e = Expert::init(ExpertConfig::CNet(CNetConfig::desk(2, 256, 4)), 4).unwrap();
        let x = random_batch(&[2, 256], 9);
        let a = e.forward(&x, Mode::Eval, 1).unwrap();
        let b = e.forward(&x, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
    }
}
