//! Convolutional patch embedding followed by a transformer encoder; the
//! global expert.

use alloc::format;
use alloc::vec::Vec;

use super::{check, heads, temporal_filter_bank, ConfigError, ExpertNodes};
use crate::graph::NodeId;
use crate::nn::Builder;
use crate::params::ParamError;

#[derive(Debug, Clone, PartialEq)]
pub struct CTNetConfig {
    pub in_channels: usize,
    pub time_len: usize,
    pub temporal_kernel: usize,
    pub temporal_filters: usize,
    /// Outputs of the spatial convolution that spans every channel.
    pub spatial_filters: usize,
    pub embed_dim: usize,
    /// Patch window (= stride) of the token pooling.
    pub pool: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl CTNetConfig {
    pub fn desk(in_channels: usize, time_len: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            time_len,
            temporal_kernel: 32,
            temporal_filters: 8,
            spatial_filters: 40,
            embed_dim: 32,
            pool: 8,
            layers: 2,
            heads: 4,
            ff_dim: 64,
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
            temporal_kernel: 4,
            temporal_filters: 2,
            spatial_filters: 8,
            embed_dim: 16,
            pool: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            dropout: 0.25,
            feature_dim: 5,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        for (name, val) in [
            ("in_channels", self.in_channels),
            ("time_len", self.time_len),
            ("temporal_kernel", self.temporal_kernel),
            ("temporal_filters", self.temporal_filters),
            ("spatial_filters", self.spatial_filters),
            ("embed_dim", self.embed_dim),
            ("pool", self.pool),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
        ] {
            check(&mut v, val >= 1, format!("{name} must be >= 1"));
        }
        check(
            &mut v,
            self.heads == 0 || self.embed_dim.is_multiple_of(self.heads),
            format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
        );
        check(
            &mut v,
            self.pool == 0 || self.tokens() >= 1,
            format!("time_len {} too short for one token of width {}", self.time_len, self.pool),
        );
        check(&mut v, (0.0..1.0).contains(&self.dropout), format!("dropout {} outside [0, 1)", self.dropout));
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    /// Number of tokens produced by the patch embedding.
    pub fn tokens(&self) -> usize {
        self.time_len / self.pool.max(1)
    }
}

/// Token nodes `[B * N, D]` from [`patch_embed`].
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub tokens: NodeId,
    pub n_tokens: usize,
}

/// Temporal filter bank, spatial convolution across all channels, batch norm,
/// ELU, window pooling and a pointwise projection to the embedding width.
pub fn patch_embed(c: &CTNetConfig, b: &mut Builder<'_>, x: NodeId) -> Result<PatchEmbed, ParamError> {
    let (ch, f1, s, d) = (c.in_channels, c.temporal_filters, c.spatial_filters, c.embed_dim);
    let y = temporal_filter_bank(b, x, ch, c.time_len, f1, c.temporal_kernel)?;
    let y = b.graph.reshape(y, &[-1, (f1 * ch) as isize, c.time_len as isize]);
    let w = b.weight("spatial.weight", &[s, f1 * ch, 1], f1 * ch)?;
    let y = b.graph.pointwise_conv1d(y, w);
    let y = b.batch_norm(y, "bn", s)?;
    let y = b.graph.elu(y);
    let y = b.graph.avg_pool(y, c.pool);
    let y = b.graph.swap_axes(y, 1, 2);
    let y = b.linear(y, "project", s, d)?;
    Ok(PatchEmbed { tokens: y, n_tokens: c.tokens() })
}

/// Pre-norm encoder blocks plus a final layer norm over tokens `[B * N, D]`.
/// Also returns the attention node of every block.
pub fn transformer_encode(
    c: &CTNetConfig,
    b: &mut Builder<'_>,
    z: NodeId,
    n_tokens: usize,
) -> Result<(NodeId, Vec<NodeId>), ParamError> {
    let (d, h) = (c.embed_dim, c.heads);
    let dh = d / h;
    let (n, hi, dhi) = (n_tokens as isize, h as isize, dh as isize);
    let mut z = z;
    let mut attn = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let p = format!("block{l}");
        let x = b.layer_norm(z, &format!("{p}.ln1"), d)?;
        // No key bias: it shifts every score in a row equally and never gets a gradient.
        let split = |b: &mut Builder<'_>, name: &str| -> Result<NodeId, ParamError> {
            let y = if name == "wk" {
                let w = b.weight(&format!("{p}.wk.weight"), &[d, d], d)?;
                b.graph.linear(x, w, None, d)
            } else {
                b.linear(x, &format!("{p}.{name}"), d, d)?
            };
            let y = b.graph.reshape(y, &[-1, n, hi, dhi]);
            let y = b.graph.swap_axes(y, 1, 2);
            Ok(b.graph.reshape(y, &[-1, n, dhi]))
        };
        let q = split(b, "wq")?;
        let k = split(b, "wk")?;
        let v = split(b, "wv")?;
        let a = b.graph.attention(q, k, v);
        attn.push(a);
        let a = b.graph.reshape(a, &[-1, hi, n, dhi]);
        let a = b.graph.swap_axes(a, 1, 2);
        let a = b.linear(a, &format!("{p}.wo"), d, d)?;
        z = b.graph.add(z, a);

        let x = b.layer_norm(z, &format!("{p}.ln2"), d)?;
        let f = b.linear(x, &format!("{p}.ff1"), d, c.ff_dim)?;
        let f = b.graph.elu(f);
        let f = b.graph.dropout(f, c.dropout);
        let f = b.linear(f, &format!("{p}.ff2"), c.ff_dim, d)?;
        z = b.graph.add(z, f);
    }
    Ok((b.layer_norm(z, "ln_final", d)?, attn))
}

pub(super) fn build(
    c: &CTNetConfig,
    b: &mut Builder<'_>,
    x: NodeId,
) -> Result<(ExpertNodes, Vec<NodeId>), ParamError> {
    let pe = patch_embed(c, b, x)?;
    let (z, attn) = transformer_encode(c, b, pe.tokens, pe.n_tokens)?;
    let z = b.graph.reshape(z, &[-1, pe.n_tokens as isize, c.embed_dim as isize]);
    let pooled = b.graph.mean_axis(z, 1);
    Ok((heads(b, pooled, c.embed_dim, c.feature_dim, c.num_classes)?, attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{random_batch, Expert, ExpertConfig};
    use crate::graph::{Graph, Mode};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn embed_tokens(cfg: &CTNetConfig, x: &Tensor, seed: u64) -> Tensor {
        let mut g = Graph::new();
        let mut s = ParamStore::new();
        let xi = g.input("x");
        let pe = patch_embed(cfg, &mut Builder::new(&mut g, &mut s, "", seed), xi).unwrap();
        g.evaluate(&mut s, &[("x", x)], Mode::Eval, 0).unwrap();
        g.value(pe.tokens).unwrap().clone()
    }

    #[test]
    fn token_counts() {
        let cfg = CTNetConfig::desk(16, 128, 4);
        let z = embed_tokens(&cfg, &random_batch(&[1, 16, 128], 0), 0);
        assert_eq!(z.shape(), &[16, 32]);
        let long = CTNetConfig { time_len: 256, ..cfg };
        let z = embed_tokens(&long, &random_batch(&[1, 16, 256], 0), 0);
        assert_eq!(z.shape(), &[32, 32]);
        let short = CTNetConfig { time_len: 7, ..CTNetConfig::desk(16, 7, 4) };
        assert!(short.validate().is_err());
    }

    #[test]
    fn tokens_depend_on_channel_order() {
        let cfg = CTNetConfig::desk(4, 64, 2);
        let x = random_batch(&[1, 4, 64], 5);
        let mut swapped = x.clone();
        let d = swapped.data_mut();
        for t in 0..64 {
            d.swap(t, 64 + t);
        }
        assert_ne!(embed_tokens(&cfg, &x, 1), embed_tokens(&cfg, &swapped, 1));
    }

    fn encode(cfg: &CTNetConfig, z: &Tensor, n: usize) -> (Tensor, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let mut s = ParamStore::new();
        let zi = g.input("z");
        let (out, attn) = transformer_encode(cfg, &mut Builder::new(&mut g, &mut s, "", 3), zi, n).unwrap();
        g.evaluate(&mut s, &[("z", z)], Mode::Eval, 0).unwrap();
        let probs = attn.iter().map(|a| g.attention_probs(*a).unwrap().to_vec()).collect();
        (g.value(out).unwrap().clone(), probs)
    }

    #[test]
    fn empty_stack_is_final_layer_norm() {
        let cfg = CTNetConfig { layers: 0, ..CTNetConfig::desk(16, 128, 4) };
        let z = random_batch(&[6, 32], 2);
        let (out, attn) = encode(&cfg, &z, 3);
        assert!(attn.is_empty());
        for r in 0..6 {
            let row = z.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            for (o, v) in out.row(r).iter().zip(row) {
                let want = (v - mean) / crate::math::sqrt(var + crate::graph::NORM_EPS);
                assert!((o - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = CTNetConfig::desk(16, 128, 4);
        let (_, attn) = encode(&cfg, &random_batch(&[2 * 5, 32], 4), 5);
        assert_eq!(attn.len(), 2);
        for probs in attn {
            for row in probs.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let (_, single) = encode(&cfg, &random_batch(&[3, 32], 4), 1);
        assert!(single.iter().flatten().all(|p| *p == 1.0));
    }

    #[test]
    fn expert_shapes_and_eval_determinism() {
        let mut e = Expert::init(ExpertConfig::CTNet(CTNetConfig::desk(16, 128, 4)), 0).unwrap();
        let x = random_batch(&[16, 128], 8);
        let a = e.forward(&x, Mode::Eval, 0).unwrap();
        let b = e.forward(&x, Mode::Eval, 5).unwrap();
        assert_eq!(a.feature.shape(), &[32]);
        assert_eq!(a.logits.shape(), &[4]);
        assert_eq!(a, b);
    }
}
