//! Full mixture-of-experts model per ablation variant.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::experts::{CNetConfig, CTNetConfig, ExpertConfig, ExpertError};
use crate::graph::{Graph, GraphError, Mode, NodeId};
use crate::montage::{Region, RegionPartition};
use crate::nn::Builder;
use crate::objective::{self, ScheduledWeights};
use crate::params::{ParamError, ParamStore};
use crate::router::{self, RouterNodes};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    LocalOnly,
    HomogeneousCnet,
    GlobalOnly,
    HomogeneousCtnet,
    NoDistill,
    NoWarmup,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::LocalOnly,
        Variant::HomogeneousCnet,
        Variant::GlobalOnly,
        Variant::HomogeneousCtnet,
        Variant::NoDistill,
        Variant::NoWarmup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LocalOnly => "local_only",
            Variant::HomogeneousCnet => "homogeneous_cnet",
            Variant::GlobalOnly => "global_only",
            Variant::HomogeneousCtnet => "homogeneous_ctnet",
            Variant::NoDistill => "no_distill",
            Variant::NoWarmup => "no_warmup",
        }
    }

    pub fn has_global(self) -> bool {
        self != Variant::LocalOnly
    }

    pub fn has_regional(self) -> bool {
        self != Variant::GlobalOnly
    }

    pub fn distills(self) -> bool {
        self.has_global() && self.has_regional() && self != Variant::NoDistill
    }

    /// Whether training starts with global-only epochs.
    pub fn warms_up(self) -> bool {
        self.has_global() && self != Variant::NoWarmup
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant `{0}` (expected one of full, local_only, homogeneous_cnet, global_only, homogeneous_ctnet, no_distill, no_warmup)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Architecture templates; channel counts are filled in per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub time_len: usize,
    pub num_classes: usize,
    pub cnet: CNetConfig,
    pub ctnet: CTNetConfig,
}

impl ModelConfig {
    pub fn desk(channels: usize, time_len: usize, num_classes: usize) -> Self {
        Self {
            channels,
            time_len,
            num_classes,
            cnet: CNetConfig::desk(channels, time_len, num_classes),
            ctnet: CTNetConfig::desk(channels, time_len, num_classes),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.cnet.feature_dim
    }

    fn cnet(&self, channels: usize) -> ExpertConfig {
        ExpertConfig::CNet(CNetConfig {
            in_channels: channels,
            time_len: self.time_len,
            num_classes: self.num_classes,
            ..self.cnet.clone()
        })
    }

    fn ctnet(&self, channels: usize) -> ExpertConfig {
        ExpertConfig::CTNet(CTNetConfig {
            in_channels: channels,
            time_len: self.time_len,
            num_classes: self.num_classes,
            ..self.ctnet.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("CNet and CTNet feature widths differ ({cnet} vs {ctnet})")]
    FeatureWidth { cnet: usize, ctnet: usize },
    #[error("input {got:?} does not match [B, {channels}, {time}]")]
    InputShape { got: Vec<usize>, channels: usize, time: usize },
}

/// One routed expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSlot {
    /// `global` or the region tag; also the parameter-name prefix.
    pub name: String,
    pub region: Option<Region>,
    pub config: ExpertConfig,
    pub feature: NodeId,
    pub logits: NodeId,
}

/// Loss nodes; absent components do not exist in the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossNodes {
    pub fused: NodeId,
    pub global: Option<NodeId>,
    pub local: Option<NodeId>,
    pub distill: Option<NodeId>,
}

/// Component values of the last evaluation; absent components read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub fused: f64,
    pub global: f64,
    pub local: f64,
    pub distill: f64,
}

/// Eval-mode outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[B, K]`
    pub logits: Tensor,
    /// `[B, E]` in expert order.
    pub alpha: Tensor,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub partition: RegionPartition,
    pub store: ParamStore,
    graph: Graph,
    experts: Vec<ExpertSlot>,
    router: RouterNodes,
    losses: LossNodes,
}

/// Parameter-name prefix of the global expert.
pub const GLOBAL: &str = "global";

impl Model {
    /// `temperature` softens the distillation term.
    pub fn new(
        variant: Variant,
        config: &ModelConfig,
        partition: &RegionPartition,
        temperature: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.cnet.feature_dim != config.ctnet.feature_dim {
            return Err(ModelError::FeatureWidth { cnet: config.cnet.feature_dim, ctnet: config.ctnet.feature_dim });
        }
        let mut graph = Graph::new();
        let mut store = ParamStore::new();
        let x = graph.input("x");
        let labels = graph.input("labels");
        let mut experts = Vec::new();

        if variant.has_global() {
            let cfg = match variant {
                Variant::HomogeneousCnet => config.cnet(config.channels),
                _ => config.ctnet(config.channels),
            };
            let nodes = cfg.build(&mut graph, &mut store, GLOBAL, x, seed)?;
            experts.push(ExpertSlot {
                name: GLOBAL.to_string(),
                region: None,
                config: cfg,
                feature: nodes.feature,
                logits: nodes.logits,
            });
        }
        if variant.has_regional() {
            for region in Region::ALL {
                let idx = partition.indices(region);
                let cfg = match variant {
                    Variant::HomogeneousCtnet => config.ctnet(idx.len()),
                    _ => config.cnet(idx.len()),
                };
                graph.set_scope(region.tag());
                let xr = graph.index_select(x, 1, idx);
                let nodes = cfg.build(&mut graph, &mut store, region.tag(), xr, seed)?;
                experts.push(ExpertSlot {
                    name: region.tag().to_string(),
                    region: Some(region),
                    config: cfg,
                    feature: nodes.feature,
                    logits: nodes.logits,
                });
            }
        }

        let feats: Vec<NodeId> = experts.iter().map(|e| e.feature).collect();
        let router = router::build(
            &mut Builder::new(&mut graph, &mut store, "router", seed),
            &feats,
            config.feature_dim(),
            config.num_classes,
        )?;
        graph.set_scope("loss");
        let fused = objective::cross_entropy_node(&mut graph, router.logits, labels);
        let global = experts
            .iter()
            .find(|e| e.region.is_none())
            .map(|e| objective::cross_entropy_node(&mut graph, e.logits, labels));
        let regional: Vec<NodeId> = experts.iter().filter(|e| e.region.is_some()).map(|e| e.logits).collect();
        let local = (!regional.is_empty()).then(|| {
            let ces: Vec<NodeId> =
                regional.iter().map(|l| objective::cross_entropy_node(&mut graph, *l, labels)).collect();
            objective::mean_of(&mut graph, &ces)
        });
        let distill = variant.distills().then(|| {
            objective::distill_node(&mut graph, experts[0].logits, &regional, config.num_classes, temperature)
        });
        graph.set_scope("");
        Ok(Self {
            variant,
            config: config.clone(),
            partition: partition.clone(),
            store,
            graph,
            experts,
            router,
            losses: LossNodes { fused, global, local, distill },
        })
    }

    pub fn experts(&self) -> &[ExpertSlot] {
        &self.experts
    }

    pub fn expert_names(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn losses(&self) -> LossNodes {
        self.losses
    }

    pub fn router(&self) -> RouterNodes {
        self.router
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let (c, t) = (self.config.channels, self.config.time_len);
        if x.rank() != 3 || x.shape()[1] != c || x.shape()[2] != t {
            return Err(ModelError::InputShape { got: x.shape().to_vec(), channels: c, time: t });
        }
        Ok(())
    }

    /// Forward pass computing the loss components. With `global_only` only
    /// the global expert's loss (and its ancestors) is evaluated, so no other
    /// parameter or batch-norm buffer is touched.
    pub fn forward_losses(
        &mut self,
        x: &Tensor,
        labels: &Tensor,
        mode: Mode,
        seed: u64,
        global_only: bool,
    ) -> Result<LossValues, ModelError> {
        self.check_input(x)?;
        let l = self.losses;
        let targets: Vec<NodeId> = if global_only {
            l.global.into_iter().collect()
        } else {
            [Some(l.fused), l.global, l.local, l.distill].into_iter().flatten().collect()
        };
        self.graph
            .evaluate_targets(&mut self.store, &[("x", x), ("labels", labels)], mode, seed, &targets)?;
        let get = |n: Option<NodeId>| n.and_then(|n| self.graph.scalar(n)).unwrap_or(0.0);
        Ok(LossValues {
            fused: get(Some(l.fused)),
            global: get(l.global),
            local: get(l.local),
            distill: get(l.distill),
        })
    }

    /// Gradients of the weighted total loss for the last [`Self::forward_losses`].
    pub fn backward(&mut self, w: &ScheduledWeights) -> Result<(), ModelError> {
        let l = self.losses;
        let seeds: Vec<(NodeId, f64)> = [
            (Some(l.fused), w.lambda),
            (l.global, w.alpha),
            (l.local, w.beta),
            (l.distill, w.gamma),
        ]
        .into_iter()
        .filter_map(|(n, wt)| n.filter(|_| wt != 0.0).map(|n| (n, wt)))
        .collect();
        self.graph.backward_seeded(&mut self.store, &seeds)?;
        Ok(())
    }

    /// Eval-mode fused logits, routing weights and predicted classes.
    pub fn predict(&mut self, x: &Tensor) -> Result<Prediction, ModelError> {
        self.check_input(x)?;
        let r = self.router;
        self.graph.evaluate_targets(&mut self.store, &[("x", x)], Mode::Eval, 0, &[r.logits, r.alpha])?;
        let logits = self.graph.value(r.logits).cloned().expect("evaluated");
        let alpha = self.graph.value(r.alpha).cloned().expect("evaluated");
        let k = self.config.num_classes;
        let classes = logits.data().chunks(k).map(router::argmax).collect();
        Ok(Prediction { logits, alpha, classes })
    }

    /// Eval-mode logits of one expert.
    pub fn expert_logits(&mut self, expert: usize, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let n = self.experts[expert].logits;
        self.graph.evaluate_targets(&mut self.store, &[("x", x)], Mode::Eval, 0, &[n])?;
        Ok(self.graph.value(n).cloned().expect("evaluated"))
    }

    /// Learnable scalars per expert, in expert order, plus the router.
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .experts
            .iter()
            .map(|e| (e.name.clone(), self.store.count_with_prefix(&alloc::format!("{}.", e.name))))
            .collect();
        out.push(("router".to_string(), self.store.count_with_prefix("router.")));
        out
    }
}
