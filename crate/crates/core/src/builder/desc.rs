//! Description files. Both are JSON.
//!
//! The layer description is a per-encoder template that is instantiated once
//! per encoder; layer `name` of encoder `l` becomes `e{l}.{name}`. The name
//! `input` is reserved and refers to the encoder input (the host for encoder
//! 0, the previous encoder's `output` layer otherwise).
//!
//! ```json
//! { "encoders": 12,
//!   "layers": [
//!     { "name": "q", "module": "linear", "slot": "q", "inputs": ["input"] },
//!     { "name": "scores", "module": "attention", "inputs": ["q", "k"] },
//!     ... ],
//!   "output": "ln2" }
//! ```
//!
//! The cluster description says how many clusters exist, which encoder (or
//! individual layer) lands where, and how kernels map to nodes:
//!
//! ```json
//! { "clusters": 12, "nodes_per_cluster": 6,
//!   "node_mapping": { "gateway": 0, "q": 0, "scores": 1, "scores.3": 2 } }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BuildError;
use crate::fabric::NetworkConfig;
use crate::gmi::Placement;

pub const MAX_CLUSTERS: usize = 256;
pub const MAX_KERNELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Linear,
    /// Dot product and softmax, one kernel per head.
    Attention,
    /// Softmax matmul and quant, one kernel per head.
    Context,
    /// Residual add and LayerNorm.
    Layernorm,
}

impl ModuleKind {
    pub fn per_head(&self) -> bool {
        matches!(self, ModuleKind::Attention | ModuleKind::Context)
    }

    pub fn arity(&self) -> usize {
        match self {
            ModuleKind::Linear => 1,
            _ => 2,
        }
    }
}

/// Hardware parallelism; unset fields fall back to the model config.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_pe: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub module: ModuleKind,
    /// Model-filesystem module the layer reads parameters from (`q`, `k`,
    /// `v`, `out`, `ffn1`, `ffn2`, `ln1`, `ln2`). Per-head modules have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    /// Producers in input-port order.
    pub inputs: Vec<String>,
    #[serde(default)]
    pub hw: HwConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescription {
    /// Encoders to instantiate; defaults to every encoder in the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoders: Option<usize>,
    pub layers: Vec<LayerSpec>,
    /// Layer whose result leaves the encoder.
    pub output: String,
}

impl LayerDescription {
    /// The I-BERT encoder: Q/K/V projections, per-head attention and
    /// context, output projection, two LayerNorms around the FFN.
    pub fn ibert(encoders: Option<usize>) -> Self {
        let linear = |name: &str, slot: &str, input: &str| LayerSpec {
            name: name.into(),
            module: ModuleKind::Linear,
            slot: Some(slot.into()),
            inputs: vec![input.into()],
            hw: HwConfig::default(),
        };
        let two = |name: &str, module, slot: Option<&str>, a: &str, b: &str| LayerSpec {
            name: name.into(),
            module,
            slot: slot.map(Into::into),
            inputs: vec![a.into(), b.into()],
            hw: HwConfig::default(),
        };
        Self {
            encoders,
            layers: vec![
                linear("q", "q", "input"),
                linear("k", "k", "input"),
                linear("v", "v", "input"),
                two("scores", ModuleKind::Attention, None, "q", "k"),
                two("context", ModuleKind::Context, None, "scores", "v"),
                linear("attn_out", "out", "context"),
                two(
                    "ln1",
                    ModuleKind::Layernorm,
                    Some("ln1"),
                    "attn_out",
                    "input",
                ),
                linear("ffn1", "ffn1", "ln1"),
                linear("ffn2", "ffn2", "ffn1"),
                two("ln2", ModuleKind::Layernorm, Some("ln2"), "ffn2", "ln1"),
            ],
            output: "ln2".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    /// Receiver side when every destination shares a node, else sender side.
    #[default]
    Auto,
    SenderSide,
    ReceiverSide,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Every node and the host on one switch.
    #[default]
    SingleSwitch,
    /// One switch per cluster, switches chained in cluster order; the host
    /// hangs off the first switch.
    SwitchPerCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSettings {
    #[serde(default = "defaults::switch_latency_s")]
    pub switch_latency_s: f64,
    #[serde(default = "defaults::clock_hz")]
    pub clock_hz: f64,
    #[serde(default = "defaults::bytes_per_cycle")]
    pub bytes_per_cycle: Option<u32>,
    #[serde(default)]
    pub loss_probability: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub topology: TopologyKind,
}

mod defaults {
    use crate::fabric::NetworkConfig;

    pub fn switch_latency_s() -> f64 {
        NetworkConfig::default().switch_latency_s
    }
    pub fn clock_hz() -> f64 {
        NetworkConfig::default().clock_hz
    }
    pub fn bytes_per_cycle() -> Option<u32> {
        NetworkConfig::default().bytes_per_cycle
    }
    pub fn one() -> usize {
        1
    }
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self {
            switch_latency_s: n.switch_latency_s,
            clock_hz: n.clock_hz,
            bytes_per_cycle: n.bytes_per_cycle,
            loss_probability: n.loss_probability,
            seed: n.seed,
            topology: TopologyKind::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDescription {
    pub clusters: usize,
    /// `e{l}` or `e{l}.{layer}` → cluster. Unlisted encoders are spread over
    /// the clusters in contiguous blocks (one encoder per cluster when the
    /// counts match).
    #[serde(default)]
    pub assignment: BTreeMap<String, usize>,
    #[serde(default = "defaults::one")]
    pub nodes_per_cluster: usize,
    /// Template layer name, `{layer}.{head}` or `gateway` → node index within
    /// the cluster. Unmapped compute kernels are bin-packed.
    #[serde(default)]
    pub node_mapping: BTreeMap<String, usize>,
    #[serde(default)]
    pub placement: PlacementPolicy,
    #[serde(default)]
    pub network: NetworkSettings,
}

impl ClusterDescription {
    pub fn single(nodes_per_cluster: usize) -> Self {
        Self {
            clusters: 1,
            assignment: BTreeMap::new(),
            nodes_per_cluster,
            node_mapping: BTreeMap::new(),
            placement: PlacementPolicy::Auto,
            network: NetworkSettings::default(),
        }
    }

    /// Cluster of layer `layer` in encoder `l` of `encoders`.
    pub fn cluster_of(&self, l: usize, encoders: usize, layer: &str) -> usize {
        if let Some(&c) = self.assignment.get(&format!("e{l}.{layer}")) {
            return c;
        }
        if let Some(&c) = self.assignment.get(&format!("e{l}")) {
            return c;
        }
        l * self.clusters / encoders.max(1)
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        if self.clusters == 0 {
            return Err(BuildError::Description(
                "at least one cluster is required".into(),
            ));
        }
        if self.clusters > MAX_CLUSTERS {
            return Err(BuildError::TooManyClusters {
                count: self.clusters,
                limit: MAX_CLUSTERS,
            });
        }
        if let Some((k, &c)) = self.assignment.iter().find(|(_, &c)| c >= self.clusters) {
            return Err(BuildError::Description(format!(
                "`{k}` assigned to cluster {c} of {}",
                self.clusters
            )));
        }
        if self.nodes_per_cluster == 0
            || self.clusters * self.nodes_per_cluster >= usize::from(u16::MAX)
        {
            return Err(BuildError::Description(format!(
                "bad nodes_per_cluster {}",
                self.nodes_per_cluster
            )));
        }
        if let Some((k, &n)) = self
            .node_mapping
            .iter()
            .find(|(_, &n)| n >= self.nodes_per_cluster)
        {
            return Err(BuildError::Description(format!(
                "`{k}` mapped to node {n} but clusters have {} nodes",
                self.nodes_per_cluster
            )));
        }
        Ok(())
    }

    pub fn placement(&self) -> Placement {
        match self.placement {
            PlacementPolicy::SenderSide => Placement::SenderSide,
            _ => Placement::ReceiverSide,
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BuildError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BuildError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| BuildError::Description(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ibert_template_round_trips() {
        let d = LayerDescription::ibert(Some(12));
        let json = serde_json::to_string_pretty(&d).unwrap();
        assert_eq!(serde_json::from_str::<LayerDescription>(&json).unwrap(), d);
        assert_eq!(d.layers.len(), 10);
    }

    #[test]
    fn default_assignment_is_one_encoder_per_cluster() {
        let mut c = ClusterDescription::single(1);
        c.clusters = 12;
        assert_eq!(
            (0..12)
                .map(|l| c.cluster_of(l, 12, "q"))
                .collect::<Vec<_>>(),
            (0..12).collect::<Vec<_>>()
        );
        c.clusters = 2;
        assert_eq!(c.cluster_of(5, 12, "q"), 0);
        assert_eq!(c.cluster_of(6, 12, "q"), 1);
        c.assignment.insert("e6.q".into(), 0);
        assert_eq!(c.cluster_of(6, 12, "q"), 0);
    }

    #[test]
    fn minimal_json_gets_defaults() {
        let c: ClusterDescription = serde_json::from_str(r#"{"clusters": 3}"#).unwrap();
        assert_eq!(c.nodes_per_cluster, 1);
        assert_eq!(c.network.clock_hz, 200e6);
        assert_eq!(c.network.bytes_per_cycle, Some(64));
        c.validate().unwrap();
    }

    #[test]
    fn cluster_limit() {
        let c: ClusterDescription = serde_json::from_str(r#"{"clusters": 257}"#).unwrap();
        assert!(matches!(
            c.validate(),
            Err(BuildError::TooManyClusters {
                count: 257,
                limit: 256
            })
        ));
    }
}
