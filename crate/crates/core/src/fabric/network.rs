use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::NodeId;
use crate::Cycle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SwitchId(pub u16);

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("{0} is not attached to any switch")]
    Unattached(NodeId),
    #[error("no switch path from {0} to {1}")]
    Unreachable(NodeId, NodeId),
    #[error("loss probability {0} outside [0, 1]")]
    BadLossProbability(f64),
    #[error("link bandwidth must be positive")]
    ZeroBandwidth,
    #[error("clock frequency must be positive, got {0}")]
    BadClock(f64),
}

/// Node-to-switch attachments plus switch-to-switch links.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub attachments: BTreeMap<NodeId, SwitchId>,
    pub links: Vec<(SwitchId, SwitchId)>,
}

impl Topology {
    /// Every node on one switch.
    pub fn single_switch(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            attachments: nodes.into_iter().map(|n| (n, SwitchId(0))).collect(),
            links: Vec::new(),
        }
    }

    pub fn switches(&self) -> BTreeSet<SwitchId> {
        self.attachments
            .values()
            .copied()
            .chain(self.links.iter().flat_map(|&(a, b)| [a, b]))
            .collect()
    }

    /// Switches traversed between two nodes: 0 on the same node, 1 through a
    /// shared switch, one more per inter-switch link.
    pub fn switch_hops(&self, src: NodeId, dst: NodeId) -> Result<u32, NetError> {
        let a = *self
            .attachments
            .get(&src)
            .ok_or(NetError::Unattached(src))?;
        let b = *self
            .attachments
            .get(&dst)
            .ok_or(NetError::Unattached(dst))?;
        if src == dst {
            return Ok(0);
        }
        if a == b {
            return Ok(1);
        }
        let mut adjacency: BTreeMap<SwitchId, Vec<SwitchId>> = BTreeMap::new();
        for &(x, y) in &self.links {
            adjacency.entry(x).or_default().push(y);
            adjacency.entry(y).or_default().push(x);
        }
        let mut seen = BTreeSet::from([a]);
        let mut queue = VecDeque::from([(a, 1u32)]);
        while let Some((sw, depth)) = queue.pop_front() {
            for &next in adjacency.get(&sw).map(Vec::as_slice).unwrap_or(&[]) {
                if next == b {
                    return Ok(depth + 1);
                }
                if seen.insert(next) {
                    queue.push_back((next, depth + 1));
                }
            }
        }
        Err(NetError::Unreachable(src, dst))
    }
}

/// Parameters of the simulated switch network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Latency `d` added per traversed switch, in seconds.
    pub switch_latency_s: f64,
    /// Node clock used to convert `d` into cycles.
    pub clock_hz: f64,
    /// Link serialization rate; `None` models infinite bandwidth.
    pub bytes_per_cycle: Option<u32>,
    pub loss_probability: f64,
    pub seed: u64,
    pub topology: Topology,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            switch_latency_s: 1.1e-6,
            clock_hz: 200e6,
            bytes_per_cycle: Some(64),
            loss_probability: 0.0,
            seed: 0,
            topology: Topology::default(),
        }
    }
}

impl NetworkConfig {
    pub fn switch_latency_cycles(&self) -> Cycle {
        (self.switch_latency_s * self.clock_hz).round() as Cycle
    }

    pub fn serialization_cycles(&self, bytes: usize) -> Cycle {
        match self.bytes_per_cycle {
            Some(bw) => bytes.div_ceil(bw as usize).max(1) as Cycle,
            None => 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(NetError::BadLossProbability(self.loss_probability));
        }
        if self.bytes_per_cycle == Some(0) {
            return Err(NetError::ZeroBandwidth);
        }
        if !(self.clock_hz > 0.0) {
            return Err(NetError::BadClock(self.clock_hz));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transit {
    Delivered { arrival: Cycle, switch_hops: u32 },
    Dropped,
}

/// Simulated network state: the loss RNG and per-pair ordering.
#[derive(Debug)]
pub struct Network {
    config: NetworkConfig,
    rng: ChaCha8Rng,
    last_arrival: BTreeMap<(NodeId, NodeId), Cycle>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, NetError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            rng,
            last_arrival: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Move `bytes` from `src` to `dst`, departing at `depart`.
    ///
    /// Arrival is departure plus serialization plus `d` per traversed switch.
    /// Same-node delivery skips the switch and is never lost. Arrivals for one
    /// (src, dst) pair never overtake each other.
    pub fn transmit(
        &mut self,
        bytes: usize,
        src: NodeId,
        dst: NodeId,
        depart: Cycle,
    ) -> Result<Transit, NetError> {
        let hops = self.config.topology.switch_hops(src, dst)?;
        if hops > 0
            && self.config.loss_probability > 0.0
            && self.rng.gen::<f64>() < self.config.loss_probability
        {
            return Ok(Transit::Dropped);
        }
        let mut arrival = depart
            + self.config.serialization_cycles(bytes)
            + Cycle::from(hops) * self.config.switch_latency_cycles();
        let last = self.last_arrival.entry((src, dst)).or_insert(0);
        arrival = arrival.max(*last);
        *last = arrival;
        Ok(Transit::Delivered {
            arrival,
            switch_hops: hops,
        })
    }
}
