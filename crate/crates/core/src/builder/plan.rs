use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BuildError;
use crate::fabric::{route, GalapagosHeader, KernelAddress, NetworkConfig, NodeId, RoutingTables};
use crate::gmi::{CollectiveOp, GatewaySpec, GmiKernelSpec};
use crate::ibert::EncoderConfig;
use crate::runtime::{Endpoint, KernelKind, StreamSpec};

pub const PLAN_VERSION: u32 = 1;

/// Kernel IDs of one cluster split by category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelIdAssignment {
    pub compute: Vec<u8>,
    /// Gateway and standalone GMI kernels.
    pub communication: Vec<u8>,
    /// Collectives hosted by the gateway.
    #[serde(rename = "virtual")]
    pub virtual_ids: Vec<u8>,
}

impl KernelIdAssignment {
    pub fn len(&self) -> usize {
        self.compute.len() + self.communication.len() + self.virtual_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What a compute kernel computes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageRef {
    Linear { slot: String },
    Attention { head: usize },
    Context { head: usize },
    Norm { slot: String },
}

impl StageRef {
    pub fn input_ports(&self) -> usize {
        match self {
            StageRef::Linear { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRole {
    Compute {
        encoder: usize,
        stage: StageRef,
        tiles: usize,
        pes: usize,
        num_pe: usize,
    },
    Gmi {
        spec: GmiKernelSpec,
    },
    Gateway {
        spec: GatewaySpec,
        /// Local kernel ID → gateway output port.
        ports: BTreeMap<u8, usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanKernel {
    pub address: KernelAddress,
    pub name: String,
    pub node: NodeId,
    /// Declared cycles per row at the maximum sequence length; what the
    /// bin-packer balances.
    pub weight: u64,
    pub role: KernelRole,
}

impl PlanKernel {
    pub fn kind(&self) -> KernelKind {
        match self.role {
            KernelRole::Compute { .. } => KernelKind::Compute,
            KernelRole::Gmi { .. } => KernelKind::Gmi,
            KernelRole::Gateway { .. } => KernelKind::Gateway,
        }
    }

    /// Input ports the kernel expects to be wired, `None` when any count is
    /// acceptable.
    fn expected_inputs(&self) -> Option<usize> {
        match &self.role {
            KernelRole::Compute { stage, .. } => Some(stage.input_ports()),
            KernelRole::Gmi { spec } => Some(match spec.op {
                CollectiveOp::Gather | CollectiveOp::Reduce => spec.group.len(),
                _ => 1,
            }),
            KernelRole::Gateway { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCluster {
    pub id: u8,
    pub ids: KernelIdAssignment,
    pub kernels: Vec<PlanKernel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStream {
    #[serde(flatten)]
    pub spec: StreamSpec,
    /// Bytes per row at the maximum sequence length; streams that carry
    /// matrices must buffer one full matrix of them.
    pub row_bytes: usize,
}

/// A complete, self-describing multi-cluster deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub version: u32,
    pub model_fs: PathBuf,
    pub config: EncoderConfig,
    pub encoders: usize,
    pub clusters: Vec<PlanCluster>,
    pub streams: Vec<PlanStream>,
    pub routing: BTreeMap<NodeId, RoutingTables>,
    pub host_node: NodeId,
    pub network: NetworkConfig,
}

impl ClusterPlan {
    pub fn kernels(&self) -> impl Iterator<Item = &PlanKernel> {
        self.clusters.iter().flat_map(|c| &c.kernels)
    }

    pub fn kernel(&self, a: KernelAddress) -> Option<&PlanKernel> {
        self.clusters
            .get(usize::from(a.cluster))
            .and_then(|c| c.kernels.iter().find(|k| k.address == a))
    }

    pub fn kernel_by_name(&self, name: &str) -> Option<&PlanKernel> {
        self.kernels().find(|k| k.name == name)
    }

    /// The kernel whose output leaves for the host.
    pub fn output_kernel(&self) -> Option<KernelAddress> {
        self.streams
            .iter()
            .find(|s| s.spec.to == Endpoint::Host)
            .and_then(|s| s.spec.from.kernel())
    }

    /// Largest number of distinct node addresses any node stores.
    pub fn max_stored_addresses(&self) -> usize {
        self.routing
            .values()
            .map(RoutingTables::stored_addresses)
            .max()
            .unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, BuildError> {
        let plan: Self = serde_json::from_str(text).map_err(|e| BuildError::Plan(e.to_string()))?;
        if plan.version != PLAN_VERSION {
            return Err(BuildError::Plan(format!(
                "unsupported plan version {}",
                plan.version
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<(), BuildError> {
        fs::write(path, self.to_json())
            .map_err(|e| BuildError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, BuildError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BuildError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    IdSpace {
        cluster: u8,
        detail: String,
    },
    KernelLimit {
        cluster: u8,
        count: usize,
    },
    MissingGateway {
        cluster: u8,
    },
    GatewayBypass {
        from: Endpoint,
        to: Endpoint,
    },
    HeaderMismatch {
        from: Endpoint,
        to: Endpoint,
    },
    RoutingBound {
        node: NodeId,
        addresses: usize,
        bound: usize,
    },
    Misrouted {
        from: Endpoint,
        to: Endpoint,
        detail: String,
    },
    FifoCapacity {
        from: Endpoint,
        to: Endpoint,
        capacity: usize,
        needed: usize,
    },
    Cycle(Vec<KernelAddress>),
    Wiring(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdSpace { cluster, detail } => {
                write!(f, "cluster {cluster}: ID space {detail}")
            }
            Violation::KernelLimit { cluster, count } => {
                write!(f, "cluster {cluster} has {count} kernel IDs, limit is 256")
            }
            Violation::MissingGateway { cluster } => {
                write!(
                    f,
                    "cluster {cluster} has inter-cluster traffic but kernel 0 is not a gateway"
                )
            }
            Violation::GatewayBypass { from, to } => {
                write!(f, "inter-cluster edge bypasses gateway: {from} -> {to}")
            }
            Violation::HeaderMismatch { from, to } => {
                write!(
                    f,
                    "stream {from} -> {to}: GMI header present iff the stream crosses clusters"
                )
            }
            Violation::RoutingBound {
                node,
                addresses,
                bound,
            } => {
                write!(f, "{node} stores {addresses} addresses, bound is {bound}")
            }
            Violation::Misrouted { from, to, detail } => {
                write!(f, "stream {from} -> {to} misrouted: {detail}")
            }
            Violation::FifoCapacity {
                from,
                to,
                capacity,
                needed,
            } => {
                write!(
                    f,
                    "FIFO {from} -> {to} holds {capacity} bytes, one matrix needs {needed}"
                )
            }
            Violation::Cycle(ks) => {
                let names: Vec<String> = ks.iter().map(ToString::to_string).collect();
                write!(f, "kernel graph has a cycle through {}", names.join(", "))
            }
            Violation::Wiring(d) => write!(f, "wiring: {d}"),
        }
    }
}

/// Check every structural invariant of a plan. An empty list means the plan
/// is deployable.
pub fn validate(plan: &ClusterPlan) -> Vec<Violation> {
    let mut v = Vec::new();
    let n_clusters = plan.clusters.len();
    let addresses: BTreeMap<KernelAddress, &PlanKernel> =
        plan.kernels().map(|k| (k.address, k)).collect();

    // ID space.
    for (i, c) in plan.clusters.iter().enumerate() {
        if usize::from(c.id) != i {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: format!("listed at position {i}"),
            });
        }
        let mut all: Vec<u8> = c
            .ids
            .compute
            .iter()
            .chain(&c.ids.communication)
            .chain(&c.ids.virtual_ids)
            .copied()
            .collect();
        if all.len() > 256 {
            v.push(Violation::KernelLimit {
                cluster: c.id,
                count: all.len(),
            });
        }
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        if all.len() != n {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: "has overlapping categories".into(),
            });
        }
        if all.iter().enumerate().any(|(i, &id)| usize::from(id) != i) {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: "is not contiguous from 0".into(),
            });
        }
        let declared: BTreeSet<u8> = c
            .ids
            .compute
            .iter()
            .chain(&c.ids.communication)
            .copied()
            .collect();
        let present: BTreeSet<u8> = c.kernels.iter().map(|k| k.address.kernel).collect();
        if declared != present || c.kernels.len() != present.len() {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: "does not match the kernel list".into(),
            });
        }
        if let Some(k) = c.kernels.iter().find(|k| k.address.cluster != c.id) {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: format!("lists foreign kernel {}", k.address),
            });
        }
        for k in &c.kernels {
            let ok = match &k.role {
                KernelRole::Compute { .. } => c.ids.compute.contains(&k.address.kernel),
                KernelRole::Gmi { .. } | KernelRole::Gateway { .. } => {
                    c.ids.communication.contains(&k.address.kernel)
                }
            };
            if !ok {
                v.push(Violation::IdSpace {
                    cluster: c.id,
                    detail: format!("puts {} in the wrong category", k.address),
                });
            }
        }
        let hosted: BTreeSet<u8> = c
            .kernels
            .iter()
            .filter_map(|k| match &k.role {
                KernelRole::Gateway { spec, .. } => {
                    Some(spec.virtual_kernels.iter().map(|vk| vk.id))
                }
                _ => None,
            })
            .flatten()
            .filter(|&id| id != 0)
            .collect();
        if hosted != c.ids.virtual_ids.iter().copied().collect() {
            v.push(Violation::IdSpace {
                cluster: c.id,
                detail: "virtual IDs do not match the gateway".into(),
            });
        }
    }

    // Gateways and headers.
    let is_gateway = |a: KernelAddress| {
        addresses
            .get(&a)
            .is_some_and(|k| a.kernel == 0 && matches!(k.role, KernelRole::Gateway { .. }))
    };
    let mut crossing_clusters = BTreeSet::new();
    for s in &plan.streams {
        let spec = &s.spec;
        let crosses = spec.crosses_cluster();
        if crosses != spec.gmi_dest.is_some() {
            v.push(Violation::HeaderMismatch {
                from: spec.from,
                to: spec.to,
            });
        }
        if crosses {
            crossing_clusters.extend(spec.from.cluster());
            crossing_clusters.extend(spec.to.cluster());
            if let Endpoint::Kernel(to) = spec.to {
                if !is_gateway(to) {
                    v.push(Violation::GatewayBypass {
                        from: spec.from,
                        to: spec.to,
                    });
                }
            }
        } else if let (Endpoint::Kernel(_), Endpoint::Kernel(to)) = (spec.from, spec.to) {
            if is_gateway(to) {
                v.push(Violation::Wiring(format!(
                    "intra-cluster stream {} -> {to} ends at the gateway",
                    spec.from
                )));
            }
        }
    }
    for &c in &crossing_clusters {
        if !is_gateway(KernelAddress::new(c, 0)) {
            v.push(Violation::MissingGateway { cluster: c });
        }
    }

    // Routing state and reachability.
    for k in plan.kernels() {
        if !plan.routing.contains_key(&k.node) {
            v.push(Violation::Wiring(format!(
                "{} has no routing tables",
                k.node
            )));
        }
        if !plan.network.topology.attachments.contains_key(&k.node) {
            v.push(Violation::Wiring(format!(
                "{} is not attached to the network",
                k.node
            )));
        }
    }
    for (&node, t) in &plan.routing {
        let local_nodes: BTreeSet<NodeId> = t.local.values().copied().collect();
        let bound = local_nodes.len() + n_clusters.saturating_sub(1);
        if t.stored_addresses() > bound || t.gateways.contains_key(&t.cluster) {
            v.push(Violation::RoutingBound {
                node,
                addresses: t.stored_addresses(),
                bound,
            });
        }
    }
    for s in &plan.streams {
        let (Endpoint::Kernel(from), Endpoint::Kernel(to)) = (s.spec.from, s.spec.to) else {
            continue;
        };
        let (Some(src), Some(dst)) = (addresses.get(&from), addresses.get(&to)) else {
            continue;
        };
        let inter = from.cluster != to.cluster;
        let header = GalapagosHeader {
            sender: from,
            receiver: if inter { to.cluster } else { to.kernel },
            message_size: 0,
            inter_cluster: inter,
        };
        let detail = match plan.routing.get(&src.node).map(|t| route(&header, t)) {
            None => Some("sender node has no tables".to_string()),
            Some(Err(e)) => Some(e.to_string()),
            Some(Ok(n)) if n != dst.node => {
                Some(format!("tables say {n}, kernel lives on {}", dst.node))
            }
            Some(Ok(_)) => None,
        };
        if let Some(detail) = detail {
            v.push(Violation::Misrouted {
                from: s.spec.from,
                to: s.spec.to,
                detail,
            });
        }
    }

    // FIFO capacity.
    for s in &plan.streams {
        if s.row_bytes == 0 {
            continue;
        }
        let row = s.row_bytes + usize::from(s.spec.gmi_dest.is_some());
        let needed = plan.config.m_max * row;
        if s.spec.capacity_bytes < needed {
            v.push(Violation::FifoCapacity {
                from: s.spec.from,
                to: s.spec.to,
                capacity: s.spec.capacity_bytes,
                needed,
            });
        }
    }

    // Wiring.
    let mut inputs: BTreeMap<Endpoint, BTreeSet<usize>> = BTreeMap::new();
    let mut outputs: BTreeMap<Endpoint, BTreeSet<usize>> = BTreeMap::new();
    for s in &plan.streams {
        for ep in [s.spec.from, s.spec.to] {
            if let Endpoint::Kernel(a) = ep {
                if !addresses.contains_key(&a) {
                    v.push(Violation::Wiring(format!(
                        "stream endpoint {a} is not a kernel"
                    )));
                }
            }
        }
        if !outputs
            .entry(s.spec.from)
            .or_default()
            .insert(s.spec.from_port)
        {
            v.push(Violation::Wiring(format!(
                "output port {} of {} wired twice",
                s.spec.from_port, s.spec.from
            )));
        }
        if s.spec.to != Endpoint::Host
            && !inputs.entry(s.spec.to).or_default().insert(s.spec.to_port)
        {
            v.push(Violation::Wiring(format!(
                "input port {} of {} wired twice",
                s.spec.to_port, s.spec.to
            )));
        }
    }
    let contiguous = |ports: Option<&BTreeSet<usize>>| {
        ports.is_none_or(|p| p.iter().enumerate().all(|(i, &x)| i == x))
    };
    for k in plan.kernels() {
        let ep = Endpoint::Kernel(k.address);
        let ins = inputs.get(&ep).map_or(0, BTreeSet::len);
        if let Some(n) = k.expected_inputs() {
            if ins != n || !contiguous(inputs.get(&ep)) {
                v.push(Violation::Wiring(format!(
                    "{} ({}) has {ins} of {n} inputs wired",
                    k.address, k.name
                )));
            }
        } else if ins == 0 {
            v.push(Violation::Wiring(format!(
                "gateway {} has no inbound stream",
                k.address
            )));
        }
        if outputs.get(&ep).is_none_or(BTreeSet::is_empty) || !contiguous(outputs.get(&ep)) {
            v.push(Violation::Wiring(format!(
                "{} ({}) has unwired outputs",
                k.address, k.name
            )));
        }
        if let KernelRole::Gateway { ports, .. } = &k.role {
            for (&id, &port) in ports {
                let ok = plan.streams.iter().any(|s| {
                    s.spec.from == ep
                        && s.spec.from_port == port
                        && s.spec.to == Endpoint::Kernel(KernelAddress::new(k.address.cluster, id))
                });
                if !ok {
                    v.push(Violation::Wiring(format!(
                        "gateway {} port {port} is not wired to kernel {id}",
                        k.address
                    )));
                }
            }
        }
    }
    if !outputs.contains_key(&Endpoint::Host) {
        v.push(Violation::Wiring("no stream leaves the host".into()));
    }
    if !plan.streams.iter().any(|s| s.spec.to == Endpoint::Host) {
        v.push(Violation::Wiring("no stream reaches the host".into()));
    }

    if let Some(cycle) = find_cycle(plan) {
        v.push(Violation::Cycle(cycle));
    }
    v
}

fn find_cycle(plan: &ClusterPlan) -> Option<Vec<KernelAddress>> {
    let mut succ: BTreeMap<KernelAddress, Vec<KernelAddress>> = BTreeMap::new();
    for s in &plan.streams {
        if let (Endpoint::Kernel(a), Endpoint::Kernel(b)) = (s.spec.from, s.spec.to) {
            succ.entry(a).or_default().push(b);
        }
    }
    // 0 unvisited, 1 on stack, 2 done.
    let mut state: BTreeMap<KernelAddress, u8> = BTreeMap::new();
    let nodes: Vec<KernelAddress> = plan.kernels().map(|k| k.address).collect();
    for &start in &nodes {
        if state.get(&start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state.insert(start, 1);
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let children = succ.get(&node).map(Vec::as_slice).unwrap_or(&[]);
            if let Some(&child) = children.get(*next) {
                *next += 1;
                match state.get(&child).copied().unwrap_or(0) {
                    0 => {
                        state.insert(child, 1);
                        stack.push((child, 0));
                    }
                    1 => {
                        let pos = stack
                            .iter()
                            .position(|&(n, _)| n == child)
                            .expect("on stack");
                        return Some(stack[pos..].iter().map(|&(n, _)| n).collect());
                    }
                    _ => {}
                }
            } else {
                state.insert(node, 2);
                stack.pop();
            }
        }
    }
    None
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Write a stub source outline per kernel plus a per-cluster manifest, in the
/// shape an HLS flow would consume. Returns the files written.
pub fn emit_skeleton(plan: &ClusterPlan, dir: &Path) -> Result<Vec<PathBuf>, BuildError> {
    let io = |p: &Path, e: std::io::Error| BuildError::Io(format!("{}: {e}", p.display()));
    let mut written = Vec::new();
    for c in &plan.clusters {
        let cdir = dir.join(format!("cluster_{:03}", c.id));
        fs::create_dir_all(&cdir).map_err(|e| io(&cdir, e))?;
        let mut manifest = format!("cluster {}\n", c.id);
        for k in &c.kernels {
            let file = format!("kern_{:03}_{}.cpp", k.address.kernel, sanitize(&k.name));
            manifest.push_str(&format!(
                "{} {} {:?} {}\n",
                k.address.kernel,
                k.node,
                k.kind(),
                file
            ));
            let ins: Vec<String> = plan
                .streams
                .iter()
                .filter(|s| s.spec.to == Endpoint::Kernel(k.address))
                .map(|s| {
                    format!(
                        "//   in{} <- {} out{}",
                        s.spec.to_port, s.spec.from, s.spec.from_port
                    )
                })
                .collect();
            let outs: Vec<String> = plan
                .streams
                .iter()
                .filter(|s| s.spec.from == Endpoint::Kernel(k.address))
                .map(|s| {
                    format!(
                        "//   out{} -> {} in{}",
                        s.spec.from_port, s.spec.to, s.spec.to_port
                    )
                })
                .collect();
            let role = match &k.role {
                KernelRole::Compute {
                    stage,
                    tiles,
                    pes,
                    num_pe,
                    ..
                } => {
                    format!("{stage:?} tiles={tiles} pes={pes} num_pe={num_pe}")
                }
                KernelRole::Gmi { spec } => format!(
                    "{:?} over {} members, {:?}",
                    spec.op,
                    spec.group.len(),
                    spec.placement
                ),
                KernelRole::Gateway { spec, .. } => {
                    format!(
                        "gateway, {} forwarding entries, {} hosted collectives",
                        spec.forwarding.len(),
                        spec.virtual_kernels.len()
                    )
                }
            };
            let fname = sanitize(&k.name);
            let body = format!(
                "// {} ({}) on {}\n// {role}\n// inputs:\n{}\n// outputs:\n{}\n\
                 void kern_{fname}(hls::stream<axis_t> &in, hls::stream<axis_t> &out) {{\n    // TODO\n}}\n",
                k.name,
                k.address,
                k.node,
                ins.join("\n"),
                outs.join("\n"),
            );
            let path = cdir.join(file);
            fs::write(&path, body).map_err(|e| io(&path, e))?;
            written.push(path);
        }
        let path = cdir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
