use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::desc::{
    ClusterDescription, LayerDescription, LayerSpec, ModuleKind, PlacementPolicy, TopologyKind,
    MAX_KERNELS,
};
use super::plan::{
    validate, ClusterPlan, KernelIdAssignment, KernelRole, PlanCluster, PlanKernel, PlanStream,
    StageRef, PLAN_VERSION,
};
use super::BuildError;
use crate::fabric::{KernelAddress, NetworkConfig, NodeId, RoutingTables, SwitchId, Topology};
use crate::gmi::{CollectiveOp, GatewaySpec, GmiKernelSpec, Placement, VirtualKernelSpec};
use crate::ibert::{cost, encoder_dir, read_model_config, EncoderConfig, Tiling};
use crate::runtime::{Endpoint, StreamSpec};

pub const HOST_NODE: NodeId = NodeId(u16::MAX);

/// Where a layer's input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Src {
    Host,
    Layer(usize),
}

struct Layer {
    name: String,
    template: String,
    encoder: usize,
    spec: LayerSpec,
    cluster: usize,
    inputs: Vec<Src>,
    /// Compute kernels, one per head for per-head modules.
    kernels: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Role {
    Gateway,
    Compute { layer: usize, head: usize },
    Scatter { source: Src, heads: Vec<usize> },
    Gather { heads: Vec<usize> },
    Broadcast { source: Src },
}

struct Kern {
    cluster: usize,
    name: String,
    role: Role,
    /// Node index within the cluster.
    node: Option<usize>,
    weight: u64,
    id: u8,
}

/// One kernel input port fed by a producer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Target {
    kernel: usize,
    port: usize,
}

#[derive(Clone, Debug)]
enum Sink {
    Local(Target),
    Foreign {
        cluster: usize,
        targets: Vec<Target>,
    },
    Host,
}

/// A producer output port feeding a sink.
#[derive(Clone, Debug)]
struct Wire {
    from: Option<usize>,
    from_port: usize,
    sink: Sink,
    row_bytes: usize,
}

fn slot_ok(module: ModuleKind, slot: Option<&str>) -> bool {
    match module {
        ModuleKind::Linear => matches!(slot, Some("q" | "k" | "v" | "out" | "ffn1" | "ffn2")),
        ModuleKind::Layernorm => matches!(slot, Some("ln1" | "ln2")),
        _ => slot.is_none(),
    }
}

/// Template layers in dependency order; rejects unknown inputs and cycles.
fn template_order(ld: &LayerDescription) -> Result<Vec<usize>, BuildError> {
    let index: BTreeMap<&str, usize> = ld
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();
    if index.len() != ld.layers.len() {
        return Err(BuildError::Description("duplicate layer name".into()));
    }
    if index.contains_key("input") {
        return Err(BuildError::Description(
            "`input` is a reserved layer name".into(),
        ));
    }
    if !index.contains_key(ld.output.as_str()) {
        return Err(BuildError::Description(format!(
            "output layer `{}` is not defined",
            ld.output
        )));
    }
    for l in &ld.layers {
        if l.inputs.len() != l.module.arity() {
            return Err(BuildError::Description(format!(
                "layer `{}` ({:?}) takes {} inputs, {} given",
                l.name,
                l.module,
                l.module.arity(),
                l.inputs.len()
            )));
        }
        if !slot_ok(l.module, l.slot.as_deref()) {
            return Err(BuildError::Description(format!(
                "layer `{}` has bad slot {:?}",
                l.name, l.slot
            )));
        }
        if let Some(i) = l
            .inputs
            .iter()
            .find(|i| *i != "input" && !index.contains_key(i.as_str()))
        {
            return Err(BuildError::Description(format!(
                "layer `{}` reads unknown layer `{i}`",
                l.name
            )));
        }
    }
    // Kahn's algorithm, ties broken by declaration order.
    let mut indegree: Vec<usize> = ld
        .layers
        .iter()
        .map(|l| l.inputs.iter().filter(|i| *i != "input").count())
        .collect();
    let mut ready: BTreeSet<usize> = (0..ld.layers.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::new();
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for (j, l) in ld.layers.iter().enumerate() {
            for inp in &l.inputs {
                if index.get(inp.as_str()) == Some(&i) {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        ready.insert(j);
                    }
                }
            }
        }
    }
    if order.len() != ld.layers.len() {
        let stuck: Vec<String> = (0..ld.layers.len())
            .filter(|i| !order.contains(i))
            .map(|i| ld.layers[i].name.clone())
            .collect();
        return Err(BuildError::Cycle(stuck));
    }
    Ok(order)
}

fn out_bytes(cfg: &EncoderConfig, spec: &LayerSpec) -> usize {
    match (spec.module, spec.slot.as_deref()) {
        (ModuleKind::Linear, Some("ffn1")) => cfg.ffn,
        (ModuleKind::Attention, _) => cfg.m_max,
        (ModuleKind::Context, _) => cfg.head_dim(),
        _ => cfg.hidden,
    }
}

fn in_bytes(cfg: &EncoderConfig, spec: &LayerSpec) -> usize {
    match spec.slot.as_deref() {
        Some("ffn2") => cfg.ffn,
        _ => cfg.hidden,
    }
}

fn hw(cfg: &EncoderConfig, spec: &LayerSpec) -> (usize, usize, usize) {
    (
        spec.hw.tiles.unwrap_or(cfg.linear_tiles),
        spec.hw.pes.unwrap_or(cfg.linear_pes),
        spec.hw.num_pe.unwrap_or(cfg.num_pe),
    )
}

fn stage_weight(cfg: &EncoderConfig, spec: &LayerSpec) -> u64 {
    let (tiles, pes, num_pe) = hw(cfg, spec);
    match spec.module {
        ModuleKind::Linear => cost::linear_row(
            in_bytes(cfg, spec),
            out_bytes(cfg, spec),
            Tiling { tiles, pes },
        ),
        ModuleKind::Attention => cost::attention_row(cfg.m_max, cfg.head_dim(), num_pe),
        ModuleKind::Context => cost::context_row(cfg.m_max),
        ModuleKind::Layernorm => cost::norm_row(cfg.hidden),
    }
}

/// Turn the two descriptions and a model filesystem into a validated plan.
///
/// Every encoder of the layer template is instantiated, layers are assigned
/// to clusters, and collectives are inserted where the graph fans out or
/// changes granularity: a scatter in front of per-head layers fed by a whole
/// matrix, a gather behind per-head layers feeding a whole-matrix layer, and
/// a broadcast wherever one output has several consumers. Fan-out into a
/// foreign cluster is done by the receiving gateway, which hosts the
/// broadcast as a virtual kernel.
pub fn build(
    cd: &ClusterDescription,
    ld: &LayerDescription,
    model_fs: &Path,
) -> Result<ClusterPlan, BuildError> {
    cd.validate()?;
    let order = template_order(ld)?;
    let cfg = read_model_config(model_fs).map_err(|e| BuildError::Model(e.to_string()))?;
    cfg.validate()
        .map_err(|e| BuildError::Model(e.to_string()))?;
    let encoders = ld.encoders.unwrap_or(cfg.layers);
    if encoders == 0 || encoders > cfg.layers {
        return Err(BuildError::Description(format!(
            "{encoders} encoders requested, model has {}",
            cfg.layers
        )));
    }
    for l in 0..encoders {
        for spec in &ld.layers {
            if let Some(slot) = &spec.slot {
                let dir = model_fs.join(encoder_dir(l)).join(slot);
                if !dir.join("meta.txt").is_file() {
                    return Err(BuildError::Model(format!(
                        "module {} missing from the model filesystem",
                        dir.display()
                    )));
                }
            }
        }
    }
    for spec in &ld.layers {
        let (tiles, pes, num_pe) = hw(&cfg, spec);
        if tiles == 0 || pes == 0 || num_pe == 0 {
            return Err(BuildError::Description(format!(
                "layer `{}` has zero parallelism",
                spec.name
            )));
        }
    }

    // Logical layers, encoder-major, template order within an encoder.
    let t_len = ld.layers.len();
    let pos: BTreeMap<&str, usize> = ld
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();
    let out_t = pos[ld.output.as_str()];
    let mut layers: Vec<Layer> = Vec::new();
    for l in 0..encoders {
        for &t in &order {
            let spec = ld.layers[t].clone();
            let inputs = spec
                .inputs
                .iter()
                .map(|i| match (i.as_str(), l) {
                    ("input", 0) => Src::Host,
                    ("input", _) => Src::Layer((l - 1) * t_len + out_t),
                    (name, _) => Src::Layer(l * t_len + pos[name]),
                })
                .collect();
            layers.push(Layer {
                name: format!("e{l}.{}", spec.name),
                template: spec.name.clone(),
                encoder: l,
                cluster: cd.cluster_of(l, encoders, &spec.name),
                spec,
                inputs,
                kernels: Vec::new(),
            });
        }
    }
    // `layers` is indexed by (encoder, template position); sort into that
    // order so `Src::Layer` indices resolve.
    let mut by_index: Vec<Option<Layer>> = (0..layers.len()).map(|_| None).collect();
    for (k, layer) in layers.into_iter().enumerate() {
        let l = k / t_len;
        let t = order[k % t_len];
        by_index[l * t_len + t] = Some(layer);
    }
    let mut layers: Vec<Layer> = by_index
        .into_iter()
        .map(|l| l.expect("every slot filled"))
        .collect();
    let topo: Vec<usize> = (0..encoders)
        .flat_map(|l| order.iter().map(move |&t| l * t_len + t))
        .collect();

    let mut kerns: Vec<Kern> = Vec::new();
    let new_kern = |kerns: &mut Vec<Kern>, cluster, name: String, role, weight| {
        kerns.push(Kern {
            cluster,
            name,
            role,
            node: None,
            weight,
            id: 0,
        });
        kerns.len() - 1
    };

    // Gateways first so they sort to ID 0: every cluster talks to the host or
    // another cluster.
    let mut gateways: BTreeMap<usize, usize> = BTreeMap::new();
    let used: BTreeSet<usize> = layers.iter().map(|l| l.cluster).collect();
    for &c in &used {
        let k = new_kern(&mut kerns, c, format!("c{c}.gateway"), Role::Gateway, 0);
        gateways.insert(c, k);
    }
    if used.len() != cd.clusters {
        let empty: Vec<usize> = (0..cd.clusters).filter(|c| !used.contains(c)).collect();
        return Err(BuildError::Description(format!(
            "clusters {empty:?} have no layers"
        )));
    }

    // Compute kernels, in template order within each encoder.
    for &li in &topo {
        let layer = &layers[li];
        let heads = if layer.spec.module.per_head() {
            cfg.heads
        } else {
            1
        };
        let weight = stage_weight(&cfg, &layer.spec);
        let mut ks = Vec::new();
        for h in 0..heads {
            let name = if layer.spec.module.per_head() {
                format!("{}.{h}", layer.name)
            } else {
                layer.name.clone()
            };
            ks.push(new_kern(
                &mut kerns,
                layer.cluster,
                name,
                Role::Compute { layer: li, head: h },
                weight,
            ));
        }
        layers[li].kernels = ks;
    }

    // Scatter and gather insertion; collect targets per producer and the
    // fixed intra-cluster wires.
    let mut targets: BTreeMap<Src, Vec<Target>> = BTreeMap::new();
    let mut wires: Vec<Wire> = Vec::new();
    let mut head_consumers: BTreeMap<usize, usize> = BTreeMap::new();
    let hd = cfg.head_dim();
    for &ci in &topo {
        let (c_cluster, c_heads, c_per_head) = (
            layers[ci].cluster,
            layers[ci].kernels.clone(),
            layers[ci].spec.module.per_head(),
        );
        for (port, &src) in layers[ci].inputs.clone().iter().enumerate() {
            let p_head = match src {
                Src::Layer(p) if layers[p].spec.module.per_head() => Some(p),
                _ => None,
            };
            if let Some(p) = p_head {
                *head_consumers.entry(p).or_default() += 1;
                if head_consumers[&p] > 1 {
                    return Err(BuildError::Unsupported(format!(
                        "per-head layer {} feeds more than one consumer",
                        layers[p].name
                    )));
                }
                if layers[p].cluster != c_cluster {
                    return Err(BuildError::Unsupported(format!(
                        "per-head layer {} and its consumer {} must share a cluster",
                        layers[p].name, layers[ci].name
                    )));
                }
            }
            match (p_head, c_per_head) {
                (Some(p), true) => {
                    for (h, &pk) in layers[p].kernels.iter().enumerate() {
                        let sink = Sink::Local(Target {
                            kernel: c_heads[h],
                            port,
                        });
                        wires.push(Wire {
                            from: Some(pk),
                            from_port: 0,
                            sink,
                            row_bytes: out_bytes(&cfg, &layers[p].spec),
                        });
                    }
                }
                (None, true) => {
                    let name = format!("{}.scatter{port}", layers[ci].name);
                    let role = Role::Scatter {
                        source: src,
                        heads: c_heads.clone(),
                    };
                    let s = new_kern(
                        &mut kerns,
                        c_cluster,
                        name,
                        role,
                        (cfg.hidden.div_ceil(64)) as u64,
                    );
                    targets
                        .entry(src)
                        .or_default()
                        .push(Target { kernel: s, port: 0 });
                    for (h, &ck) in c_heads.iter().enumerate() {
                        let sink = Sink::Local(Target { kernel: ck, port });
                        wires.push(Wire {
                            from: Some(s),
                            from_port: h,
                            sink,
                            row_bytes: hd,
                        });
                    }
                }
                (Some(p), false) => {
                    let name = format!("{}.gather", layers[ci].name);
                    let heads = layers[p].kernels.clone();
                    let g = new_kern(
                        &mut kerns,
                        c_cluster,
                        name,
                        Role::Gather {
                            heads: heads.clone(),
                        },
                        (cfg.hidden.div_ceil(64)) as u64,
                    );
                    let row = out_bytes(&cfg, &layers[p].spec);
                    for (h, &pk) in heads.iter().enumerate() {
                        wires.push(Wire {
                            from: Some(pk),
                            from_port: 0,
                            sink: Sink::Local(Target { kernel: g, port: h }),
                            row_bytes: row,
                        });
                    }
                    let sink = Sink::Local(Target {
                        kernel: c_heads[0],
                        port,
                    });
                    wires.push(Wire {
                        from: Some(g),
                        from_port: 0,
                        sink,
                        row_bytes: row * heads.len(),
                    });
                }
                (None, false) => targets.entry(src).or_default().push(Target {
                    kernel: c_heads[0],
                    port,
                }),
            }
        }
    }
    let last = (encoders - 1) * t_len + out_t;
    if layers[last].spec.module.per_head() {
        return Err(BuildError::Unsupported(
            "the output layer cannot be per-head".into(),
        ));
    }

    // Broadcast insertion and sink resolution per producer.
    let src_cluster = |s: Src| match s {
        Src::Host => None,
        Src::Layer(p) => Some(layers[p].cluster),
    };
    let src_kernel = |s: Src| match s {
        Src::Host => None,
        Src::Layer(p) => Some(layers[p].kernels[0]),
    };
    let src_row = |s: Src| match s {
        Src::Host => cfg.hidden,
        Src::Layer(p) => out_bytes(&cfg, &layers[p].spec),
    };
    let mut sources: Vec<Src> = std::iter::once(Src::Host)
        .chain(topo.iter().map(|&l| Src::Layer(l)))
        .collect();
    sources.retain(|s| targets.contains_key(s) || *s == Src::Layer(last));
    for src in sources {
        let ts = targets.get(&src).cloned().unwrap_or_default();
        let home = src_cluster(src);
        let mut sinks: Vec<Sink> = Vec::new();
        let mut foreign: BTreeMap<usize, Vec<Target>> = BTreeMap::new();
        for t in ts {
            let c = kerns[t.kernel].cluster;
            if Some(c) == home {
                sinks.push(Sink::Local(t));
            } else {
                foreign.entry(c).or_default().push(t);
            }
        }
        if src == Src::Host && foreign.len() > 1 {
            return Err(BuildError::Unsupported(
                "the encoder input must enter through a single cluster".into(),
            ));
        }
        sinks.extend(
            foreign
                .into_iter()
                .map(|(cluster, targets)| Sink::Foreign { cluster, targets }),
        );
        if src == Src::Layer(last) {
            sinks.push(Sink::Host);
        }
        let row = src_row(src);
        if sinks.len() > 1 {
            let Src::Layer(p) = src else {
                unreachable!("host feeds one cluster")
            };
            let name = format!("{}.broadcast", layers[p].name);
            let role = Role::Broadcast { source: src };
            let b = new_kern(
                &mut kerns,
                layers[p].cluster,
                name,
                role,
                row.div_ceil(64) as u64,
            );
            wires.push(Wire {
                from: src_kernel(src),
                from_port: 0,
                sink: Sink::Local(Target { kernel: b, port: 0 }),
                row_bytes: row,
            });
            for (i, sink) in sinks.into_iter().enumerate() {
                wires.push(Wire {
                    from: Some(b),
                    from_port: i,
                    sink,
                    row_bytes: row,
                });
            }
        } else if let Some(sink) = sinks.pop() {
            wires.push(Wire {
                from: src_kernel(src),
                from_port: 0,
                sink,
                row_bytes: row,
            });
        }
    }

    // Kernel IDs: gateway, compute, communication, then virtual.
    let mut virtual_needed: BTreeMap<usize, usize> = BTreeMap::new();
    for w in &wires {
        if let Sink::Foreign { cluster, targets } = &w.sink {
            if targets.len() > 1 {
                *virtual_needed.entry(*cluster).or_default() += 1;
            }
        }
    }
    let mut ids = vec![KernelIdAssignment::default(); cd.clusters];
    let mut counts = vec![0usize; cd.clusters];
    let rank = |r: &Role| match r {
        Role::Gateway => 0,
        Role::Compute { .. } => 1,
        Role::Scatter { .. } | Role::Gather { .. } => 2,
        Role::Broadcast { .. } => 3,
    };
    let mut by_rank: Vec<usize> = (0..kerns.len()).collect();
    by_rank.sort_by_key(|&k| rank(&kerns[k].role));
    for k in by_rank {
        let c = kerns[k].cluster;
        let total = counts[c] + 1 + virtual_needed.get(&c).map_or(0, |v| v.saturating_sub(1));
        if counts[c] >= MAX_KERNELS || total > MAX_KERNELS {
            let all = kerns.iter().filter(|x| x.cluster == c).count()
                + virtual_needed.get(&c).map_or(0, |v| v.saturating_sub(1));
            return Err(BuildError::TooManyKernels {
                cluster: c,
                count: all,
                limit: MAX_KERNELS,
            });
        }
        let id = counts[c] as u8;
        counts[c] += 1;
        kerns[k].id = id;
        match kerns[k].role {
            Role::Compute { .. } => ids[c].compute.push(id),
            _ => ids[c].communication.push(id),
        }
    }

    // Node placement: explicit mapping, then greedy bin-packing of the rest
    // by declared weight, then collectives next to their data.
    let npc = cd.nodes_per_cluster;
    for k in &mut kerns {
        let key = match &k.role {
            Role::Gateway => Some("gateway".to_string()),
            Role::Compute { layer, head } => {
                let t = &layers[*layer].template;
                if cd.node_mapping.contains_key(&format!("{t}.{head}")) {
                    Some(format!("{t}.{head}"))
                } else {
                    Some(t.clone())
                }
            }
            _ => None,
        };
        k.node = key.and_then(|key| cd.node_mapping.get(&key).copied());
        if matches!(k.role, Role::Gateway) && k.node.is_none() {
            k.node = Some(0);
        }
    }
    for c in 0..cd.clusters {
        let mut load = vec![0u64; npc];
        for k in kerns.iter().filter(|k| k.cluster == c) {
            if let Some(n) = k.node {
                load[n] += k.weight;
            }
        }
        let mut todo: Vec<usize> = (0..kerns.len())
            .filter(|&k| {
                kerns[k].cluster == c
                    && kerns[k].node.is_none()
                    && matches!(kerns[k].role, Role::Compute { .. })
            })
            .collect();
        todo.sort_by_key(|&k| (std::cmp::Reverse(kerns[k].weight), kerns[k].id));
        for k in todo {
            let n = (0..npc)
                .min_by_key(|&n| (load[n], n))
                .expect("at least one node");
            load[n] += kerns[k].weight;
            kerns[k].node = Some(n);
        }
    }
    let mut placements: BTreeMap<usize, Placement> = BTreeMap::new();
    // Collectives in ID order so broadcasts can see scatter placements.
    let mut gmi: Vec<usize> = (0..kerns.len())
        .filter(|&k| kerns[k].node.is_none())
        .collect();
    gmi.sort_by_key(|&k| (kerns[k].cluster, kerns[k].id));
    for k in gmi {
        let c = kerns[k].cluster;
        let gateway_node = kerns[gateways[&c]].node;
        let node_of_src = |s: Src| match s {
            Src::Layer(p) if layers[p].cluster == c => kerns[layers[p].kernels[0]].node,
            _ => gateway_node,
        };
        // Destination nodes (`None` for anything off-cluster), sender node.
        let (dests, sender): (Vec<Option<usize>>, Option<usize>) = match &kerns[k].role {
            Role::Scatter { source, heads } => (
                heads.iter().map(|&h| kerns[h].node).collect(),
                node_of_src(*source),
            ),
            Role::Gather { heads } => {
                let consumer = wires.iter().find(|w| w.from == Some(k)).and_then(|w| {
                    if let Sink::Local(t) = &w.sink {
                        kerns[t.kernel].node
                    } else {
                        None
                    }
                });
                (vec![consumer], kerns[heads[0]].node)
            }
            Role::Broadcast { source, .. } => {
                let d = wires
                    .iter()
                    .filter(|w| w.from == Some(k))
                    .map(|w| {
                        if let Sink::Local(t) = &w.sink {
                            kerns[t.kernel].node
                        } else {
                            None
                        }
                    })
                    .collect();
                (d, node_of_src(*source))
            }
            _ => unreachable!("only collectives are unplaced"),
        };
        let shared = dests
            .first()
            .copied()
            .flatten()
            .filter(|&n| dests.iter().all(|d| *d == Some(n)));
        let node = match cd.placement {
            PlacementPolicy::Auto => shared.or(sender),
            PlacementPolicy::SenderSide => sender,
            PlacementPolicy::ReceiverSide => dests.iter().flatten().next().copied().or(sender),
        }
        .unwrap_or(0);
        let placement = if Some(node) == sender && shared != Some(node) {
            Placement::SenderSide
        } else {
            Placement::ReceiverSide
        };
        placements.insert(k, placement);
        kerns[k].node = Some(node);
    }

    let addr = |k: usize| KernelAddress::new(kerns[k].cluster as u8, kerns[k].id);
    let node_id =
        |k: usize| NodeId((kerns[k].cluster * npc + kerns[k].node.expect("placed")) as u16);

    // Streams, gateway forwarding and hosted collectives.
    let mut gw_specs: BTreeMap<usize, GatewaySpec> = gateways
        .keys()
        .map(|&c| (c, GatewaySpec::new(c as u8)))
        .collect();
    let mut gw_ports: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
    let mut gw_in: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next_virtual: BTreeMap<usize, u8> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| (c, n as u8))
        .collect();
    let mut streams: Vec<PlanStream> = Vec::new();
    let mut host_ports = 0usize;
    let m = cfg.m_max;
    let stream = |from: Endpoint,
                  from_port,
                  to: Endpoint,
                  to_port,
                  gmi_dest: Option<u8>,
                  row_bytes: usize| PlanStream {
        spec: StreamSpec {
            from,
            from_port,
            to,
            to_port,
            capacity_bytes: m * (row_bytes + usize::from(gmi_dest.is_some())),
            gmi_dest,
        },
        row_bytes,
    };
    for w in &wires {
        let from = match w.from {
            Some(k) => Endpoint::Kernel(addr(k)),
            None => Endpoint::Host,
        };
        let from_port = if w.from.is_none() {
            host_ports += 1;
            host_ports - 1
        } else {
            w.from_port
        };
        match &w.sink {
            Sink::Local(t) => streams.push(stream(
                from,
                from_port,
                Endpoint::Kernel(addr(t.kernel)),
                t.port,
                None,
                w.row_bytes,
            )),
            Sink::Host => streams.push(stream(
                from,
                from_port,
                Endpoint::Host,
                0,
                Some(0),
                w.row_bytes,
            )),
            Sink::Foreign { cluster, targets } => {
                let gw = gateways[cluster];
                let spec = gw_specs.get_mut(cluster).expect("gateway exists");
                let header = if targets.len() == 1 {
                    let id = kerns[targets[0].kernel].id;
                    spec.forwarding.insert(id, id);
                    id
                } else {
                    let id = if spec.virtual_kernels.iter().any(|v| v.id == 0) {
                        let n = next_virtual[cluster];
                        *next_virtual.get_mut(cluster).expect("cluster") += 1;
                        ids[*cluster].virtual_ids.push(n);
                        n
                    } else {
                        0
                    };
                    let group = targets.iter().map(|t| addr(t.kernel)).collect();
                    let mut g = GmiKernelSpec::new(CollectiveOp::Broadcast, group, addr(gw));
                    g.placement = Placement::ReceiverSide;
                    spec.virtual_kernels.push(VirtualKernelSpec { id, spec: g });
                    id
                };
                let in_port = gw_in.entry(*cluster).or_default();
                streams.push(stream(
                    from,
                    from_port,
                    Endpoint::Kernel(addr(gw)),
                    *in_port,
                    Some(header),
                    w.row_bytes,
                ));
                *in_port += 1;
                let ports = gw_ports.entry(*cluster).or_default();
                for t in targets {
                    let id = kerns[t.kernel].id;
                    if ports.contains_key(&id) {
                        return Err(BuildError::Unsupported(format!(
                            "{} receives more than one inter-cluster input",
                            kerns[t.kernel].name
                        )));
                    }
                    let port = ports.len();
                    ports.insert(id, port);
                    let to = Endpoint::Kernel(addr(t.kernel));
                    streams.push(stream(
                        Endpoint::Kernel(addr(gw)),
                        port,
                        to,
                        t.port,
                        None,
                        w.row_bytes,
                    ));
                }
            }
        }
    }

    // Plan kernels.
    let mut clusters: Vec<PlanCluster> = (0..cd.clusters)
        .map(|c| PlanCluster {
            id: c as u8,
            ids: ids[c].clone(),
            kernels: Vec::new(),
        })
        .collect();
    let mut order_k: Vec<usize> = (0..kerns.len()).collect();
    order_k.sort_by_key(|&k| (kerns[k].cluster, kerns[k].id));
    for k in order_k {
        let kn = &kerns[k];
        let role = match &kn.role {
            Role::Gateway => KernelRole::Gateway {
                spec: gw_specs[&kn.cluster].clone(),
                ports: gw_ports.get(&kn.cluster).cloned().unwrap_or_default(),
            },
            Role::Compute { layer, head } => {
                let spec = &layers[*layer].spec;
                let (tiles, pes, num_pe) = hw(&cfg, spec);
                let stage = match spec.module {
                    ModuleKind::Linear => StageRef::Linear {
                        slot: spec.slot.clone().expect("checked"),
                    },
                    ModuleKind::Attention => StageRef::Attention { head: *head },
                    ModuleKind::Context => StageRef::Context { head: *head },
                    ModuleKind::Layernorm => StageRef::Norm {
                        slot: spec.slot.clone().expect("checked"),
                    },
                };
                KernelRole::Compute {
                    encoder: layers[*layer].encoder,
                    stage,
                    tiles,
                    pes,
                    num_pe,
                }
            }
            Role::Scatter { source, heads } => {
                let root = match source {
                    Src::Layer(p) if layers[*p].cluster == kn.cluster => {
                        addr(layers[*p].kernels[0])
                    }
                    _ => addr(gateways[&kn.cluster]),
                };
                let mut g = GmiKernelSpec::new(
                    CollectiveOp::Scatter,
                    heads.iter().map(|&h| addr(h)).collect(),
                    root,
                );
                g.chunking = Some(hd);
                g.placement = placements[&k];
                KernelRole::Gmi { spec: g }
            }
            Role::Gather { heads } => {
                let group: Vec<KernelAddress> = heads.iter().map(|&h| addr(h)).collect();
                let mut g = GmiKernelSpec::new(CollectiveOp::Gather, group.clone(), group[0]);
                g.placement = placements[&k];
                KernelRole::Gmi { spec: g }
            }
            Role::Broadcast { source, .. } => {
                let group = wires
                    .iter()
                    .filter(|w| w.from == Some(k))
                    .filter_map(|w| match &w.sink {
                        Sink::Local(t) => Some(addr(t.kernel)),
                        Sink::Foreign { cluster, .. } => Some(addr(gateways[cluster])),
                        Sink::Host => None,
                    })
                    .collect();
                let root = src_kernel(*source)
                    .map(addr)
                    .expect("broadcasts have kernel sources");
                let mut g = GmiKernelSpec::new(CollectiveOp::Broadcast, group, root);
                g.placement = placements[&k];
                KernelRole::Gmi { spec: g }
            }
        };
        clusters[kn.cluster].kernels.push(PlanKernel {
            address: addr(k),
            name: kn.name.clone(),
            node: node_id(k),
            weight: kn.weight,
            role,
        });
    }

    // Routing tables: every local kernel plus every foreign gateway.
    let mut routing = BTreeMap::new();
    let nodes: BTreeSet<(usize, NodeId)> = (0..kerns.len())
        .map(|k| (kerns[k].cluster, node_id(k)))
        .collect();
    for &(c, node) in &nodes {
        let mut t = RoutingTables::new(c as u8);
        for k in clusters[c].kernels.iter() {
            t.local.insert(k.address.kernel, k.node);
        }
        for (&oc, &gw) in &gateways {
            if oc != c {
                t.gateways.insert(oc as u8, node_id(gw));
            }
        }
        routing.insert(node, t);
    }

    let mut topology = Topology::default();
    for &(c, node) in &nodes {
        let sw = match cd.network.topology {
            TopologyKind::SingleSwitch => SwitchId(0),
            TopologyKind::SwitchPerCluster => SwitchId(c as u16),
        };
        topology.attachments.insert(node, sw);
    }
    topology.attachments.insert(HOST_NODE, SwitchId(0));
    if cd.network.topology == TopologyKind::SwitchPerCluster {
        topology.links = (1..cd.clusters)
            .map(|c| (SwitchId(c as u16 - 1), SwitchId(c as u16)))
            .collect();
    }
    let n = &cd.network;
    let network = NetworkConfig {
        switch_latency_s: n.switch_latency_s,
        clock_hz: n.clock_hz,
        bytes_per_cycle: n.bytes_per_cycle,
        loss_probability: n.loss_probability,
        seed: n.seed,
        topology,
    };
    network
        .validate()
        .map_err(|e| BuildError::Description(e.to_string()))?;

    let plan = ClusterPlan {
        version: PLAN_VERSION,
        model_fs: model_fs.to_path_buf(),
        config: cfg,
        encoders,
        clusters,
        streams,
        routing,
        host_node: HOST_NODE,
        network,
    };
    let violations = validate(&plan);
    if !violations.is_empty() {
        return Err(BuildError::Invalid(violations));
    }
    Ok(plan)
}
