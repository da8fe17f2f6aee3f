//! Collective kernels running under the event-driven runtime.

use std::collections::BTreeMap;

use gala::fabric::{KernelAddress, NetworkConfig, NodeId, RoutingTables, Topology};
use gala::gmi::{
    allgather, allgather_stage, BroadcastKernel, CollectiveOp, GatewayKernel, GatewaySpec,
    GatherKernel, GmiKernelSpec, VirtualKernelSpec,
};
use gala::runtime::{
    Deployment, Endpoint, EventKind, Incoming, KernelBehavior, KernelKind, Outgoing, Reaction,
    SimKernel, SimOptions, SimResult, Simulator, Stimulus, StreamSpec, Work,
};

/// Drops the GMI byte the host stream carries, then relays.
struct Entry;
impl KernelBehavior for Entry {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        Reaction::single(Work::new(
            1,
            vec![Outgoing::new(
                0,
                msg.payload[1..].to_vec(),
                msg.end_of_matrix,
            )],
        ))
    }
}

/// Consumes everything, remembering nothing.
struct Sink;
impl KernelBehavior for Sink {
    fn on_message(&mut self, _: Incoming) -> Reaction {
        Reaction::single(Work::idle(1))
    }
}

/// Tags every message with its own id before sending it on.
struct Tag(u8);
impl KernelBehavior for Tag {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let mut p = msg.payload[1..].to_vec();
        p.push(self.0);
        Reaction::single(Work::new(1, vec![Outgoing::new(0, p, msg.end_of_matrix)]))
    }
}

struct Relay;
impl KernelBehavior for Relay {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        Reaction::single(Work::new(
            1,
            vec![Outgoing::new(0, msg.payload, msg.end_of_matrix)],
        ))
    }
}

fn k(cluster: u8, kernel: u8) -> Endpoint {
    Endpoint::Kernel(KernelAddress::new(cluster, kernel))
}

fn link(
    from: Endpoint,
    from_port: usize,
    to: Endpoint,
    to_port: usize,
    gmi_dest: Option<u8>,
) -> StreamSpec {
    StreamSpec {
        from,
        from_port,
        to,
        to_port,
        capacity_bytes: 1 << 16,
        gmi_dest,
    }
}

struct Builder {
    kernels: Vec<SimKernel>,
    streams: Vec<StreamSpec>,
}

impl Builder {
    fn new() -> Self {
        Self {
            kernels: Vec::new(),
            streams: Vec::new(),
        }
    }

    fn kernel(
        &mut self,
        c: u8,
        id: u8,
        node: u16,
        kind: KernelKind,
        b: impl KernelBehavior + 'static,
    ) {
        self.kernels.push(SimKernel {
            address: KernelAddress::new(c, id),
            kind,
            node: NodeId(node),
            behavior: Box::new(b),
        });
    }

    fn deploy(self) -> Deployment {
        let host_node = NodeId(999);
        let mut routing: BTreeMap<NodeId, RoutingTables> = BTreeMap::new();
        let clusters: Vec<u8> = self.kernels.iter().map(|k| k.address.cluster).collect();
        for sk in &self.kernels {
            let t = routing
                .entry(sk.node)
                .or_insert_with(|| RoutingTables::new(sk.address.cluster));
            for other in &self.kernels {
                if other.address.cluster == t.cluster {
                    t.local.insert(other.address.kernel, other.node);
                } else if other.address.kernel == 0 {
                    t.gateways.insert(other.address.cluster, other.node);
                }
            }
        }
        assert!(!clusters.is_empty());
        let topology =
            Topology::single_switch(self.kernels.iter().map(|k| k.node).chain([host_node]));
        Deployment {
            kernels: self.kernels,
            streams: self.streams,
            routing,
            host_node,
            network: NetworkConfig {
                topology,
                ..NetworkConfig::default()
            },
        }
    }
}

fn run(dep: Deployment, rows: usize) -> SimResult {
    let stim = Stimulus::matrices(&[vec![vec![3u8; 768]; rows]], 0, 20);
    Simulator::new(dep)
        .unwrap()
        .run(stim, SimOptions::default())
        .unwrap()
}

fn network_sends(res: &SimResult) -> usize {
    res.trace
        .of_kind(EventKind::Send)
        .filter(|e| {
            e.switch_hops > 0 && e.src != Some(Endpoint::Host) && e.dst != Some(Endpoint::Host)
        })
        .count()
}

/// Sender kernel 1 on node 0; members 2..=4 on node 1; broadcast kernel 5 on
/// `bcast_node`.
fn broadcast_deployment(bcast_node: u16) -> Deployment {
    let mut b = Builder::new();
    b.kernel(0, 1, 0, KernelKind::Compute, Entry);
    b.kernel(
        0,
        5,
        bcast_node,
        KernelKind::Gmi,
        BroadcastKernel { members: 3 },
    );
    for m in 2..=4 {
        b.kernel(0, m, 1, KernelKind::Compute, Sink);
    }
    b.streams.push(link(Endpoint::Host, 0, k(0, 1), 0, Some(1)));
    b.streams.push(link(k(0, 1), 0, k(0, 5), 0, None));
    for (p, m) in (2..=4).enumerate() {
        b.streams.push(link(k(0, 5), p, k(0, m), 0, None));
    }
    b.deploy()
}

#[test]
fn receiver_side_broadcast_crosses_the_network_once() {
    let receiver = run(broadcast_deployment(1), 1);
    let sender = run(broadcast_deployment(0), 1);
    assert_eq!(network_sends(&receiver), 1);
    assert_eq!(network_sends(&sender), 3);
    for res in [&receiver, &sender] {
        let recvs: Vec<_> = res
            .trace
            .of_kind(EventKind::Recv)
            .filter(|e| e.src == Some(k(0, 5)))
            .map(|e| (e.dst, e.bytes))
            .collect();
        assert_eq!(recvs.len(), 3);
        assert!(recvs.iter().all(|(_, b)| *b == 768));
    }
}

/// Members 1..=3 each tag the host row with their id; `stage` connects them
/// to a gather at kernel 4 feeding a broadcast at kernel 5 back to the host.
fn allgather_deployment(gather: GatherKernel, bcast: BroadcastKernel) -> Deployment {
    let mut b = Builder::new();
    b.kernel(0, 4, 1, KernelKind::Gmi, gather);
    b.kernel(0, 5, 1, KernelKind::Gmi, bcast);
    for m in 1..=3u8 {
        b.kernel(0, m, u16::from(m) + 1, KernelKind::Compute, Tag(m));
        b.streams.push(link(
            Endpoint::Host,
            usize::from(m) - 1,
            k(0, m),
            0,
            Some(m),
        ));
        b.streams
            .push(link(k(0, m), 0, k(0, 4), usize::from(m) - 1, None));
        b.streams.push(link(
            k(0, 5),
            usize::from(m) - 1,
            Endpoint::Host,
            0,
            Some(0),
        ));
    }
    b.streams.push(link(k(0, 4), 0, k(0, 5), 0, None));
    b.deploy()
}

#[test]
fn allgather_equals_gather_then_broadcast() {
    let stim = || Stimulus {
        items: (0..3)
            .map(|p| gala::runtime::StimulusItem {
                cycle: 0,
                port: p,
                payload: vec![9; 4],
                end_of_matrix: true,
            })
            .collect(),
    };
    let (g, bc) = allgather_stage(3);
    let fused = Simulator::new(allgather_deployment(g, bc))
        .unwrap()
        .run(stim(), SimOptions::default())
        .unwrap();
    let manual = Simulator::new(allgather_deployment(
        GatherKernel::new(3),
        BroadcastKernel { members: 3 },
    ))
    .unwrap()
    .run(stim(), SimOptions::default())
    .unwrap();
    assert_eq!(fused.trace, manual.trace);

    let group: Vec<KernelAddress> = (1..=3).map(|m| KernelAddress::new(0, m)).collect();
    let spec = GmiKernelSpec::new(CollectiveOp::Gather, group.clone(), group[0]);
    let oracle = allgather(
        group
            .iter()
            .map(|a| (*a, vec![9, 9, 9, 9, a.kernel]))
            .collect(),
        &spec,
    )
    .unwrap();
    assert_eq!(fused.host_outputs.len(), 3);
    for (out, (_, expect)) in fused.host_outputs.iter().zip(&oracle) {
        assert_eq!(&out.payload, expect);
    }
}

/// Cluster 0 kernel 1 sends to cluster 1 kernel 5 through cluster 1's
/// gateway; a virtual broadcast (id 9) in the gateway fans out to 6 and 7.
fn two_cluster_deployment(dest: u8) -> Deployment {
    let mut spec = GatewaySpec::new(1);
    spec.forwarding.insert(5, 5);
    let group = vec![KernelAddress::new(1, 6), KernelAddress::new(1, 7)];
    spec.virtual_kernels.push(VirtualKernelSpec {
        id: 9,
        spec: GmiKernelSpec::new(CollectiveOp::Broadcast, group, KernelAddress::new(1, 9)),
    });
    let ports = BTreeMap::from([(5, 0), (6, 1), (7, 2)]);
    let mut b = Builder::new();
    b.kernel(0, 1, 0, KernelKind::Compute, Entry);
    b.kernel(
        1,
        0,
        1,
        KernelKind::Gateway,
        GatewayKernel::new(spec, ports),
    );
    for (m, node) in [(5u8, 2u16), (6, 1), (7, 1)] {
        b.kernel(1, m, node, KernelKind::Compute, Relay);
        b.streams.push(link(
            k(1, m),
            0,
            Endpoint::Host,
            usize::from(m - 5),
            Some(0),
        ));
    }
    b.streams.push(link(Endpoint::Host, 0, k(0, 1), 0, Some(1)));
    b.streams.push(link(k(0, 1), 0, k(1, 0), 0, Some(dest)));
    for (p, m) in [5u8, 6, 7].into_iter().enumerate() {
        b.streams.push(link(k(1, 0), p, k(1, m), 0, None));
    }
    b.deploy()
}

fn audit_headers(res: &SimResult) {
    for e in res
        .trace
        .of_kind(EventKind::Send)
        .chain(res.trace.of_kind(EventKind::Recv))
    {
        let (Some(Endpoint::Kernel(s)), Some(Endpoint::Kernel(d))) = (e.src, e.dst) else {
            continue;
        };
        if s.cluster == d.cluster {
            assert_eq!(
                e.gmi_bytes, 0,
                "intra-cluster event carries a header: {e:?}"
            );
        } else {
            assert_eq!(e.gmi_bytes, 1, "inter-cluster event without header: {e:?}");
            assert!(
                d.is_gateway(),
                "inter-cluster packet reached non-gateway {d}"
            );
        }
    }
}

#[test]
fn gateway_forwards_without_header() {
    let res = run(two_cluster_deployment(5), 2);
    audit_headers(&res);
    let outs: Vec<_> = res.host_outputs.iter().filter(|o| o.port == 0).collect();
    assert_eq!(outs.len(), 2);
    assert!(outs.iter().all(|o| o.payload == vec![3u8; 768]));
    let into_5: Vec<u32> = res
        .trace
        .of_kind(EventKind::Recv)
        .filter(|e| e.dst == Some(k(1, 5)))
        .map(|e| e.bytes)
        .collect();
    assert_eq!(into_5, vec![768, 768]);
}

#[test]
fn virtual_broadcast_fans_out_without_second_network_hop() {
    let res = run(two_cluster_deployment(9), 1);
    audit_headers(&res);
    let fan: Vec<_> = res
        .trace
        .of_kind(EventKind::Send)
        .filter(|e| e.src == Some(k(1, 0)))
        .collect();
    assert_eq!(fan.len(), 2);
    assert!(fan.iter().all(|e| e.switch_hops == 0));
    assert_eq!(res.host_outputs.len(), 2);
}

#[test]
fn dead_letter_is_recorded() {
    let res = run(two_cluster_deployment(0xFF), 1);
    assert!(res.host_outputs.is_empty());
    let dead: Vec<_> = res.trace.of_kind(EventKind::DeadLetter).collect();
    assert_eq!(dead.len(), 1);
}
