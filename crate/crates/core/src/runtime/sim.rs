use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kernel::{Incoming, KernelBehavior, KernelKind, Notice, Outgoing, Work};
use super::trace::{Endpoint, EventKind, SimTrace, TraceEvent};
use crate::fabric::{
    attach_gmi_header, route, strip_gmi_header, GalapagosHeader, HeaderError, KernelAddress,
    NetError, Network, NetworkConfig, NodeId, RouteError, RoutingTables, Transit,
};
use crate::Cycle;

/// A point-to-point stream between two endpoints with a bounded FIFO at the
/// consumer side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub from: Endpoint,
    pub from_port: usize,
    pub to: Endpoint,
    pub to_port: usize,
    pub capacity_bytes: usize,
    /// GMI header byte for streams that cross a cluster boundary.
    pub gmi_dest: Option<u8>,
}

impl StreamSpec {
    pub fn crosses_cluster(&self) -> bool {
        match (self.from, self.to) {
            (Endpoint::Kernel(a), Endpoint::Kernel(b)) => a.cluster != b.cluster,
            _ => true,
        }
    }
}

pub struct SimKernel {
    pub address: KernelAddress,
    pub kind: KernelKind,
    pub node: NodeId,
    pub behavior: Box<dyn KernelBehavior>,
}

/// Everything the simulator needs: instantiated kernels, their streams and
/// the network they sit on.
pub struct Deployment {
    pub kernels: Vec<SimKernel>,
    pub streams: Vec<StreamSpec>,
    pub routing: BTreeMap<NodeId, RoutingTables>,
    pub host_node: NodeId,
    pub network: NetworkConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StimulusItem {
    pub cycle: Cycle,
    /// Host output port, i.e. which host-sourced stream carries the item.
    pub port: usize,
    pub payload: Vec<u8>,
    pub end_of_matrix: bool,
}

/// Input schedule: rows handed to the input streams at fixed cycles.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stimulus {
    pub items: Vec<StimulusItem>,
}

impl Stimulus {
    /// Rows of consecutive matrices on host port 0, one row every `interval`
    /// cycles starting at `start`.
    pub fn matrices(matrices: &[Vec<Vec<u8>>], start: Cycle, interval: Cycle) -> Self {
        let mut items = Vec::new();
        let mut cycle = start;
        for rows in matrices {
            for (i, row) in rows.iter().enumerate() {
                items.push(StimulusItem {
                    cycle,
                    port: 0,
                    payload: row.clone(),
                    end_of_matrix: i + 1 == rows.len(),
                });
                cycle += interval;
            }
        }
        Self { items }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Stop once simulated time passes this cycle; the trace is then flagged
    /// incomplete.
    pub cycle_budget: Option<Cycle>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostDelivery {
    pub cycle: Cycle,
    pub port: usize,
    pub from: Endpoint,
    pub payload: Vec<u8>,
    pub end_of_matrix: bool,
}

#[derive(Debug)]
pub struct SimResult {
    pub trace: SimTrace,
    pub host_outputs: Vec<HostDelivery>,
    pub end_cycle: Cycle,
}

impl SimResult {
    /// Host-bound rows grouped into matrices by the end-of-matrix marker.
    pub fn output_matrices(&self, port: usize) -> Vec<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for d in self.host_outputs.iter().filter(|d| d.port == port) {
            current.push(d.payload.clone());
            if d.end_of_matrix {
                out.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("network: {0}")]
    Network(#[from] NetError),
    #[error("routing fault: {0}")]
    Route(#[from] RouteError),
    #[error("header: {0}")]
    Header(#[from] HeaderError),
    #[error("packet for {to} routed to {routed} but the kernel lives on {actual}")]
    Misrouted {
        to: KernelAddress,
        routed: NodeId,
        actual: NodeId,
    },
    #[error("wiring: {0}")]
    Wiring(String),
    #[error("deadlock at cycle {cycle}: {producer} blocked on full FIFO {producer}->{consumer} ({occupancy}/{capacity} bytes)")]
    Deadlock {
        cycle: Cycle,
        producer: Endpoint,
        consumer: Endpoint,
        occupancy: usize,
        capacity: usize,
    },
}

enum Ev {
    HostInject,
    Arrive {
        stream: usize,
        payload: Vec<u8>,
        end: bool,
    },
    Depart {
        stream: usize,
        payload: Vec<u8>,
        end: bool,
    },
    Wake(usize),
    WorkDone(usize),
}

struct Queued {
    cycle: Cycle,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.cycle, self.seq) == (other.cycle, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Min-heap on (cycle, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.cycle, other.seq).cmp(&(self.cycle, self.seq))
    }
}

enum Phase {
    Idle,
    Computing(Vec<Outgoing>),
    Emitting(VecDeque<Outgoing>),
}

struct KernelState {
    address: KernelAddress,
    node: NodeId,
    behavior: Box<dyn KernelBehavior>,
    inbox: VecDeque<(usize, Vec<u8>, bool)>,
    pending: VecDeque<Work>,
    phase: Phase,
    port_free: Cycle,
    stall_noted: bool,
    out_ports: Vec<usize>,
}

/// Discrete-event executor. Owns all mutable simulation state; one instance
/// runs one simulation.
pub struct Simulator {
    kernels: Vec<KernelState>,
    index: BTreeMap<KernelAddress, usize>,
    streams: Vec<StreamSpec>,
    occupancy: Vec<usize>,
    waiting: Vec<bool>,
    host_out: Vec<usize>,
    host_in: BTreeMap<usize, usize>,
    routing: BTreeMap<NodeId, RoutingTables>,
    host_node: NodeId,
    network: Network,
    queue: BinaryHeap<Queued>,
    seq: u64,
    trace: SimTrace,
    host_pending: VecDeque<StimulusItem>,
    host_scheduled: Option<Cycle>,
    host_stall_noted: bool,
    host_outputs: Vec<HostDelivery>,
}

impl Simulator {
    pub fn new(deployment: Deployment) -> Result<Self, SimError> {
        let Deployment {
            kernels,
            streams,
            routing,
            host_node,
            network,
        } = deployment;
        let network = Network::new(network)?;
        let mut index = BTreeMap::new();
        for (i, k) in kernels.iter().enumerate() {
            if index.insert(k.address, i).is_some() {
                return Err(SimError::Wiring(format!(
                    "kernel {} declared twice",
                    k.address
                )));
            }
        }
        let mut out_ports: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); kernels.len()];
        let mut host_out = BTreeMap::new();
        let mut host_in = BTreeMap::new();
        let mut in_ports: BTreeMap<(Endpoint, usize), usize> = BTreeMap::new();
        for (s, spec) in streams.iter().enumerate() {
            let dup = match spec.from {
                Endpoint::Host => host_out.insert(spec.from_port, s).is_some(),
                Endpoint::Kernel(a) => {
                    let k = *index.get(&a).ok_or_else(|| {
                        SimError::Wiring(format!("stream {s} starts at unknown kernel {a}"))
                    })?;
                    out_ports[k].insert(spec.from_port, s).is_some()
                }
            };
            if dup {
                return Err(SimError::Wiring(format!(
                    "output port {} of {} wired twice",
                    spec.from_port, spec.from
                )));
            }
            match spec.to {
                Endpoint::Host => {
                    host_in.insert(s, spec.to_port);
                }
                Endpoint::Kernel(a) if !index.contains_key(&a) => {
                    return Err(SimError::Wiring(format!(
                        "stream {s} ends at unknown kernel {a}"
                    )));
                }
                Endpoint::Kernel(_) => {
                    if in_ports.insert((spec.to, spec.to_port), s).is_some() {
                        return Err(SimError::Wiring(format!(
                            "input port {} of {} wired twice",
                            spec.to_port, spec.to
                        )));
                    }
                }
            }
            if spec.crosses_cluster() && spec.gmi_dest.is_none() {
                return Err(SimError::Wiring(format!(
                    "stream {}->{} crosses clusters without a GMI header",
                    spec.from, spec.to
                )));
            }
        }
        let dense = |ports: BTreeMap<usize, usize>,
                     owner: &dyn std::fmt::Display|
         -> Result<Vec<usize>, SimError> {
            ports
                .iter()
                .enumerate()
                .map(|(i, (&p, &s))| {
                    if i == p {
                        Ok(s)
                    } else {
                        Err(SimError::Wiring(format!(
                            "output ports of {owner} are not contiguous"
                        )))
                    }
                })
                .collect()
        };
        let host_out = dense(host_out, &"host")?;
        let kernels = kernels
            .into_iter()
            .zip(out_ports)
            .map(|(k, ports)| {
                Ok(KernelState {
                    out_ports: dense(ports, &k.address)?,
                    address: k.address,
                    node: k.node,
                    behavior: k.behavior,
                    inbox: VecDeque::new(),
                    pending: VecDeque::new(),
                    phase: Phase::Idle,
                    port_free: 0,
                    stall_noted: false,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let n = streams.len();
        Ok(Self {
            kernels,
            index,
            streams,
            occupancy: vec![0; n],
            waiting: vec![false; n],
            host_out,
            host_in,
            routing,
            host_node,
            network,
            queue: BinaryHeap::new(),
            seq: 0,
            trace: SimTrace::default(),
            host_pending: VecDeque::new(),
            host_scheduled: None,
            host_stall_noted: false,
            host_outputs: Vec::new(),
        })
    }

    pub fn run(mut self, stimulus: Stimulus, options: SimOptions) -> Result<SimResult, SimError> {
        let mut items = stimulus.items;
        items.sort_by_key(|i| i.cycle);
        for item in &items {
            if item.port >= self.host_out.len() {
                return Err(SimError::Wiring(format!(
                    "stimulus uses host port {} which has no stream",
                    item.port
                )));
            }
        }
        self.host_pending = items.into();
        if let Some(first) = self.host_pending.front() {
            let c = first.cycle;
            self.schedule_host(c);
        }
        let mut now = 0;
        while let Some(q) = self.queue.pop() {
            if options.cycle_budget.is_some_and(|b| q.cycle > b) {
                self.trace.incomplete = true;
                break;
            }
            now = q.cycle;
            match q.ev {
                Ev::HostInject => {
                    self.host_scheduled = None;
                    self.host_inject(now);
                }
                Ev::Arrive {
                    stream,
                    payload,
                    end,
                } => self.arrive(now, stream, payload, end)?,
                Ev::Depart {
                    stream,
                    payload,
                    end,
                } => self.depart(now, stream, payload, end)?,
                Ev::Wake(k) => self.advance(k, now)?,
                Ev::WorkDone(k) => {
                    let ks = &mut self.kernels[k];
                    let mut e = TraceEvent::new(now, EventKind::Finish);
                    e.src = Some(Endpoint::Kernel(ks.address));
                    self.trace.events.push(e);
                    if let Phase::Computing(outs) = std::mem::replace(&mut ks.phase, Phase::Idle) {
                        ks.phase = Phase::Emitting(outs.into());
                    }
                    self.advance(k, now)?;
                }
            }
        }
        if !self.trace.incomplete {
            self.check_deadlock(now)?;
        }
        Ok(SimResult {
            trace: self.trace,
            host_outputs: self.host_outputs,
            end_cycle: now,
        })
    }

    fn push(&mut self, cycle: Cycle, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued {
            cycle,
            seq: self.seq,
            ev,
        });
    }

    fn schedule_host(&mut self, cycle: Cycle) {
        if self.host_scheduled.is_some_and(|c| c <= cycle) {
            return;
        }
        self.host_scheduled = Some(cycle);
        self.push(cycle, Ev::HostInject);
    }

    fn wire_bytes(&self, stream: usize, payload_len: usize) -> usize {
        payload_len + usize::from(self.streams[stream].gmi_dest.is_some())
    }

    fn has_credit(&self, stream: usize, bytes: usize) -> bool {
        self.occupancy[stream] == 0
            || self.occupancy[stream] + bytes <= self.streams[stream].capacity_bytes
    }

    fn frame(&self, stream: usize, payload: Vec<u8>) -> Result<Vec<u8>, SimError> {
        Ok(match self.streams[stream].gmi_dest {
            Some(id) => attach_gmi_header(&payload, u32::from(id))?,
            None => payload,
        })
    }

    fn host_inject(&mut self, now: Cycle) {
        while let Some(item) = self.host_pending.front() {
            if item.cycle > now {
                let c = item.cycle;
                self.schedule_host(c);
                return;
            }
            let stream = self.host_out[item.port];
            let bytes = self.wire_bytes(stream, item.payload.len());
            if !self.has_credit(stream, bytes) {
                if !self.host_stall_noted {
                    self.host_stall_noted = true;
                    let mut e = TraceEvent::new(now, EventKind::Stall);
                    e.src = Some(Endpoint::Host);
                    e.dst = Some(self.streams[stream].to);
                    self.trace.events.push(e);
                }
                self.waiting[stream] = true;
                return;
            }
            self.host_stall_noted = false;
            let item = self.host_pending.pop_front().expect("front checked");
            self.occupancy[stream] += bytes;
            let payload = self
                .frame(stream, item.payload)
                .expect("host streams carry valid GMI ids");
            let mut e = TraceEvent::new(now, EventKind::Inject);
            e.src = Some(Endpoint::Host);
            e.dst = Some(self.streams[stream].to);
            e.bytes = bytes as u32;
            e.gmi_bytes = u8::from(self.streams[stream].gmi_dest.is_some());
            e.end_of_matrix = item.end_of_matrix;
            self.trace.events.push(e);
            self.push(
                now,
                Ev::Arrive {
                    stream,
                    payload,
                    end: item.end_of_matrix,
                },
            );
        }
    }

    fn endpoint_node(&self, ep: Endpoint) -> NodeId {
        match ep {
            Endpoint::Host => self.host_node,
            Endpoint::Kernel(a) => self.kernels[self.index[&a]].node,
        }
    }

    fn depart(
        &mut self,
        now: Cycle,
        stream: usize,
        payload: Vec<u8>,
        end: bool,
    ) -> Result<(), SimError> {
        let spec = self.streams[stream].clone();
        let src_node = self.endpoint_node(spec.from);
        let dst_node = match (spec.from, spec.to) {
            (Endpoint::Kernel(from), Endpoint::Kernel(to)) => {
                let inter = from.cluster != to.cluster;
                let header = GalapagosHeader {
                    sender: from,
                    receiver: if inter { to.cluster } else { to.kernel },
                    message_size: payload.len() as u32,
                    inter_cluster: inter,
                };
                let tables = self
                    .routing
                    .get(&src_node)
                    .ok_or_else(|| SimError::Wiring(format!("{src_node} has no routing tables")))?;
                let routed = route(&header, tables)?;
                let actual = self.endpoint_node(spec.to);
                if routed != actual {
                    return Err(SimError::Misrouted { to, routed, actual });
                }
                routed
            }
            (_, to) => self.endpoint_node(to),
        };
        let transit = self
            .network
            .transmit(payload.len(), src_node, dst_node, now)?;
        let mut e = TraceEvent::new(now, EventKind::Send);
        e.src = Some(spec.from);
        e.dst = Some(spec.to);
        e.bytes = payload.len() as u32;
        e.gmi_bytes = u8::from(spec.gmi_dest.is_some());
        e.end_of_matrix = end;
        match transit {
            Transit::Delivered {
                arrival,
                switch_hops,
            } => {
                e.switch_hops = switch_hops;
                self.trace.events.push(e);
                self.push(
                    arrival,
                    Ev::Arrive {
                        stream,
                        payload,
                        end,
                    },
                );
            }
            Transit::Dropped => {
                self.trace.events.push(e.clone());
                let mut d = e;
                d.kind = EventKind::Drop;
                self.trace.events.push(d);
                self.release(stream, payload.len(), now);
            }
        }
        Ok(())
    }

    fn arrive(
        &mut self,
        now: Cycle,
        stream: usize,
        payload: Vec<u8>,
        end: bool,
    ) -> Result<(), SimError> {
        let spec = &self.streams[stream];
        let mut e = TraceEvent::new(now, EventKind::Recv);
        e.src = Some(spec.from);
        e.dst = Some(spec.to);
        e.bytes = payload.len() as u32;
        e.gmi_bytes = u8::from(spec.gmi_dest.is_some());
        e.end_of_matrix = end;
        self.trace.events.push(e);
        match spec.to {
            Endpoint::Host => {
                let port = self.host_in[&stream];
                let from = spec.from;
                let data = if spec.gmi_dest.is_some() {
                    strip_gmi_header(&payload)?.1.to_vec()
                } else {
                    payload.clone()
                };
                self.release(stream, payload.len(), now);
                self.host_outputs.push(HostDelivery {
                    cycle: now,
                    port,
                    from,
                    payload: data,
                    end_of_matrix: end,
                });
                Ok(())
            }
            Endpoint::Kernel(a) => {
                let k = self.index[&a];
                self.kernels[k].inbox.push_back((stream, payload, end));
                self.advance(k, now)
            }
        }
    }

    fn release(&mut self, stream: usize, bytes: usize, now: Cycle) {
        self.occupancy[stream] = self.occupancy[stream].saturating_sub(bytes);
        if std::mem::take(&mut self.waiting[stream]) {
            match self.streams[stream].from {
                Endpoint::Host => self.schedule_host(now),
                Endpoint::Kernel(a) => {
                    let k = self.index[&a];
                    self.push(now, Ev::Wake(k));
                }
            }
        }
    }

    fn advance(&mut self, k: usize, now: Cycle) -> Result<(), SimError> {
        loop {
            let phase = std::mem::replace(&mut self.kernels[k].phase, Phase::Idle);
            match phase {
                Phase::Computing(outs) => {
                    self.kernels[k].phase = Phase::Computing(outs);
                    return Ok(());
                }
                Phase::Emitting(mut outs) => {
                    while let Some(o) = outs.front() {
                        let ks = &self.kernels[k];
                        let stream = *ks.out_ports.get(o.port).ok_or_else(|| {
                            SimError::Wiring(format!(
                                "{} emitted on unwired port {}",
                                ks.address, o.port
                            ))
                        })?;
                        let bytes = self.wire_bytes(stream, o.payload.len());
                        if !self.has_credit(stream, bytes) {
                            let ks = &mut self.kernels[k];
                            if !ks.stall_noted {
                                ks.stall_noted = true;
                                let mut e = TraceEvent::new(now, EventKind::Stall);
                                e.src = Some(Endpoint::Kernel(ks.address));
                                e.dst = Some(self.streams[stream].to);
                                self.trace.events.push(e);
                            }
                            self.waiting[stream] = true;
                            self.kernels[k].phase = Phase::Emitting(outs);
                            return Ok(());
                        }
                        let o = outs.pop_front().expect("front checked");
                        self.occupancy[stream] += bytes;
                        let ser = self.network.config().serialization_cycles(bytes);
                        let ks = &mut self.kernels[k];
                        ks.stall_noted = false;
                        let depart = now.max(ks.port_free);
                        ks.port_free = depart + ser;
                        let payload = self.frame(stream, o.payload)?;
                        self.push(
                            depart,
                            Ev::Depart {
                                stream,
                                payload,
                                end: o.end_of_matrix,
                            },
                        );
                    }
                }
                Phase::Idle => {
                    let ks = &mut self.kernels[k];
                    if let Some(w) = ks.pending.pop_front() {
                        if w.cycles == 0 {
                            ks.phase = Phase::Emitting(w.outputs.into());
                        } else {
                            ks.phase = Phase::Computing(w.outputs);
                            let mut e = TraceEvent::new(now, EventKind::Start);
                            e.src = Some(Endpoint::Kernel(ks.address));
                            self.trace.events.push(e);
                            self.push(now + w.cycles, Ev::WorkDone(k));
                            return Ok(());
                        }
                    } else if let Some((stream, payload, end)) = ks.inbox.pop_front() {
                        let bytes = payload.len();
                        let port = self.streams[stream].to_port;
                        self.release(stream, bytes, now);
                        let ks = &mut self.kernels[k];
                        let reaction = ks.behavior.on_message(Incoming {
                            port,
                            payload,
                            end_of_matrix: end,
                        });
                        let src = Some(Endpoint::Kernel(ks.address));
                        ks.pending.extend(reaction.work);
                        for notice in reaction.notices {
                            let kind = match notice {
                                Notice::DeadLetter { .. } => EventKind::DeadLetter,
                                Notice::Underfill { .. } => EventKind::Underfill,
                                Notice::Warning(_) => EventKind::Warning,
                                Notice::Fault(_) => EventKind::Fault,
                            };
                            let mut e = TraceEvent::new(now, kind);
                            e.src = src;
                            if let Notice::DeadLetter { dest } = notice {
                                e.dst = Some(Endpoint::Kernel(KernelAddress::new(
                                    self.kernels[k].address.cluster,
                                    dest,
                                )));
                            }
                            self.trace.events.push(e);
                        }
                    } else {
                        return Ok(());
                    }
                }
            }
        }
    }

    fn check_deadlock(&self, now: Cycle) -> Result<(), SimError> {
        let blocked = |stream: usize, producer: Endpoint| SimError::Deadlock {
            cycle: now,
            producer,
            consumer: self.streams[stream].to,
            occupancy: self.occupancy[stream],
            capacity: self.streams[stream].capacity_bytes,
        };
        for ks in &self.kernels {
            if let Phase::Emitting(outs) = &ks.phase {
                if let Some(o) = outs.front() {
                    return Err(blocked(ks.out_ports[o.port], Endpoint::Kernel(ks.address)));
                }
            }
        }
        if let Some(item) = self.host_pending.front() {
            return Err(blocked(self.host_out[item.port], Endpoint::Host));
        }
        Ok(())
    }
}
