use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::collectives::{broadcast, scatter, CollectiveOp, GmiError, GmiKernelSpec};
use crate::fabric::{flits_for, strip_gmi_header, HeaderError};
use crate::runtime::{Incoming, KernelBehavior, Notice, Outgoing, Reaction, Work};
use crate::Cycle;

/// A collective hosted inside the gateway. It owns a kernel ID but is not a
/// standalone graph node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualKernelSpec {
    pub id: u8,
    pub spec: GmiKernelSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewaySpec {
    pub cluster: u8,
    #[serde(default)]
    pub virtual_kernels: Vec<VirtualKernelSpec>,
    /// GMI header byte → local kernel that receives the stripped payload.
    #[serde(default)]
    pub forwarding: BTreeMap<u8, u8>,
}

impl GatewaySpec {
    pub fn new(cluster: u8) -> Self {
        Self {
            cluster,
            virtual_kernels: Vec::new(),
            forwarding: BTreeMap::new(),
        }
    }

    /// Virtual kernels must be stateless fan-outs whose members live in this
    /// cluster, and no header byte may be claimed twice.
    pub fn validate(&self) -> Result<(), String> {
        for v in &self.virtual_kernels {
            v.spec
                .validate()
                .map_err(|e| format!("virtual kernel {}: {e}", v.id))?;
            if !matches!(v.spec.op, CollectiveOp::Broadcast | CollectiveOp::Scatter) {
                return Err(format!(
                    "virtual kernel {} must be a broadcast or scatter",
                    v.id
                ));
            }
            if let Some(m) = v.spec.group.iter().find(|m| m.cluster != self.cluster) {
                return Err(format!("virtual kernel {} has foreign member {m}", v.id));
            }
            if self.forwarding.contains_key(&v.id) {
                return Err(format!(
                    "header byte {} is both forwarded and virtual",
                    v.id
                ));
            }
        }
        let mut ids: Vec<u8> = self.virtual_kernels.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate virtual kernel id".into());
        }
        Ok(())
    }

    fn virtual_kernel(&self, id: u8) -> Option<&VirtualKernelSpec> {
        self.virtual_kernels.iter().find(|v| v.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dispatch {
    Forward {
        kernel: u8,
        payload: Vec<u8>,
    },
    Virtual {
        kernel: u8,
        deliveries: Vec<(u8, Vec<u8>)>,
        underfill: usize,
    },
    DeadLetter {
        dest: u8,
    },
    Fault {
        kernel: u8,
        error: GmiError,
    },
}

/// Decode the GMI header of an inbound packet and decide where its payload
/// goes inside the cluster.
pub fn gateway_dispatch(packet: &[u8], spec: &GatewaySpec) -> Result<Dispatch, HeaderError> {
    let (dest, payload) = strip_gmi_header(packet)?;
    if let Some(v) = spec.virtual_kernel(dest) {
        let (deliveries, underfill) = match v.spec.op {
            CollectiveOp::Scatter => match scatter(payload, &v.spec) {
                Ok(s) => {
                    let d = s
                        .segments
                        .into_iter()
                        .filter(|(_, seg)| !seg.is_empty())
                        .map(|(m, seg)| (m.kernel, seg));
                    (d.collect(), s.underfill)
                }
                Err(error) => {
                    return Ok(Dispatch::Fault {
                        kernel: dest,
                        error,
                    })
                }
            },
            _ => (
                broadcast(payload, &v.spec)
                    .into_iter()
                    .map(|(m, d)| (m.kernel, d))
                    .collect(),
                0,
            ),
        };
        return Ok(Dispatch::Virtual {
            kernel: dest,
            deliveries,
            underfill,
        });
    }
    Ok(match spec.forwarding.get(&dest) {
        Some(&kernel) => Dispatch::Forward {
            kernel,
            payload: payload.to_vec(),
        },
        None => Dispatch::DeadLetter { dest },
    })
}

/// Kernel 0 of a cluster. Every inbound inter-cluster stream terminates here;
/// payloads leave on the output port wired to their local destination.
#[derive(Clone, Debug)]
pub struct GatewayKernel {
    pub spec: GatewaySpec,
    /// Local kernel ID → output port.
    pub ports: BTreeMap<u8, usize>,
}

impl GatewayKernel {
    pub fn new(spec: GatewaySpec, ports: BTreeMap<u8, usize>) -> Self {
        Self { spec, ports }
    }
}

impl KernelBehavior for GatewayKernel {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let cost = flits_for(msg.payload.len()) as Cycle;
        let d = match gateway_dispatch(&msg.payload, &self.spec) {
            Ok(d) => d,
            Err(e) => {
                return Reaction::single(Work::idle(cost)).with_notice(Notice::Fault(e.to_string()))
            }
        };
        let end = msg.end_of_matrix;
        let (deliveries, mut notices) = match d {
            Dispatch::Forward { kernel, payload } => (vec![(kernel, payload)], Vec::new()),
            Dispatch::Virtual {
                deliveries,
                underfill,
                ..
            } => {
                let n = if underfill > 0 {
                    vec![Notice::Underfill {
                        members_without_data: underfill,
                    }]
                } else {
                    vec![]
                };
                (deliveries, n)
            }
            Dispatch::DeadLetter { dest } => (Vec::new(), vec![Notice::DeadLetter { dest }]),
            Dispatch::Fault { kernel, error } => (
                Vec::new(),
                vec![Notice::Fault(format!("virtual kernel {kernel}: {error}"))],
            ),
        };
        let mut outputs = Vec::new();
        for (kernel, payload) in deliveries {
            match self.ports.get(&kernel) {
                Some(&port) => outputs.push(Outgoing::new(port, payload, end)),
                None => notices.push(Notice::DeadLetter { dest: kernel }),
            }
        }
        Reaction {
            work: vec![Work::new(cost, outputs)],
            notices,
        }
    }
}
