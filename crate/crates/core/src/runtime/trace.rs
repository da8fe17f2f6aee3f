use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::fabric::KernelAddress;
use crate::Cycle;

/// One end of a stream: a kernel, or the external host that injects stimulus
/// and collects results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Host,
    Kernel(KernelAddress),
}

impl Endpoint {
    pub fn kernel(&self) -> Option<KernelAddress> {
        match self {
            Endpoint::Kernel(a) => Some(*a),
            Endpoint::Host => None,
        }
    }

    pub fn cluster(&self) -> Option<u8> {
        self.kernel().map(|a| a.cluster)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Host => f.write_str("host"),
            Endpoint::Kernel(a) => a.fmt(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Inject,
    Send,
    Recv,
    Drop,
    Start,
    Finish,
    Stall,
    DeadLetter,
    Underfill,
    Warning,
    Fault,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Inject => "inject",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::Drop => "drop",
            EventKind::Start => "start",
            EventKind::Finish => "finish",
            EventKind::Stall => "stall",
            EventKind::DeadLetter => "dead_letter",
            EventKind::Underfill => "underfill",
            EventKind::Warning => "warning",
            EventKind::Fault => "fault",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub cycle: Cycle,
    pub kind: EventKind,
    pub src: Option<Endpoint>,
    pub dst: Option<Endpoint>,
    /// Bytes on the wire, including the GMI header byte when present.
    pub bytes: u32,
    /// GMI header bytes carried by the packet (0 or 1).
    pub gmi_bytes: u8,
    /// Switches traversed; 0 for node-internal delivery.
    pub switch_hops: u32,
    pub end_of_matrix: bool,
}

impl TraceEvent {
    pub fn new(cycle: Cycle, kind: EventKind) -> Self {
        Self {
            cycle,
            kind,
            src: None,
            dst: None,
            bytes: 0,
            gmi_bytes: 0,
            switch_hops: 0,
            end_of_matrix: false,
        }
    }

    pub fn is_inter_cluster(&self) -> bool {
        match (self.src, self.dst) {
            (Some(Endpoint::Kernel(a)), Some(Endpoint::Kernel(b))) => a.cluster != b.cluster,
            (Some(_), Some(_)) => true,
            _ => false,
        }
    }
}

/// Cycle-stamped record of one simulation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    /// Set when the cycle budget ran out before the streams drained.
    pub incomplete: bool,
}

impl SimTrace {
    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Newline-delimited `cycle,event,src_cluster,src_kernel,dst_cluster,dst_kernel,bytes`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("cycle,event,src_cluster,src_kernel,dst_cluster,dst_kernel,bytes\n");
        for e in &self.events {
            let _ = write!(out, "{},{},", e.cycle, e.kind.as_str());
            push_endpoint(&mut out, e.src);
            out.push(',');
            push_endpoint(&mut out, e.dst);
            let _ = writeln!(out, ",{}", e.bytes);
        }
        out
    }
}

fn push_endpoint(out: &mut String, ep: Option<Endpoint>) {
    match ep {
        Some(Endpoint::Kernel(a)) => {
            let _ = write!(out, "{},{}", a.cluster, a.kernel);
        }
        Some(Endpoint::Host) => out.push_str("host,-"),
        None => out.push_str("-,-"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows() {
        let mut e = TraceEvent::new(12, EventKind::Send);
        e.src = Some(Endpoint::Kernel(KernelAddress::new(0, 32)));
        e.dst = Some(Endpoint::Host);
        e.bytes = 768;
        let mut s = TraceEvent::new(3, EventKind::Start);
        s.src = Some(Endpoint::Kernel(KernelAddress::new(1, 2)));
        let trace = SimTrace {
            events: vec![s, e],
            incomplete: false,
        };
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "cycle,event,src_cluster,src_kernel,dst_cluster,dst_kernel,bytes"
        );
        assert_eq!(lines[1], "3,start,1,2,-,-,0");
        assert_eq!(lines[2], "12,send,0,32,host,-,768");
    }

    #[test]
    fn inter_cluster_classification() {
        let mut e = TraceEvent::new(0, EventKind::Send);
        e.src = Some(Endpoint::Kernel(KernelAddress::new(0, 1)));
        e.dst = Some(Endpoint::Kernel(KernelAddress::new(0, 2)));
        assert!(!e.is_inter_cluster());
        e.dst = Some(Endpoint::Kernel(KernelAddress::new(1, 0)));
        assert!(e.is_inter_cluster());
    }
}
