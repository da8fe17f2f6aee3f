use std::collections::VecDeque;

use super::collectives::{reduce_ordered, ElemWidth, ReduceOp};
use crate::fabric::flits_for;
use crate::runtime::{Incoming, KernelBehavior, Notice, Outgoing, Reaction, Work};
use crate::Cycle;

/// Streaming cost of touching `bytes`: one cycle per 64-byte beat.
fn beats(bytes: usize) -> Cycle {
    flits_for(bytes) as Cycle
}

/// Copies every input message to output ports `0..members`.
#[derive(Clone, Debug)]
pub struct BroadcastKernel {
    pub members: usize,
}

impl KernelBehavior for BroadcastKernel {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        if self.members == 0 {
            return Reaction::single(Work::idle(beats(msg.payload.len())))
                .with_notice(Notice::Warning("broadcast to an empty group".into()));
        }
        let outputs = (0..self.members)
            .map(|p| Outgoing::new(p, msg.payload.clone(), msg.end_of_matrix))
            .collect();
        Reaction::single(Work::new(beats(msg.payload.len()), outputs))
    }
}

/// Splits every input message into consecutive chunks, chunk `i` on port `i`.
#[derive(Clone, Debug)]
pub struct ScatterKernel {
    pub members: usize,
    pub chunking: Option<usize>,
}

impl KernelBehavior for ScatterKernel {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let cost = beats(msg.payload.len());
        if self.members == 0 {
            return Reaction::single(Work::idle(cost))
                .with_notice(Notice::Warning("scatter to an empty group".into()));
        }
        let len = msg.payload.len();
        let chunk = self
            .chunking
            .unwrap_or_else(|| len.div_ceil(self.members))
            .max(1);
        if chunk * self.members < len {
            return Reaction::single(Work::idle(cost)).with_notice(Notice::Fault(format!(
                "{} chunks of {chunk} bytes cannot cover {len} bytes",
                self.members
            )));
        }
        let mut outputs = Vec::new();
        for i in 0..self.members {
            let start = (i * chunk).min(len);
            let end = ((i + 1) * chunk).min(len);
            if start < end {
                outputs.push(Outgoing::new(
                    i,
                    msg.payload[start..end].to_vec(),
                    msg.end_of_matrix,
                ));
            }
        }
        let missing = self.members - outputs.len();
        let r = Reaction::single(Work::new(cost, outputs));
        if missing > 0 {
            r.with_notice(Notice::Underfill {
                members_without_data: missing,
            })
        } else {
            r
        }
    }
}

/// Waits for one message on every input port, then emits their port-ordered
/// concatenation on port 0.
#[derive(Clone, Debug)]
pub struct GatherKernel {
    queues: Vec<VecDeque<(Vec<u8>, bool)>>,
}

impl GatherKernel {
    pub fn new(members: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); members],
        }
    }

    fn ready(&self) -> bool {
        !self.queues.is_empty() && self.queues.iter().all(|q| !q.is_empty())
    }

    fn pop_set(&mut self) -> (Vec<Vec<u8>>, bool) {
        let mut end = false;
        let set = self
            .queues
            .iter_mut()
            .map(|q| {
                let (data, e) = q.pop_front().expect("ready checked");
                end |= e;
                data
            })
            .collect();
        (set, end)
    }
}

impl KernelBehavior for GatherKernel {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let Some(q) = self.queues.get_mut(msg.port) else {
            return Reaction::none().with_notice(Notice::Fault(format!(
                "gather has no input port {}",
                msg.port
            )));
        };
        q.push_back((msg.payload, msg.end_of_matrix));
        let mut work = Vec::new();
        while self.ready() {
            let (set, end) = self.pop_set();
            let joined: Vec<u8> = set.concat();
            work.push(Work::new(
                beats(joined.len()),
                vec![Outgoing::new(0, joined, end)],
            ));
        }
        Reaction::work(work)
    }
}

/// Waits for one message on every input port, then emits their elementwise
/// reduction on port 0.
#[derive(Clone, Debug)]
pub struct ReduceKernel {
    inner: GatherKernel,
    pub op: ReduceOp,
    pub width: ElemWidth,
}

impl ReduceKernel {
    pub fn new(members: usize, op: ReduceOp, width: ElemWidth) -> Self {
        Self {
            inner: GatherKernel::new(members),
            op,
            width,
        }
    }
}

impl KernelBehavior for ReduceKernel {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let Some(q) = self.inner.queues.get_mut(msg.port) else {
            return Reaction::none().with_notice(Notice::Fault(format!(
                "reduce has no input port {}",
                msg.port
            )));
        };
        q.push_back((msg.payload, msg.end_of_matrix));
        let mut reaction = Reaction::none();
        while self.inner.ready() {
            let (set, end) = self.inner.pop_set();
            let cost = beats(set.iter().map(Vec::len).sum());
            match reduce_ordered(&set, self.op, self.width) {
                Ok(out) => reaction
                    .work
                    .push(Work::new(cost, vec![Outgoing::new(0, out, end)])),
                Err(e) => {
                    reaction.work.push(Work::idle(cost));
                    reaction.notices.push(Notice::Fault(e.to_string()));
                }
            }
        }
        reaction
    }
}

/// The two kernels an allgather expands to: a gather over `members` inputs
/// whose port 0 feeds a broadcast back out to `members` outputs.
pub fn allgather_stage(members: usize) -> (GatherKernel, BroadcastKernel) {
    (GatherKernel::new(members), BroadcastKernel { members })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(port: usize, payload: Vec<u8>) -> Incoming {
        Incoming {
            port,
            payload,
            end_of_matrix: false,
        }
    }

    #[test]
    fn broadcast_fans_out() {
        let r = BroadcastKernel { members: 3 }.on_message(msg(0, vec![1; 768]));
        assert_eq!(r.work.len(), 1);
        assert_eq!(r.work[0].cycles, 12);
        assert_eq!(
            r.work[0].outputs.iter().map(|o| o.port).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let r = BroadcastKernel { members: 0 }.on_message(msg(0, vec![1]));
        assert!(r.work[0].outputs.is_empty());
        assert!(matches!(r.notices[0], Notice::Warning(_)));
    }

    #[test]
    fn scatter_underfill_notice() {
        let mut k = ScatterKernel {
            members: 4,
            chunking: Some(100),
        };
        let r = k.on_message(msg(0, vec![0; 150]));
        assert_eq!(r.work[0].outputs.len(), 2);
        assert_eq!(
            r.notices,
            vec![Notice::Underfill {
                members_without_data: 2
            }]
        );
    }

    #[test]
    fn gather_waits_for_full_set() {
        let mut k = GatherKernel::new(3);
        assert!(k.on_message(msg(2, vec![3])).work.is_empty());
        assert!(k.on_message(msg(0, vec![1])).work.is_empty());
        assert!(k.on_message(msg(2, vec![6])).work.is_empty());
        let r = k.on_message(msg(1, vec![2]));
        assert_eq!(r.work[0].outputs[0].payload, vec![1, 2, 3]);
        k.on_message(msg(0, vec![4]));
        let r = k.on_message(msg(1, vec![5]));
        assert_eq!(r.work[0].outputs[0].payload, vec![4, 5, 6]);
    }

    #[test]
    fn reduce_faults_on_mismatch() {
        let mut k = ReduceKernel::new(2, ReduceOp::Sum, ElemWidth::I8);
        k.on_message(msg(0, vec![1, 2]));
        let r = k.on_message(msg(1, vec![3, 4]));
        assert_eq!(r.work[0].outputs[0].payload, vec![4, 6]);
        k.on_message(msg(0, vec![1, 2]));
        let r = k.on_message(msg(1, vec![3]));
        assert!(r.work[0].outputs.is_empty());
        assert!(matches!(r.notices[0], Notice::Fault(_)));
    }
}
