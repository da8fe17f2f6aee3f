use serde::{Deserialize, Serialize};

use crate::Cycle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Compute,
    Gmi,
    Gateway,
}

/// A message handed to a kernel, tagged with the input port it arrived on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Incoming {
    pub port: usize,
    pub payload: Vec<u8>,
    /// Set on the final row of a matrix.
    pub end_of_matrix: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub port: usize,
    pub payload: Vec<u8>,
    pub end_of_matrix: bool,
}

impl Outgoing {
    pub fn new(port: usize, payload: Vec<u8>, end_of_matrix: bool) -> Self {
        Self {
            port,
            payload,
            end_of_matrix,
        }
    }
}

/// One unit of kernel work: the kernel is busy for `cycles`, then hands
/// `outputs` to its egress port in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Work {
    pub cycles: Cycle,
    pub outputs: Vec<Outgoing>,
}

impl Work {
    pub fn new(cycles: Cycle, outputs: Vec<Outgoing>) -> Self {
        Self { cycles, outputs }
    }

    pub fn idle(cycles: Cycle) -> Self {
        Self {
            cycles,
            outputs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Notice {
    /// GMI header named a kernel the gateway cannot deliver to.
    DeadLetter {
        dest: u8,
    },
    /// Scatter produced fewer segments than group members.
    Underfill {
        members_without_data: usize,
    },
    Warning(String),
    Fault(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Reaction {
    pub work: Vec<Work>,
    pub notices: Vec<Notice>,
}

impl Reaction {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn work(work: Vec<Work>) -> Self {
        Self {
            work,
            notices: Vec::new(),
        }
    }

    pub fn single(work: Work) -> Self {
        Self::work(vec![work])
    }

    pub fn with_notice(mut self, notice: Notice) -> Self {
        self.notices.push(notice);
        self
    }
}

/// Kernel step function. Kernels only see their own streams; all state lives
/// in the implementor.
pub trait KernelBehavior: Send {
    fn on_message(&mut self, msg: Incoming) -> Reaction;
}

/// Forwards every message to output port 0 after a fixed cost.
#[derive(Clone, Debug)]
pub struct Relay {
    pub cycles: Cycle,
}

impl KernelBehavior for Relay {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        Reaction::single(Work::new(
            self.cycles,
            vec![Outgoing::new(0, msg.payload, msg.end_of_matrix)],
        ))
    }
}
