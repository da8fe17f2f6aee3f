//! Deterministic discrete-event execution of streaming kernels and the
//! cycle instrumentation used to extract X, T and I.

mod kernel;
mod measure;
mod sim;
mod trace;

pub use kernel::{Incoming, KernelBehavior, KernelKind, Notice, Outgoing, Reaction, Relay, Work};
pub use measure::{
    first_arrival, measure_xti, measure_xti_from, LatencyComponents, MeasureError, ReportError,
};
pub use sim::{
    Deployment, HostDelivery, SimError, SimKernel, SimOptions, SimResult, Simulator, Stimulus,
    StimulusItem, StreamSpec,
};
pub use trace::{Endpoint, EventKind, SimTrace, TraceEvent};
