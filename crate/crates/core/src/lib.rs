//! Simulator and toolchain for graphs of streaming kernels deployed across
//! clusters of network-attached FPGAs.
//!
//! The crate is split along the deployment flow:
//!
//! * [`fabric`]: packet framing, hierarchical addressing, routing tables and
//!   the simulated switch network.
//! * [`runtime`]: the deterministic discrete-event executor and the X/T/I
//!   latency instrumentation.
//! * [`gmi`]: collective-communication kernels and the cluster gateway.
//! * [`ibert`]: integer-only BERT encoder kernels and the model file system.
//! * [`builder`]: description parsing, kernel ID assignment, GMI insertion and
//!   deployment-plan validation.
//! * [`perfmodel`]: the pipelined latency model, throughput model and the
//!   Versal AIE estimate.

pub mod builder;
pub mod fabric;
pub mod gmi;
pub mod ibert;
pub mod perfmodel;
pub mod runtime;

/// Node clock cycle.
pub type Cycle = u64;
