//! Analytical latency and throughput models: the pipelined encoder chain,
//! the measured cycle table, and the AI Engine estimate.

mod pipeline;
mod versal;

use thiserror::Error;

pub use pipeline::{
    end_to_end_latency, end_to_end_latency_without_switch, latency_csv, latency_table,
    latency_text, routing_state_bound, throughput, CycleRow, CycleTable, LatencyRow, PipelineModel,
    RoutingStateBound, Throughput, DEFAULT_CLOCK_HZ, SWITCH_LATENCY_S,
};
pub use versal::{
    ibert_allocation, micros_from_seconds, to_f64, versal_csv, versal_estimate, versal_text,
    AieKernel, AieKernelEstimate, Composition, Micros, VersalEstimate, VersalParams,
    ENCODER_MATMULS,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerfError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("cycle table: {0}")]
    Table(String),
    #[error("allocation: {0}")]
    Allocation(String),
    #[error("device: {needed} AI Engines needed, {available} available")]
    Device { needed: u64, available: u64 },
    #[error("i/o: {0}")]
    Io(String),
}
