//! Collective communication for kernel graphs: Broadcast, Scatter, Gather and
//! Reduce, available both as pure functions over byte messages and as
//! streaming kernels, plus the cluster gateway that terminates all
//! inter-cluster traffic.

mod collectives;
mod gateway;
mod kernels;

pub use collectives::{
    allgather, broadcast, gather, reduce, scatter, CollectiveOp, ElemWidth, GmiError,
    GmiKernelSpec, Placement, ReduceOp, Scattered,
};
pub use gateway::{gateway_dispatch, Dispatch, GatewayKernel, GatewaySpec, VirtualKernelSpec};
pub use kernels::{allgather_stage, BroadcastKernel, GatherKernel, ReduceKernel, ScatterKernel};
