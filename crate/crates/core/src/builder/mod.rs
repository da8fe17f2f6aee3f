//! The cluster builder: description files and a model filesystem in, a
//! validated multi-cluster deployment plan out.

mod build;
mod deploy;
mod desc;
mod plan;
mod verify;

use thiserror::Error;

pub use build::{build, HOST_NODE};
pub use deploy::{
    default_interval, deploy, linear_slot, load_encoders, norm_slot, run_plan, PlanRun,
};
pub use desc::{
    read_json, ClusterDescription, HwConfig, LayerDescription, LayerSpec, ModuleKind,
    NetworkSettings, PlacementPolicy, TopologyKind, MAX_CLUSTERS, MAX_KERNELS,
};
pub use plan::{
    emit_skeleton, validate, ClusterPlan, KernelIdAssignment, KernelRole, PlanCluster, PlanKernel,
    PlanStream, StageRef, Violation, PLAN_VERSION,
};
pub use verify::{verify_plan, KernelCheck, VerifyReport};

use crate::runtime::SimError;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("description: {0}")]
    Description(String),
    #[error("layer graph has a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("cluster {cluster} needs {count} kernels, the limit is {limit}")]
    TooManyKernels {
        cluster: usize,
        count: usize,
        limit: usize,
    },
    #[error("{count} clusters requested, the limit is {limit}")]
    TooManyClusters { count: usize, limit: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("model: {0}")]
    Model(String),
    #[error("plan: {0}")]
    Plan(String),
    #[error("invalid plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("simulation: {0}")]
    Sim(SimError),
    #[error("i/o: {0}")]
    Io(String),
}
