use std::sync::Arc;

use super::plan::{validate, ClusterPlan, KernelRole, StageRef};
use super::BuildError;
use crate::fabric::flits_for;
use crate::gmi::{
    BroadcastKernel, CollectiveOp, GatewayKernel, GatherKernel, ReduceKernel, ScatterKernel,
};
use crate::ibert::{
    i8_to_bytes, make_stage, read_encoder, read_model_config, Encoder, LinearSlot, NormSlot,
    QuantTensor, StageKind, Tiling,
};
use crate::runtime::{
    Deployment, Endpoint, KernelBehavior, SimKernel, SimOptions, SimResult, Simulator, Stimulus,
};
use crate::Cycle;

pub fn linear_slot(name: &str) -> Option<LinearSlot> {
    Some(match name {
        "q" => LinearSlot::Query,
        "k" => LinearSlot::Key,
        "v" => LinearSlot::Value,
        "out" => LinearSlot::AttnOut,
        "ffn1" => LinearSlot::Ffn1,
        "ffn2" => LinearSlot::Ffn2,
        _ => return None,
    })
}

pub fn norm_slot(name: &str) -> Option<NormSlot> {
    Some(match name {
        "ln1" => NormSlot::Ln1,
        "ln2" => NormSlot::Ln2,
        _ => return None,
    })
}

fn stage_kind(stage: &StageRef) -> Result<StageKind, BuildError> {
    let bad = |s: &str| BuildError::Plan(format!("unknown module slot `{s}`"));
    Ok(match stage {
        StageRef::Linear { slot } => StageKind::Linear(linear_slot(slot).ok_or_else(|| bad(slot))?),
        StageRef::Norm { slot } => StageKind::Norm(norm_slot(slot).ok_or_else(|| bad(slot))?),
        StageRef::Attention { head } => StageKind::Attention { head: *head },
        StageRef::Context { head } => StageKind::Context { head: *head },
    })
}

/// Load and compile the encoders a plan uses from its model filesystem.
pub fn load_encoders(plan: &ClusterPlan) -> Result<Vec<Arc<Encoder>>, BuildError> {
    let model = |e: crate::ibert::IbertError| BuildError::Model(e.to_string());
    let cfg = read_model_config(&plan.model_fs).map_err(model)?;
    if cfg != plan.config {
        return Err(BuildError::Model(format!(
            "{} does not match the plan's model config",
            plan.model_fs.display()
        )));
    }
    (0..plan.encoders)
        .map(|l| {
            let p = read_encoder(&plan.model_fs, &cfg, l).map_err(model)?;
            Ok(Arc::new(Encoder::compile(&cfg, &p).map_err(model)?))
        })
        .collect()
}

/// Instantiate every kernel of a valid plan.
pub fn deploy(plan: &ClusterPlan, encoders: &[Arc<Encoder>]) -> Result<Deployment, BuildError> {
    let violations = validate(plan);
    if !violations.is_empty() {
        return Err(BuildError::Invalid(violations));
    }
    if encoders.len() < plan.encoders {
        return Err(BuildError::Model(format!(
            "{} encoders loaded, plan needs {}",
            encoders.len(),
            plan.encoders
        )));
    }
    let mut kernels = Vec::new();
    for k in plan.kernels() {
        let fan_out = plan
            .streams
            .iter()
            .filter(|s| s.spec.from == Endpoint::Kernel(k.address))
            .count();
        let behavior: Box<dyn KernelBehavior> = match &k.role {
            KernelRole::Compute {
                encoder,
                stage,
                tiles,
                pes,
                num_pe,
            } => make_stage(
                stage_kind(stage)?,
                Arc::clone(&encoders[*encoder]),
                Tiling {
                    tiles: *tiles,
                    pes: *pes,
                },
                *num_pe,
            ),
            KernelRole::Gmi { spec } => match spec.op {
                CollectiveOp::Broadcast => Box::new(BroadcastKernel { members: fan_out }),
                CollectiveOp::Scatter => Box::new(ScatterKernel {
                    members: spec.group.len(),
                    chunking: spec.chunking,
                }),
                CollectiveOp::Gather => Box::new(GatherKernel::new(spec.group.len())),
                CollectiveOp::Reduce => Box::new(ReduceKernel::new(
                    spec.group.len(),
                    spec.reduce_fn,
                    spec.width,
                )),
            },
            KernelRole::Gateway { spec, ports } => {
                Box::new(GatewayKernel::new(spec.clone(), ports.clone()))
            }
        };
        kernels.push(SimKernel {
            address: k.address,
            kind: k.kind(),
            node: k.node,
            behavior,
        });
    }
    Ok(Deployment {
        kernels,
        streams: plan.streams.iter().map(|s| s.spec.clone()).collect(),
        routing: plan.routing.clone(),
        host_node: plan.host_node,
        network: plan.network.clone(),
    })
}

/// Cycles the host needs to push one hidden-width row onto the link.
pub fn default_interval(plan: &ClusterPlan) -> Cycle {
    flits_for(plan.config.hidden) as Cycle
}

#[derive(Debug)]
pub struct PlanRun {
    pub outputs: Vec<QuantTensor>,
    pub result: SimResult,
}

/// Stream `inputs` through a plan, one row every `interval` cycles, and
/// collect the output matrices.
pub fn run_plan(
    plan: &ClusterPlan,
    encoders: &[Arc<Encoder>],
    inputs: &[QuantTensor],
    interval: Cycle,
    options: SimOptions,
) -> Result<PlanRun, BuildError> {
    for x in inputs {
        if x.cols != plan.config.hidden {
            return Err(BuildError::Model(format!(
                "input has {} columns, model hidden size is {}",
                x.cols, plan.config.hidden
            )));
        }
        plan.config
            .check_len(x.rows)
            .map_err(|e| BuildError::Model(e.to_string()))?;
    }
    let matrices: Vec<Vec<Vec<u8>>> = inputs
        .iter()
        .map(|x| (0..x.rows).map(|r| i8_to_bytes(x.row(r))).collect())
        .collect();
    let sim = Simulator::new(deploy(plan, encoders)?).map_err(BuildError::Sim)?;
    let result = sim
        .run(Stimulus::matrices(&matrices, 0, interval), options)
        .map_err(BuildError::Sim)?;
    let scale = encoders[plan.encoders - 1].output_scale();
    let outputs = result
        .output_matrices(0)
        .into_iter()
        .map(|rows| {
            let rows: Vec<Vec<i8>> = rows
                .iter()
                .map(|r| r.iter().map(|&b| b as i8).collect())
                .collect();
            QuantTensor::from_rows(&rows, plan.config.hidden, scale)
                .map_err(|e| BuildError::Model(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(PlanRun { outputs, result })
}
