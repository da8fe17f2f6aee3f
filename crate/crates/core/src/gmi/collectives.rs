use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::KernelAddress;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    Broadcast,
    Reduce,
    Scatter,
    Gather,
}

/// Where a collective kernel sits relative to the traffic it handles.
/// Receiver-side placement sends once over the network and fans out over the
/// node's internal bandwidth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    SenderSide,
    #[default]
    ReceiverSide,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    #[default]
    Sum,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemWidth {
    I8,
    #[default]
    I32,
}

impl ElemWidth {
    pub fn bytes(&self) -> usize {
        match self {
            ElemWidth::I8 => 1,
            ElemWidth::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum GmiError {
    #[error("collective group is empty")]
    EmptyGroup,
    #[error("kernel {0} appears twice in the group")]
    DuplicateMember(KernelAddress),
    #[error("root {0} is not a group member")]
    RootNotInGroup(KernelAddress),
    #[error("{members} chunks of {chunk} bytes cannot cover a {len}-byte message")]
    ChunkTooSmall {
        len: usize,
        chunk: usize,
        members: usize,
    },
    #[error("gather incomplete, no segment from {absent:?}")]
    IncompleteGather { absent: Vec<KernelAddress> },
    #[error("segment from {0}, which is not a group member")]
    Stranger(KernelAddress),
    #[error("reduce segments differ in length: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("segment length {len} is not a multiple of the {width}-byte element")]
    Misaligned { len: usize, width: usize },
    #[error("reduce overflowed at element {0}")]
    Overflow(usize),
}

/// Configuration of one collective kernel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GmiKernelSpec {
    pub op: CollectiveOp,
    pub group: Vec<KernelAddress>,
    pub root: KernelAddress,
    #[serde(default)]
    pub placement: Placement,
    /// Segment size for scatter; `None` splits evenly.
    #[serde(default)]
    pub chunking: Option<usize>,
    #[serde(default)]
    pub reduce_fn: ReduceOp,
    #[serde(default)]
    pub width: ElemWidth,
}

impl GmiKernelSpec {
    pub fn new(op: CollectiveOp, group: Vec<KernelAddress>, root: KernelAddress) -> Self {
        Self {
            op,
            group,
            root,
            placement: Placement::default(),
            chunking: None,
            reduce_fn: ReduceOp::default(),
            width: ElemWidth::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GmiError> {
        if self.group.is_empty() {
            return Err(GmiError::EmptyGroup);
        }
        let mut seen = BTreeSet::new();
        for m in &self.group {
            if !seen.insert(*m) {
                return Err(GmiError::DuplicateMember(*m));
            }
        }
        if matches!(self.op, CollectiveOp::Reduce | CollectiveOp::Gather)
            && !seen.contains(&self.root)
        {
            return Err(GmiError::RootNotInGroup(self.root));
        }
        Ok(())
    }

    fn member_index(&self, k: KernelAddress) -> Result<usize, GmiError> {
        self.group
            .iter()
            .position(|m| *m == k)
            .ok_or(GmiError::Stranger(k))
    }
}

/// One byte-identical copy per member. An empty group yields no deliveries.
pub fn broadcast(msg: &[u8], spec: &GmiKernelSpec) -> Vec<(KernelAddress, Vec<u8>)> {
    spec.group.iter().map(|m| (*m, msg.to_vec())).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scattered {
    /// One entry per member in group order; members past the end of the
    /// message get an empty segment.
    pub segments: Vec<(KernelAddress, Vec<u8>)>,
    pub underfill: usize,
}

/// Split `msg` into consecutive chunks, chunk `i` for member `i`.
pub fn scatter(msg: &[u8], spec: &GmiKernelSpec) -> Result<Scattered, GmiError> {
    let n = spec.group.len();
    if n == 0 {
        return Err(GmiError::EmptyGroup);
    }
    let chunk = spec
        .chunking
        .unwrap_or_else(|| msg.len().div_ceil(n))
        .max(1);
    if chunk.saturating_mul(n) < msg.len() {
        return Err(GmiError::ChunkTooSmall {
            len: msg.len(),
            chunk,
            members: n,
        });
    }
    let mut underfill = 0;
    let segments = spec
        .group
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let start = (i * chunk).min(msg.len());
            let end = ((i + 1) * chunk).min(msg.len());
            if start == end && !msg.is_empty() || msg.is_empty() && i > 0 {
                underfill += 1;
            }
            (*m, msg[start..end].to_vec())
        })
        .collect();
    Ok(Scattered {
        segments,
        underfill,
    })
}

/// Concatenate one segment per member in group order, whatever order they
/// arrived in.
pub fn gather(
    segments: Vec<(KernelAddress, Vec<u8>)>,
    spec: &GmiKernelSpec,
) -> Result<Vec<u8>, GmiError> {
    let mut slots: Vec<Option<Vec<u8>>> = vec![None; spec.group.len()];
    for (from, data) in segments {
        let i = spec.member_index(from)?;
        slots[i] = Some(data);
    }
    let absent: Vec<KernelAddress> = spec
        .group
        .iter()
        .zip(&slots)
        .filter(|(_, s)| s.is_none())
        .map(|(m, _)| *m)
        .collect();
    if !absent.is_empty() {
        return Err(GmiError::IncompleteGather { absent });
    }
    Ok(slots.into_iter().flatten().flatten().collect())
}

/// Elementwise fold of equal-length segments, evaluated in group order.
pub fn reduce(
    segments: Vec<(KernelAddress, Vec<u8>)>,
    spec: &GmiKernelSpec,
) -> Result<Vec<u8>, GmiError> {
    let mut slots: Vec<Option<Vec<u8>>> = vec![None; spec.group.len()];
    for (from, data) in segments {
        slots[spec.member_index(from)?] = Some(data);
    }
    let absent: Vec<KernelAddress> = spec
        .group
        .iter()
        .zip(&slots)
        .filter(|(_, s)| s.is_none())
        .map(|(m, _)| *m)
        .collect();
    if !absent.is_empty() {
        return Err(GmiError::IncompleteGather { absent });
    }
    let slots: Vec<Vec<u8>> = slots.into_iter().flatten().collect();
    reduce_ordered(&slots, spec.reduce_fn, spec.width)
}

pub(crate) fn reduce_ordered(
    segments: &[Vec<u8>],
    op: ReduceOp,
    width: ElemWidth,
) -> Result<Vec<u8>, GmiError> {
    let lens: Vec<usize> = segments.iter().map(Vec::len).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(GmiError::LengthMismatch(lens));
    }
    let Some(first) = segments.first() else {
        return Err(GmiError::EmptyGroup);
    };
    let w = width.bytes();
    if first.len() % w != 0 {
        return Err(GmiError::Misaligned {
            len: first.len(),
            width: w,
        });
    }
    let decode = |seg: &[u8], i: usize| -> i64 {
        match width {
            ElemWidth::I8 => i64::from(seg[i] as i8),
            ElemWidth::I32 => i64::from(i32::from_le_bytes(
                seg[i * 4..i * 4 + 4].try_into().expect("4 bytes"),
            )),
        }
    };
    let (lo, hi) = match width {
        ElemWidth::I8 => (i64::from(i8::MIN), i64::from(i8::MAX)),
        ElemWidth::I32 => (i64::from(i32::MIN), i64::from(i32::MAX)),
    };
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() / w {
        let mut acc = decode(first, i);
        for seg in &segments[1..] {
            let v = decode(seg, i);
            acc = match op {
                ReduceOp::Sum => acc + v,
                ReduceOp::Min => acc.min(v),
                ReduceOp::Max => acc.max(v),
            };
            if acc < lo || acc > hi {
                return Err(GmiError::Overflow(i));
            }
        }
        match width {
            ElemWidth::I8 => out.push(acc as i8 as u8),
            ElemWidth::I32 => out.extend_from_slice(&(acc as i32).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Every member ends up holding the group-ordered concatenation of all
/// members' messages: a gather at the root followed by a broadcast.
pub fn allgather(
    msgs: Vec<(KernelAddress, Vec<u8>)>,
    spec: &GmiKernelSpec,
) -> Result<Vec<(KernelAddress, Vec<u8>)>, GmiError> {
    let full = gather(msgs, spec)?;
    Ok(broadcast(&full, spec))
}
