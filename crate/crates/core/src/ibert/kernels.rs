//! Encoder stages as streaming kernels. Every message is one matrix row;
//! the final row of a matrix carries `end_of_matrix`.

use std::collections::VecDeque;
use std::sync::Arc;

use super::config::min_padding;
use super::encoder::{Encoder, LinearSlot, NormSlot};
use super::matmul::Tiling;
use super::tensor::{bytes_to_i8, i8_to_bytes, QuantTensor};
use crate::runtime::{Incoming, KernelBehavior, Notice, Outgoing, Reaction, Work};
use crate::Cycle;

/// Which part of the encoder a kernel computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    Linear(LinearSlot),
    /// Dot-product and softmax of one head; port 0 queries, port 1 keys.
    Attention {
        head: usize,
    },
    /// Softmax matmul and quant of one head; port 0 probabilities, port 1
    /// values.
    Context {
        head: usize,
    },
    /// Residual add and LayerNorm; port 0 main path, port 1 skip path.
    Norm(NormSlot),
}

impl StageKind {
    pub fn input_ports(&self) -> usize {
        match self {
            StageKind::Linear(_) => 1,
            _ => 2,
        }
    }
}

/// Declared cycle costs. Linear: each tile produces one output column per
/// `⌈in/pes⌉` cycles. Attention: each PE spends `head_dim` cycles per key
/// column it owns, softmax one cycle per element, and padding one cycle per
/// padded key column (once per matrix). Context: one iteration per sequence
/// position. Norm: two passes over the row in 16-wide beats.
pub mod cost {
    use super::*;

    pub fn linear_row(in_dim: usize, out_dim: usize, t: Tiling) -> Cycle {
        (in_dim.div_ceil(t.pes) * out_dim.div_ceil(t.tiles)) as Cycle
    }

    pub fn attention_row(m: usize, head_dim: usize, num_pe: usize) -> Cycle {
        (m.div_ceil(num_pe) * head_dim + m) as Cycle
    }

    pub fn attention_padding(m: usize, num_pe: usize) -> Cycle {
        (min_padding(m, num_pe) - m) as Cycle
    }

    pub fn context_row(m: usize) -> Cycle {
        m as Cycle
    }

    pub fn norm_row(width: usize) -> Cycle {
        2 * width.div_ceil(16) as Cycle
    }
}

fn fault(msg: impl std::fmt::Display) -> Reaction {
    Reaction::none().with_notice(Notice::Fault(msg.to_string()))
}

pub struct LinearStage {
    enc: Arc<Encoder>,
    slot: LinearSlot,
    tiling: Tiling,
}

impl LinearStage {
    pub fn new(enc: Arc<Encoder>, slot: LinearSlot, tiling: Tiling) -> Self {
        Self { enc, slot, tiling }
    }
}

impl KernelBehavior for LinearStage {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let w = &self.enc.linear(self.slot).weights;
        let cycles = cost::linear_row(w.in_dim, w.out_dim, self.tiling);
        match self
            .enc
            .linear_row(self.slot, &bytes_to_i8(&msg.payload), self.tiling)
        {
            Ok(row) => Reaction::single(Work::new(
                cycles,
                vec![Outgoing::new(0, i8_to_bytes(&row), msg.end_of_matrix)],
            )),
            Err(e) => fault(e),
        }
    }
}

/// Rows of a second operand collected until the matrix is complete, with
/// first-operand rows queued until their matrix is available.
#[derive(Default)]
struct PairedMatrices {
    rows: VecDeque<(Vec<u8>, bool)>,
    building: Vec<Vec<i8>>,
    ready: VecDeque<Vec<Vec<i8>>>,
}

impl PairedMatrices {
    fn push(&mut self, msg: Incoming) {
        if msg.port == 0 {
            self.rows.push_back((msg.payload, msg.end_of_matrix));
        } else {
            self.building.push(bytes_to_i8(&msg.payload));
            if msg.end_of_matrix {
                self.ready.push_back(std::mem::take(&mut self.building));
            }
        }
    }

    /// Next first-operand row with its matrix; `first` marks the first row
    /// served against a newly completed matrix.
    fn next(&mut self) -> Option<(Vec<i8>, bool, &[Vec<i8>])> {
        if self.ready.is_empty() {
            return None;
        }
        let (row, end) = self.rows.pop_front()?;
        Some((bytes_to_i8(&row), end, self.ready.front().expect("checked")))
    }

    fn finish_matrix(&mut self) {
        self.ready.pop_front();
    }
}

pub struct AttentionStage {
    enc: Arc<Encoder>,
    num_pe: usize,
    pending: PairedMatrices,
    fresh: bool,
}

impl AttentionStage {
    pub fn new(enc: Arc<Encoder>, num_pe: usize) -> Self {
        Self {
            enc,
            num_pe,
            pending: PairedMatrices::default(),
            fresh: true,
        }
    }
}

impl KernelBehavior for AttentionStage {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        self.pending.push(msg);
        let mut work = Vec::new();
        let d = self.enc.config.head_dim();
        while let Some((q, end, keys)) = self.pending.next() {
            let m = keys.len();
            let keys = match QuantTensor::from_rows(keys, d, 1.0) {
                Ok(k) => k,
                Err(e) => return fault(e),
            };
            let mut cycles = cost::attention_row(m, d, self.num_pe);
            if std::mem::take(&mut self.fresh) {
                cycles += cost::attention_padding(m, self.num_pe);
            }
            match self.enc.attention_row(&q, &keys, self.num_pe) {
                Ok(p) => work.push(Work::new(
                    cycles,
                    vec![Outgoing::new(0, i8_to_bytes(&p), end)],
                )),
                Err(e) => return fault(e),
            }
            if end {
                self.pending.finish_matrix();
                self.fresh = true;
            }
        }
        Reaction::work(work)
    }
}

pub struct ContextStage {
    enc: Arc<Encoder>,
    num_pe: usize,
    pending: PairedMatrices,
}

impl ContextStage {
    pub fn new(enc: Arc<Encoder>, num_pe: usize) -> Self {
        Self {
            enc,
            num_pe,
            pending: PairedMatrices::default(),
        }
    }
}

impl KernelBehavior for ContextStage {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        self.pending.push(msg);
        let mut work = Vec::new();
        let d = self.enc.config.head_dim();
        while let Some((p, end, values)) = self.pending.next() {
            let m = values.len();
            let values = match QuantTensor::from_rows(values, d, 1.0) {
                Ok(v) => v,
                Err(e) => return fault(e),
            };
            match self.enc.context_row(&p, &values, self.num_pe) {
                Ok(c) => work.push(Work::new(
                    cost::context_row(m),
                    vec![Outgoing::new(0, i8_to_bytes(&c), end)],
                )),
                Err(e) => return fault(e),
            }
            if end {
                self.pending.finish_matrix();
            }
        }
        Reaction::work(work)
    }
}

/// Pairs rows from its two inputs in arrival order.
pub struct NormStage {
    enc: Arc<Encoder>,
    slot: NormSlot,
    main: VecDeque<(Vec<u8>, bool)>,
    skip: VecDeque<Vec<u8>>,
}

impl NormStage {
    pub fn new(enc: Arc<Encoder>, slot: NormSlot) -> Self {
        Self {
            enc,
            slot,
            main: VecDeque::new(),
            skip: VecDeque::new(),
        }
    }
}

impl KernelBehavior for NormStage {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        if msg.port == 0 {
            self.main.push_back((msg.payload, msg.end_of_matrix));
        } else {
            self.skip.push_back(msg.payload);
        }
        let mut work = Vec::new();
        while !self.main.is_empty() && !self.skip.is_empty() {
            let (main, end) = self.main.pop_front().expect("checked");
            let skip = self.skip.pop_front().expect("checked");
            match self
                .enc
                .norm_row(self.slot, &bytes_to_i8(&main), &bytes_to_i8(&skip))
            {
                Ok(row) => {
                    let cycles = cost::norm_row(row.len());
                    work.push(Work::new(
                        cycles,
                        vec![Outgoing::new(0, i8_to_bytes(&row), end)],
                    ));
                }
                Err(e) => return fault(e),
            }
        }
        Reaction::work(work)
    }
}

/// Build the kernel for one stage.
pub fn make_stage(
    kind: StageKind,
    enc: Arc<Encoder>,
    tiling: Tiling,
    num_pe: usize,
) -> Box<dyn KernelBehavior> {
    match kind {
        StageKind::Linear(slot) => Box::new(LinearStage::new(enc, slot, tiling)),
        StageKind::Attention { .. } => Box::new(AttentionStage::new(enc, num_pe)),
        StageKind::Context { .. } => Box::new(ContextStage::new(enc, num_pe)),
        StageKind::Norm(slot) => Box::new(NormStage::new(enc, slot)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibert::{generate, EncoderConfig};

    fn enc() -> Arc<Encoder> {
        let m = generate(&EncoderConfig::tiny(), 3).unwrap();
        Arc::new(Encoder::compile(&m.config, &m.encoders[0]).unwrap())
    }

    fn msg(port: usize, row: Vec<i8>, end: bool) -> Incoming {
        Incoming {
            port,
            payload: i8_to_bytes(&row),
            end_of_matrix: end,
        }
    }

    #[test]
    fn context_declares_one_iteration_per_position() {
        let mut k = ContextStage::new(enc(), 2);
        let m = 8;
        for r in 0..m {
            assert!(k
                .on_message(msg(1, vec![r as i8; 4], r == m - 1))
                .work
                .is_empty());
        }
        let r = k.on_message(msg(0, vec![16; m], false));
        assert_eq!(r.work[0].cycles, 8);
        assert_eq!(r.work[0].outputs[0].payload.len(), 4);
    }

    #[test]
    fn attention_waits_for_all_keys() {
        let mut k = AttentionStage::new(enc(), 3);
        assert!(k
            .on_message(msg(0, vec![1, 2, 3, 4], false))
            .work
            .is_empty());
        assert!(k
            .on_message(msg(1, vec![1, 1, 1, 1], false))
            .work
            .is_empty());
        let r = k.on_message(msg(1, vec![2, 2, 2, 2], true));
        assert_eq!(r.work.len(), 1);
        // ⌈2/3⌉·4 dot-product cycles + 2 softmax cycles + 1 padded column.
        assert_eq!(r.work[0].cycles, 4 + 2 + 1);
        assert_eq!(r.work[0].outputs[0].payload.len(), 2);
        let r = k.on_message(msg(0, vec![0; 4], true));
        assert_eq!(r.work[0].cycles, 6);
        assert!(r.work[0].outputs[0].end_of_matrix);
    }

    #[test]
    fn norm_pairs_rows() {
        let mut k = NormStage::new(enc(), NormSlot::Ln1);
        assert!(k.on_message(msg(1, vec![1; 8], false)).work.is_empty());
        let r = k.on_message(msg(0, vec![3; 8], true));
        assert_eq!(r.work[0].outputs[0].payload.len(), 8);
        assert!(r.work[0].outputs[0].end_of_matrix);
        let bad = k.on_message(msg(0, vec![3; 5], false));
        assert!(bad.work.is_empty());
        let bad = k.on_message(msg(1, vec![3; 8], false));
        assert!(matches!(bad.notices[0], Notice::Fault(_)));
    }
}
