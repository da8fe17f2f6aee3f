use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PerfError;
use crate::runtime::LatencyComponents;

/// Node clock at which the measured cycle table converts to the published
/// microsecond figures.
pub const DEFAULT_CLOCK_HZ: f64 = 200e6;
/// Measured latency of one pass through a 100G switch.
pub const SWITCH_LATENCY_S: f64 = 1.1e-6;

/// Pipelined chain of `layers` identical encoders.
///
/// Encoder `l+1` starts as soon as encoder `l` emits its first row, so the
/// chain finishes `T` after the last encoder starts, and each start is `X`
/// plus one switch traversal after the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub layers: usize,
    /// Cycles until one encoder emits its last row.
    pub t: f64,
    /// Cycles until one encoder emits its first row.
    pub x: f64,
    /// Steady-state cycles between output rows.
    pub i: f64,
    /// Switch latency in seconds.
    pub d: f64,
    pub clock_hz: f64,
}

impl PipelineModel {
    pub fn new(
        layers: usize,
        x: f64,
        t: f64,
        i: f64,
        d: f64,
        clock_hz: f64,
    ) -> Result<Self, PerfError> {
        let m = Self {
            layers,
            t,
            x,
            i,
            d,
            clock_hz,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_components(c: &LatencyComponents, layers: usize) -> Result<Self, PerfError> {
        Self::new(
            layers,
            c.x as f64,
            c.t as f64,
            c.i as f64,
            c.switch_latency_s,
            c.clock_hz,
        )
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.layers == 0 {
            return Err(PerfError::Invalid("at least one encoder".into()));
        }
        if !(self.clock_hz > 0.0) {
            return Err(PerfError::Invalid(format!("clock {} Hz", self.clock_hz)));
        }
        if !(self.x >= 0.0 && self.x <= self.t) || self.i < 0.0 || self.d < 0.0 {
            return Err(PerfError::Invalid(format!(
                "need 0 <= X <= T, I >= 0, d >= 0 (X={}, T={})",
                self.x, self.t
            )));
        }
        Ok(())
    }

    pub fn with_d(self, d: f64) -> Self {
        Self { d, ..self }
    }

    /// Chain latency in cycles: `T + (L−1)(X + d·f)`.
    pub fn cycles(&self) -> f64 {
        self.t + (self.layers as f64 - 1.0) * (self.x + self.d * self.clock_hz)
    }
}

/// End-to-end latency in seconds: `T/f + (L−1)(X/f + d)`.
pub fn end_to_end_latency(m: &PipelineModel) -> f64 {
    m.t / m.clock_hz + (m.layers as f64 - 1.0) * (m.x / m.clock_hz + m.d)
}

/// The same chain with the switch latency ignored.
pub fn end_to_end_latency_without_switch(m: &PipelineModel) -> f64 {
    end_to_end_latency(&m.with_d(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub inferences_per_s: f64,
    /// Set when a single-row sequence has no output interval and the figure
    /// is the latency bound `f/T` instead.
    pub latency_bound: bool,
}

/// Steady-state inferences per second for length-`m` sequences: one output
/// row every `I` cycles, `m` rows per inference.
pub fn throughput(model: &PipelineModel, m: usize) -> Throughput {
    if model.i > 0.0 && m > 0 {
        Throughput {
            inferences_per_s: model.clock_hz / (m as f64 * model.i),
            latency_bound: false,
        }
    } else {
        Throughput {
            inferences_per_s: model.clock_hz / model.t,
            latency_bound: true,
        }
    }
}

/// Worst-case addresses one node stores: `kernels_per_cluster + N − 1` with
/// gateways, `N · kernels_per_cluster` with a flat address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingStateBound {
    pub clusters: usize,
    pub gateway: usize,
    pub full_mesh: usize,
}

pub fn routing_state_bound(
    clusters: usize,
    kernels_per_cluster: usize,
) -> Result<RoutingStateBound, PerfError> {
    if clusters == 0 || clusters > 256 || kernels_per_cluster == 0 || kernels_per_cluster > 256 {
        return Err(PerfError::Invalid(format!(
            "{clusters} clusters of {kernels_per_cluster} kernels"
        )));
    }
    Ok(RoutingStateBound {
        clusters,
        gateway: kernels_per_cluster + clusters - 1,
        full_mesh: clusters * kernels_per_cluster,
    })
}

/// One row of measured encoder cycle components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub seq: usize,
    pub x: f64,
    pub t: f64,
    pub i: f64,
}

/// Measured cycle components by sequence length, ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTable {
    pub rows: Vec<CycleRow>,
}

impl CycleTable {
    /// Parse `seq,X,T,I` CSV; a header line and `#` comments are skipped.
    pub fn parse_csv(text: &str) -> Result<Self, PerfError> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("seq") {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || PerfError::Table(format!("line {}: `{line}`", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(CycleRow {
                seq: f[0].parse().map_err(|_| bad())?,
                x: num(f[1])?,
                t: num(f[2])?,
                i: num(f[3])?,
            });
        }
        if rows.is_empty() {
            return Err(PerfError::Table("no rows".into()));
        }
        if rows.windows(2).any(|w| w[0].seq >= w[1].seq) {
            return Err(PerfError::Table(
                "sequence lengths must be strictly ascending".into(),
            ));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, PerfError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PerfError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seq,X,T,I\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.seq, r.x, r.t, r.i);
        }
        s
    }

    /// Components at `seq`, linear between the bracketing rows.
    pub fn interpolate(&self, seq: usize) -> Result<CycleRow, PerfError> {
        if let Some(r) = self.rows.iter().find(|r| r.seq == seq) {
            return Ok(*r);
        }
        let hi = self
            .rows
            .iter()
            .position(|r| r.seq > seq)
            .filter(|&p| p > 0)
            .ok_or_else(|| PerfError::Table(format!("sequence length {seq} outside the table")))?;
        let (a, b) = (self.rows[hi - 1], self.rows[hi]);
        let w = (seq - a.seq) as f64 / (b.seq - a.seq) as f64;
        let lerp = |p: f64, q: f64| p + (q - p) * w;
        Ok(CycleRow {
            seq,
            x: lerp(a.x, b.x),
            t: lerp(a.t, b.t),
            i: lerp(a.i, b.i),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub seq: usize,
    pub x: f64,
    pub t: f64,
    pub i: f64,
    /// Latency with the switch term included.
    pub latency_s: f64,
    /// Latency with `d = 0`.
    pub latency_no_switch_s: f64,
    pub throughput: Throughput,
}

/// Apply the pipeline model to every row of a cycle table.
pub fn latency_table(
    table: &CycleTable,
    layers: usize,
    d: f64,
    clock_hz: f64,
    extra_seqs: &[usize],
) -> Result<Vec<LatencyRow>, PerfError> {
    let mut seqs: Vec<usize> = table
        .rows
        .iter()
        .map(|r| r.seq)
        .chain(extra_seqs.iter().copied())
        .collect();
    seqs.sort_unstable();
    seqs.dedup();
    seqs.into_iter()
        .map(|seq| {
            let r = table.interpolate(seq)?;
            let m = PipelineModel::new(layers, r.x, r.t, r.i, d, clock_hz)?;
            Ok(LatencyRow {
                seq,
                x: r.x,
                t: r.t,
                i: r.i,
                latency_s: end_to_end_latency(&m),
                latency_no_switch_s: end_to_end_latency_without_switch(&m),
                throughput: throughput(&m, seq),
            })
        })
        .collect()
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("seq,X,T,I,latency_ms,latency_no_switch_ms,throughput_inf_per_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.2}",
            r.seq,
            r.x,
            r.t,
            r.i,
            r.latency_s * 1e3,
            r.latency_no_switch_s * 1e3,
            r.throughput.inferences_per_s
        );
    }
    s
}

pub fn latency_text(rows: &[LatencyRow], layers: usize, d: f64, clock_hz: f64) -> String {
    let mut s = format!(
        "L = {layers}, f = {} MHz, d = {} us\n",
        clock_hz / 1e6,
        d * 1e6
    );
    let _ = writeln!(
        s,
        "{:>5} {:>10} {:>10} {:>6} {:>12} {:>12} {:>14}",
        "seq", "X", "T", "I", "ms", "ms (d=0)", "inf/s"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:>10.1} {:>10.1} {:>6.0} {:>12.4} {:>12.4} {:>14.2}{}",
            r.seq,
            r.x,
            r.t,
            r.i,
            r.latency_s * 1e3,
            r.latency_no_switch_s * 1e3,
            r.throughput.inferences_per_s,
            if r.throughput.latency_bound {
                " (latency bound)"
            } else {
                ""
            }
        );
    }
    s
}
