//! AI Engine latency estimate for an encoder mapped onto Versal devices.
//!
//! All arithmetic is on integers and exact rationals; times are in
//! microseconds.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::PerfError;
use crate::ibert::EncoderConfig;

pub type Micros = Ratio<i64>;

/// One matrix-multiply kernel spread over `aies` engines: `instances`
/// independent `m×k · k×n` products.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AieKernel {
    pub name: String,
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub instances: u64,
    pub aies: u64,
}

impl AieKernel {
    pub fn multiplies(&self) -> u64 {
        self.instances * self.m * self.k * self.n
    }

    /// Stationary operand bytes (INT8) held by the kernel.
    pub fn weight_bytes(&self) -> u64 {
        self.instances * self.k * self.n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersalParams {
    pub aie_clock_hz: u64,
    /// INT8 multiplies per engine per cycle: one 512-bit weight fetch.
    pub multiplies_per_cycle: u64,
    pub aie_memory_bytes: u64,
    pub device_aies: u64,
    /// Quant, GELU, softmax and LayerNorm time on the fabric side.
    pub nonlinear_overhead_us: Micros,
    /// First-output latency as a fraction of completion latency.
    pub x_over_t: Ratio<i64>,
    pub switch_latency_us: Micros,
    pub layers: i64,
    /// Points where a kernel needs a whole matrix before it can start (the
    /// key matrix in front of the attention scores). The matmul critical
    /// path is the slowest kernel once per barrier-separated segment.
    pub full_matrix_barriers: u64,
    /// Round kernel latencies to whole microseconds and X to tenths before
    /// composing them, as the published figures do.
    pub round_intermediates: bool,
}

impl Default for VersalParams {
    fn default() -> Self {
        Self {
            aie_clock_hz: 1_000_000_000,
            multiplies_per_cycle: 64,
            aie_memory_bytes: 32 * 1024,
            device_aies: 400,
            nonlinear_overhead_us: Ratio::new(261, 10),
            x_over_t: Ratio::new(53, 100),
            switch_latency_us: Ratio::new(11, 10),
            layers: 12,
            full_matrix_barriers: 1,
            round_intermediates: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AieKernelEstimate {
    pub name: String,
    pub aies: u64,
    pub multiplies_per_aie: u64,
    pub weight_bytes_per_aie: u64,
    pub cycles: u64,
    pub latency_us: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub matmul_path_us: Micros,
    pub encoder_us: Micros,
    pub x_us: Micros,
    pub model_us: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersalEstimate {
    pub kernels: Vec<AieKernelEstimate>,
    pub total_aies: u64,
    /// Composition with the configured rounding.
    pub reported: Composition,
    /// Composition without intermediate rounding.
    pub exact: Composition,
}

/// Kernels every encoder allocation must cover.
pub const ENCODER_MATMULS: [&str; 8] = ["q", "k", "v", "scores", "context", "out", "ffn1", "ffn2"];

/// Weight matrices cut into `k × 32` column strips, one per engine; per-head
/// products get one engine each.
pub fn ibert_allocation(cfg: &EncoderConfig, m: u64) -> Vec<AieKernel> {
    let h = cfg.hidden as u64;
    let f = cfg.ffn as u64;
    let a = cfg.heads as u64;
    let d = cfg.head_dim() as u64;
    let strip = |k: u64, n: u64| (k * n).div_ceil(h * 32);
    let linear = |name: &str, k: u64, n: u64| AieKernel {
        name: name.into(),
        m,
        k,
        n,
        instances: 1,
        aies: strip(k, n),
    };
    vec![
        linear("q", h, h),
        linear("k", h, h),
        linear("v", h, h),
        AieKernel {
            name: "scores".into(),
            m,
            k: d,
            n: m,
            instances: a,
            aies: a,
        },
        AieKernel {
            name: "context".into(),
            m,
            k: m,
            n: d,
            instances: a,
            aies: a,
        },
        linear("out", h, h),
        linear("ffn1", h, f),
        linear("ffn2", f, h),
    ]
}

/// Seconds as exact microseconds, kept to tenths of a nanosecond.
pub fn micros_from_seconds(s: f64) -> Micros {
    Ratio::new((s * 1e10).round() as i64, 10_000)
}

fn micros(cycles: u64, clock_hz: u64) -> Micros {
    Ratio::new(cycles as i64 * 1_000_000, clock_hz as i64)
}

fn round_to(x: Micros, step: Micros) -> Micros {
    (x / step).round() * step
}

pub fn versal_estimate(
    kernels: &[AieKernel],
    p: &VersalParams,
) -> Result<VersalEstimate, PerfError> {
    let names: BTreeSet<&str> = kernels.iter().map(|k| k.name.as_str()).collect();
    if let Some(missing) = ENCODER_MATMULS.iter().find(|n| !names.contains(*n)) {
        return Err(PerfError::Allocation(format!(
            "no engines allocated to `{missing}`"
        )));
    }
    let mut out = Vec::new();
    for k in kernels {
        if k.aies == 0 {
            return Err(PerfError::Allocation(format!(
                "`{}` has no engines",
                k.name
            )));
        }
        let per_aie_bytes = k.weight_bytes().div_ceil(k.aies);
        if per_aie_bytes > p.aie_memory_bytes {
            return Err(PerfError::Allocation(format!(
                "`{}` needs {per_aie_bytes} weight bytes per engine, {} available; at least {} engines required",
                k.name,
                p.aie_memory_bytes,
                k.weight_bytes().div_ceil(p.aie_memory_bytes)
            )));
        }
        let mults = k.multiplies().div_ceil(k.aies);
        let cycles = mults.div_ceil(p.multiplies_per_cycle);
        out.push(AieKernelEstimate {
            name: k.name.clone(),
            aies: k.aies,
            multiplies_per_aie: mults,
            weight_bytes_per_aie: per_aie_bytes,
            cycles,
            latency_us: micros(cycles, p.aie_clock_hz),
        });
    }
    let total_aies: u64 = out.iter().map(|k| k.aies).sum();
    if total_aies > p.device_aies {
        return Err(PerfError::Device {
            needed: total_aies,
            available: p.device_aies,
        });
    }
    let slowest = out
        .iter()
        .map(|k| k.latency_us)
        .max()
        .expect("allocation is not empty");
    let segments = Ratio::from_integer(p.full_matrix_barriers as i64 + 1);
    let compose = |kernel: Micros, round: bool| {
        let matmul_path_us = segments * kernel;
        let encoder_us = matmul_path_us + p.nonlinear_overhead_us;
        let x = p.x_over_t * encoder_us;
        let x_us = if round {
            round_to(x, Ratio::new(1, 10))
        } else {
            x
        };
        let model_us =
            encoder_us + Ratio::from_integer(p.layers - 1) * (x_us + p.switch_latency_us);
        Composition {
            matmul_path_us,
            encoder_us,
            x_us,
            model_us,
        }
    };
    let reported = if p.round_intermediates {
        compose(slowest.round(), true)
    } else {
        compose(slowest, false)
    };
    Ok(VersalEstimate {
        kernels: out,
        total_aies,
        reported,
        exact: compose(slowest, false),
    })
}

pub fn to_f64(r: Micros) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn versal_text(e: &VersalEstimate) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>5} {:>14} {:>12} {:>8} {:>12}",
        "kernel", "AIEs", "mults/AIE", "bytes/AIE", "cycles", "us"
    );
    for k in &e.kernels {
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>14} {:>12} {:>8} {:>12.3}",
            k.name,
            k.aies,
            k.multiplies_per_aie,
            k.weight_bytes_per_aie,
            k.cycles,
            to_f64(k.latency_us)
        );
    }
    let _ = writeln!(s, "total AIEs = {}", e.total_aies);
    for (label, c) in [("reported", &e.reported), ("unrounded", &e.exact)] {
        let _ = writeln!(
            s,
            "{label}: matmul path {:.3} us, encoder {:.3} us, X {:.3} us, model {:.3} us",
            to_f64(c.matmul_path_us),
            to_f64(c.encoder_us),
            to_f64(c.x_us),
            to_f64(c.model_us)
        );
    }
    s
}

pub fn versal_csv(e: &VersalEstimate) -> String {
    let mut s =
        String::from("kernel,aies,multiplies_per_aie,weight_bytes_per_aie,cycles,latency_us\n");
    for k in &e.kernels {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            k.name,
            k.aies,
            k.multiplies_per_aie,
            k.weight_bytes_per_aie,
            k.cycles,
            to_f64(k.latency_us)
        );
    }
    let _ = writeln!(s, "total,{},,,,", e.total_aies);
    let _ = writeln!(s, "encoder,,,,,{}", to_f64(e.reported.encoder_us));
    let _ = writeln!(s, "model,,,,,{}", to_f64(e.reported.model_us));
    s
}
