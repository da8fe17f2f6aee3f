use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::{Endpoint, EventKind, SimTrace};
use crate::fabric::KernelAddress;
use crate::Cycle;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeasureError {
    #[error("no output packets from {0} in trace")]
    NoOutput(KernelAddress),
}

/// Encoder latency components in cycles, plus the clock and switch latency
/// needed to convert them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyComponents {
    /// Cycles until the first output packet leaves.
    pub x: Cycle,
    /// Cycles until the last output packet leaves.
    pub t: Cycle,
    /// Steady-state interval between output packets; 0 with a single packet.
    pub i: Cycle,
    pub clock_hz: f64,
    pub switch_latency_s: f64,
}

/// Cycle of the first packet delivered to `endpoint`.
pub fn first_arrival(trace: &SimTrace, endpoint: Endpoint) -> Option<Cycle> {
    trace
        .of_kind(EventKind::Recv)
        .find(|e| e.dst == Some(endpoint))
        .map(|e| e.cycle)
}

/// X/T/I at `observer`, with time zero at the first stimulus injection.
pub fn measure_xti(
    trace: &SimTrace,
    observer: KernelAddress,
    clock_hz: f64,
    switch_latency_s: f64,
) -> Result<LatencyComponents, MeasureError> {
    let origin = trace
        .of_kind(EventKind::Inject)
        .map(|e| e.cycle)
        .next()
        .unwrap_or(0);
    measure_xti_from(trace, observer, origin, clock_hz, switch_latency_s)
}

/// X/T/I at `observer` relative to an explicit origin cycle.
///
/// I is the median gap between consecutive output packets, which ignores
/// warm-up transients once the pipeline is in steady state.
pub fn measure_xti_from(
    trace: &SimTrace,
    observer: KernelAddress,
    origin: Cycle,
    clock_hz: f64,
    switch_latency_s: f64,
) -> Result<LatencyComponents, MeasureError> {
    let sends: Vec<Cycle> = trace
        .of_kind(EventKind::Send)
        .filter(|e| e.src == Some(Endpoint::Kernel(observer)))
        .map(|e| e.cycle)
        .collect();
    let (&first, &last) = match (sends.first(), sends.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(MeasureError::NoOutput(observer)),
    };
    let mut gaps: Vec<Cycle> = sends.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_unstable();
    let i = if gaps.is_empty() {
        0
    } else {
        gaps[(gaps.len() - 1) / 2]
    };
    Ok(LatencyComponents {
        x: first.saturating_sub(origin),
        t: last.saturating_sub(origin),
        i,
        clock_hz,
        switch_latency_s,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("missing key {0}")]
    Missing(&'static str),
    #[error("bad value for {key}: {value}")]
    BadValue { key: String, value: String },
}

impl fmt::Display for LatencyComponents {
    /// Key-value report block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "X = {}", self.x)?;
        writeln!(f, "T = {}", self.t)?;
        writeln!(f, "I = {}", self.i)?;
        writeln!(f, "f = {}", self.clock_hz)?;
        writeln!(f, "d = {}", self.switch_latency_s)
    }
}

impl FromStr for LatencyComponents {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut x = None;
        let mut t = None;
        let mut i = None;
        let mut f = None;
        let mut d = None;
        for line in s.lines() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || ReportError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            };
            match key {
                "X" => x = Some(value.parse::<Cycle>().map_err(|_| bad())?),
                "T" => t = Some(value.parse::<Cycle>().map_err(|_| bad())?),
                "I" => i = Some(value.parse::<Cycle>().map_err(|_| bad())?),
                "f" => f = Some(value.parse::<f64>().map_err(|_| bad())?),
                "d" => d = Some(value.parse::<f64>().map_err(|_| bad())?),
                _ => {}
            }
        }
        Ok(Self {
            x: x.ok_or(ReportError::Missing("X"))?,
            t: t.ok_or(ReportError::Missing("T"))?,
            i: i.ok_or(ReportError::Missing("I"))?,
            clock_hz: f.ok_or(ReportError::Missing("f"))?,
            switch_latency_s: d.ok_or(ReportError::Missing("d"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::TraceEvent;

    fn sends_at(observer: KernelAddress, cycles: &[Cycle]) -> SimTrace {
        let events = cycles
            .iter()
            .map(|&c| {
                let mut e = TraceEvent::new(c, EventKind::Send);
                e.src = Some(Endpoint::Kernel(observer));
                e
            })
            .collect();
        SimTrace {
            events,
            incomplete: false,
        }
    }

    #[test]
    fn synthetic_outputs() {
        let obs = KernelAddress::new(0, 32);
        let m = measure_xti(&sends_at(obs, &[100, 112, 124]), obs, 200e6, 0.0).unwrap();
        assert_eq!((m.x, m.t, m.i), (100, 124, 12));
    }

    #[test]
    fn single_packet_has_zero_interval() {
        let obs = KernelAddress::new(0, 32);
        let m = measure_xti(&sends_at(obs, &[6936]), obs, 200e6, 0.0).unwrap();
        assert_eq!((m.x, m.t, m.i), (6936, 6936, 0));
    }

    #[test]
    fn median_ignores_warmup() {
        let obs = KernelAddress::new(0, 1);
        let m = measure_xti(&sends_at(obs, &[0, 50, 62, 74, 86]), obs, 1.0, 0.0).unwrap();
        assert_eq!(m.i, 12);
    }

    #[test]
    fn missing_output_is_error() {
        let obs = KernelAddress::new(0, 1);
        assert_eq!(
            measure_xti(&SimTrace::default(), obs, 1.0, 0.0),
            Err(MeasureError::NoOutput(obs))
        );
    }

    #[test]
    fn report_round_trip() {
        let m = LatencyComponents {
            x: 111708,
            t: 209789,
            i: 767,
            clock_hz: 200e6,
            switch_latency_s: 1.1e-6,
        };
        let parsed: LatencyComponents = m.to_string().parse().unwrap();
        assert_eq!(parsed, m);
        assert_eq!(
            "X = 1\nT = 2".parse::<LatencyComponents>(),
            Err(ReportError::Missing("I"))
        );
    }
}
