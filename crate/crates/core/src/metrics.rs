//! Latency, power and energy metrics of a phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::Component;
use crate::model::{PhaseKind, PhaseSpec};
use crate::sim::{PhaseResult, SimTrace};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        s.extend(iter);
        s
    }
}

/// Time-weighted mean of `(frequency MHz, duration ms)` intervals.
pub fn weighted_mean_frequency(intervals: &[(f64, f64)]) -> Result<f64> {
    let total: CompensatedSum = intervals.iter().map(|&(_, dt)| dt).collect();
    if intervals.is_empty() || total.value() <= 0.0 {
        return Err(Error::Empty("no time observed".into()));
    }
    let weighted: CompensatedSum = intervals.iter().map(|&(f, dt)| f * dt).collect();
    Ok(weighted.value() / total.value())
}

/// Time-weighted average frequency of `component` over the trace.
pub fn effective_frequency(trace: &SimTrace, component: Component) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(Error::Empty("trace has no ticks".into()));
    }
    let sum: CompensatedSum = trace
        .records
        .iter()
        .map(|r| r.freq(component).as_f64())
        .collect();
    Ok(sum.value() / trace.records.len() as f64)
}

/// mJ per token: P·TTFT/N_p for prefill, P·TPOT for decode.
///
/// `latency_ms` is TTFT for prefill and the per-token TPOT for decode.
pub fn energy_per_token(avg_power_mw: f64, latency_ms: f64, phase: &PhaseSpec) -> Result<f64> {
    if !(avg_power_mw > 0.0 && latency_ms > 0.0) {
        return Err(Error::InvalidParams(format!(
            "power and latency must be positive, got {avg_power_mw} mW and {latency_ms} ms"
        )));
    }
    match phase.kind {
        PhaseKind::Prefill => {
            if phase.prompt_tokens == 0 {
                return Err(Error::InvalidParams("N_p = 0".into()));
            }
            Ok(avg_power_mw * latency_ms / f64::from(phase.prompt_tokens) / 1000.0)
        }
        PhaseKind::Decode => Ok(avg_power_mw * latency_ms / 1000.0),
    }
}

pub fn e2e_latency(ttft_ms: f64, tpot_ms: f64, decode_tokens: u32) -> f64 {
    ttft_ms + f64::from(decode_tokens.saturating_sub(1)) * tpot_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    /// TTFT for prefill, TPOT for decode.
    pub latency_ms: f64,
    pub energy_per_token_mj: f64,
    pub avg_power_mw: f64,
    pub effective_cpu_mhz: f64,
    pub effective_gpu_mhz: f64,
    pub effective_mem_mhz: f64,
}

impl PhaseMetrics {
    /// Metrics as a profiler measures them, with warm-up excluded from the power.
    pub fn from_result(r: &PhaseResult) -> Result<Self> {
        let latency_ms = match r.phase.kind {
            PhaseKind::Prefill => r.latency_ms,
            PhaseKind::Decode => r.latency_ms / f64::from(r.phase.decode_tokens),
        };
        Ok(PhaseMetrics {
            latency_ms,
            energy_per_token_mj: energy_per_token(r.measured_power_mw, latency_ms, &r.phase)?,
            avg_power_mw: r.measured_power_mw,
            effective_cpu_mhz: r.effective_mhz[0],
            effective_gpu_mhz: r.effective_mhz[1],
            effective_mem_mhz: r.effective_mhz[2],
        })
    }

    pub fn effective(&self, c: Component) -> f64 {
        match c {
            Component::Cpu => self.effective_cpu_mhz,
            Component::Gpu => self.effective_gpu_mhz,
            Component::Mem => self.effective_mem_mhz,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freq::Mhz;
    use crate::sim::TickRecord;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn gpu_trace(segments: &[(u32, usize)]) -> SimTrace {
        let mut records = Vec::new();
        for &(f, n) in segments {
            for _ in 0..n {
                records.push(TickRecord {
                    t_ms: records.len() as u64,
                    f_cpu: Mhz(500),
                    f_gpu: Mhz(f),
                    f_mem: Mhz(421),
                    u_cpu: 0.0,
                    u_gpu: 0.0,
                    u_mem: 0.0,
                    power_mw: 600.0,
                    tokens_done: 0,
                });
            }
        }
        SimTrace {
            phase: PhaseSpec::decode(1, 1).unwrap(),
            records,
        }
    }

    #[test]
    fn effective_frequency_examples() {
        let f = |s: &[(u32, usize)]| effective_frequency(&gpu_trace(s), Component::Gpu).unwrap();
        assert_eq!(f(&[(848, 100)]), 848.0);
        assert!(rel(f(&[(848, 50), (151, 50)]), 499.5) < 1e-12);
        assert!(rel(f(&[(701, 75), (151, 25)]), 563.5) < 1e-12);
        assert!(effective_frequency(&gpu_trace(&[]), Component::Gpu).is_err());
    }

    #[test]
    fn energy_examples() {
        let d = PhaseSpec::decode(10, 1).unwrap();
        let p = PhaseSpec::prefill(32, 1).unwrap();
        assert!(rel(energy_per_token(2000.0, 200.0, &d).unwrap(), 400.0) < 1e-12);
        assert!(rel(energy_per_token(3000.0, 3200.0, &p).unwrap(), 300.0) < 1e-12);
        let full = energy_per_token(2400.0, 150.0, &d).unwrap();
        let half = energy_per_token(1200.0, 150.0, &d).unwrap();
        assert!(rel(half * 2.0, full) < 1e-12);
        let bad = PhaseSpec {
            prompt_tokens: 0,
            ..p
        };
        assert!(energy_per_token(1.0, 1.0, &bad).is_err());
        assert!(energy_per_token(0.0, 1.0, &d).is_err());
    }

    #[test]
    fn e2e_examples() {
        assert_eq!(e2e_latency(10000.0, 200.0, 256), 61000.0);
        assert_eq!(e2e_latency(1234.5, 99.0, 1), 1234.5);
        assert_eq!(e2e_latency(0.0, 100.0, 11), 1000.0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let xs: Vec<f64> = std::iter::once(1e16)
            .chain(std::iter::repeat_n(1.0, 1000))
            .collect();
        let s: CompensatedSum = xs.iter().copied().collect();
        assert_eq!(s.value(), 1e16 + 1000.0);
    }

    proptest! {
        #[test]
        fn repartition_invariant(f in 100.0f64..3000.0, dt in 1.0f64..500.0, cut in 0.01f64..0.99, g in 100.0f64..3000.0, dg in 1.0f64..500.0) {
            let whole = weighted_mean_frequency(&[(f, dt), (g, dg)]).unwrap();
            let split = weighted_mean_frequency(&[(f, dt * cut), (f, dt * (1.0 - cut)), (g, dg)]).unwrap();
            prop_assert!(rel(whole, split) < 1e-12);
            prop_assert!(whole >= f.min(g) - 1e-9 && whole <= f.max(g) + 1e-9);
        }

        #[test]
        fn decode_energy_identity(p in 600.0f64..8000.0, total in 10.0f64..1e5, n in 1u32..300) {
            let d = PhaseSpec::decode(n, 1).unwrap();
            let tpot = total / f64::from(n);
            let e = energy_per_token(p, tpot, &d).unwrap();
            prop_assert!(rel(e * f64::from(n), p * total / 1000.0) < 1e-12);
        }
    }
}
