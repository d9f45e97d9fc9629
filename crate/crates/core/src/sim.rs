//! Fixed 1 ms timestep simulation of one phase under a governor schedule.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::freq::{Component, FreqConfig, Mhz, OperatingPoint};
use crate::governors::GovernorSet;
use crate::metrics::CompensatedSum;
use crate::model::{power_draw, steady_state_scaled, PhaseKind, PhaseSpec};

/// Abort when no token completes for this long.
pub const NON_TERMINATION_MS: u64 = 60_000;
/// Ticks excluded from the measured power of a run.
pub const WARMUP_MS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t_ms: u64,
    pub f_cpu: Mhz,
    pub f_gpu: Mhz,
    pub f_mem: Mhz,
    pub u_cpu: f64,
    pub u_gpu: f64,
    pub u_mem: f64,
    pub power_mw: f64,
    pub tokens_done: u32,
}

impl TickRecord {
    pub fn freq(&self, c: Component) -> Mhz {
        match c {
            Component::Cpu => self.f_cpu,
            Component::Gpu => self.f_gpu,
            Component::Mem => self.f_mem,
        }
    }

    pub fn config(&self) -> FreqConfig {
        FreqConfig {
            cpu: self.f_cpu,
            gpu: self.f_gpu,
            mem: self.f_mem,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub phase: PhaseSpec,
    pub records: Vec<TickRecord>,
}

impl SimTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(phase: PhaseSpec, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<TickRecord>, _>>()?;
        Ok(SimTrace { phase, records })
    }

    /// Σ power · 1 ms, in mJ.
    pub fn energy_mj(&self) -> f64 {
        let s: CompensatedSum = self.records.iter().map(|r| r.power_mw).collect();
        s.value() / 1000.0
    }
}

/// Summary of one completed phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: PhaseSpec,
    /// Completion time of the last token (fractional ms).
    pub latency_ms: f64,
    pub ticks: u64,
    /// Mean tick power over the whole run.
    pub avg_power_mw: f64,
    /// Mean tick power after the warm-up ticks.
    pub measured_power_mw: f64,
    /// Σ power · 1 ms over all ticks.
    pub energy_mj: f64,
    /// Time-weighted mean frequency of cpu, gpu, mem.
    pub effective_mhz: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phase: PhaseSpec,
    /// `(t_ms, operating point)` changes; the first must be at 0.
    pub schedule: Vec<(u64, OperatingPoint)>,
    /// Optional hard stop before completion.
    pub max_ms: Option<u64>,
}

impl Scenario {
    pub fn fixed(phase: PhaseSpec, point: OperatingPoint) -> Self {
        Scenario {
            phase,
            schedule: vec![(0, point)],
            max_ms: None,
        }
    }

    /// `first` from t = 0, switching to `then` at `at_ms`.
    pub fn switch(
        phase: PhaseSpec,
        first: OperatingPoint,
        at_ms: u64,
        then: OperatingPoint,
    ) -> Self {
        Scenario {
            phase,
            schedule: vec![(0, first), (at_ms, then)],
            max_ms: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::InvalidParams("schedule must start at t = 0".into())),
        }
        if self.schedule.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::InvalidParams(
                "schedule times must be non-decreasing".into(),
            ));
        }
        Ok(())
    }
}

/// Runs `phase` with every component held at `point` from the start.
pub fn run_phase(
    cal: &Calibration,
    point: OperatingPoint,
    phase: &PhaseSpec,
) -> Result<(SimTrace, PhaseResult)> {
    run_scenario(cal, &Scenario::fixed(*phase, point))
}

/// As [`run_phase`] without storing the trace.
pub fn run_phase_summary(
    cal: &Calibration,
    point: OperatingPoint,
    phase: &PhaseSpec,
) -> Result<PhaseResult> {
    simulate(cal, &Scenario::fixed(*phase, point), None)
}

pub fn run_scenario(cal: &Calibration, sc: &Scenario) -> Result<(SimTrace, PhaseResult)> {
    let mut records = Vec::new();
    let result = simulate(cal, sc, Some(&mut records))?;
    Ok((
        SimTrace {
            phase: sc.phase,
            records,
        },
        result,
    ))
}

fn simulate(
    cal: &Calibration,
    sc: &Scenario,
    mut records: Option<&mut Vec<TickRecord>>,
) -> Result<PhaseResult> {
    sc.validate()?;
    let phase = &sc.phase;
    let params = cal.phase_params(phase.kind).scaled_for(phase);
    let table = &cal.table;
    let mut gov = GovernorSet::new(&cal.governors, table, sc.schedule[0].1)?;
    let mut events = sc.schedule[1..].iter().peekable();

    let kernels = f64::from(phase.kernels);
    let need = f64::from(phase.kernels) * f64::from(phase.passes());
    let mut done = 0.0f64;
    let mut tokens_done = 0u32;
    let mut last_progress = 0u64;
    let mut power_sum = CompensatedSum::default();
    let mut measured_sum = CompensatedSum::default();
    let mut freq_sums = [0.0f64; 3];
    let mut t = 0u64;

    let latency = loop {
        while let Some((_, point)) = events.next_if(|(at, _)| *at <= t) {
            gov.apply(*point, table)?;
        }
        let cfg = FreqConfig {
            cpu: gov.cpu_freq(),
            gpu: gov.gpu_freq(),
            mem: gov.mem_freq(),
        };
        let up = steady_state_scaled(&cfg, &params);
        let power = power_draw(&cfg, &up, &cal.power, table);

        let rate = 1.0 / up.period_ms;
        let finished = done + rate >= need;
        let completion = finished.then(|| t as f64 + (need - done) / rate);
        done = if finished { need } else { done + rate };

        let now_done = match phase.kind {
            PhaseKind::Decode => (done / kernels).floor() as u32,
            PhaseKind::Prefill => (f64::from(phase.prompt_tokens) * done / need).floor() as u32,
        }
        .min(phase.tokens());
        if now_done > tokens_done {
            tokens_done = now_done;
            last_progress = t;
        }

        power_sum.add(power);
        if t >= WARMUP_MS {
            measured_sum.add(power);
        }
        for (s, c) in freq_sums.iter_mut().zip(Component::ALL) {
            *s += cfg.get(c).as_f64();
        }
        if let Some(r) = records.as_deref_mut() {
            r.push(TickRecord {
                t_ms: t,
                f_cpu: cfg.cpu,
                f_gpu: cfg.gpu,
                f_mem: cfg.mem,
                u_cpu: up.u_cpu,
                u_gpu: up.u_gpu,
                u_mem: up.u_mem,
                power_mw: power,
                tokens_done,
            });
        }
        t += 1;

        if let Some(lat) = completion {
            break lat;
        }
        if sc.max_ms.is_some_and(|m| t >= m) {
            break t as f64;
        }
        if t - last_progress > NON_TERMINATION_MS {
            return Err(Error::NonTermination {
                limit_ms: NON_TERMINATION_MS,
                last_ms: last_progress,
            });
        }
        gov.observe(&up, table);
    };

    let ticks = t as f64;
    let measured_power_mw = if t > WARMUP_MS {
        measured_sum.value() / (t - WARMUP_MS) as f64
    } else {
        power_sum.value() / ticks
    };
    Ok(PhaseResult {
        phase: *phase,
        latency_ms: latency,
        ticks: t,
        avg_power_mw: power_sum.value() / ticks,
        measured_power_mw,
        energy_mj: power_sum.value() / 1000.0,
        effective_mhz: freq_sums.map(|s| s / ticks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::steady_state;

    fn cal() -> Calibration {
        Calibration::default_pixel7()
    }

    #[test]
    fn pinned_latency_is_analytic() {
        let cal = cal();
        for (c, g, m) in [(2850, 848, 3172), (500, 151, 421), (1426, 471, 1014)] {
            let cfg = FreqConfig::new(c, g, m);
            for phase in [cal.decode(5).unwrap(), cal.prefill(100).unwrap()] {
                let (trace, r) = run_phase(&cal, OperatingPoint::pinned(cfg), &phase).unwrap();
                let up = steady_state(&cfg, &phase, cal.phase_params(phase.kind));
                let expect = phase.total_kernels() * up.period_ms;
                assert!(
                    ((r.latency_ms - expect) / expect).abs() < 1e-9,
                    "{cfg} {phase}"
                );
                assert_eq!(trace.records.last().unwrap().tokens_done, phase.tokens());
                assert!(trace.records.iter().all(|t| t.config() == cfg));
            }
        }
    }

    #[test]
    fn max_is_faster_than_min() {
        let cal = cal();
        let phase = cal.decode(3).unwrap();
        let hi = run_phase_summary(
            &cal,
            OperatingPoint::pinned(FreqConfig::max_of(&cal.table)),
            &phase,
        )
        .unwrap();
        let lo = run_phase_summary(
            &cal,
            OperatingPoint::pinned(FreqConfig::min_of(&cal.table)),
            &phase,
        )
        .unwrap();
        assert!(hi.latency_ms <= lo.latency_ms);
    }

    #[test]
    fn trace_invariants_and_energy() {
        let cal = cal();
        let phase = cal.decode(8).unwrap();
        let (trace, r) = run_phase(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
        for w in trace.records.windows(2) {
            assert_eq!(w[1].t_ms, w[0].t_ms + 1);
            assert!(w[1].tokens_done >= w[0].tokens_done);
        }
        for rec in &trace.records {
            for c in Component::ALL {
                assert!(cal.table.contains(c, rec.freq(c)));
            }
        }
        assert_eq!(trace.records.len() as u64, r.ticks);
        let e = trace.energy_mj();
        assert!(((e - r.avg_power_mw * r.ticks as f64 / 1000.0) / e).abs() < 1e-12);
        assert_eq!(e, r.energy_mj);
        let s = run_phase_summary(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
        assert_eq!(s, r);
    }

    #[test]
    fn degenerate_schedule_matches_run_phase() {
        let cal = cal();
        let phase = cal.decode(4).unwrap();
        let a = run_phase(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
        let sc = Scenario {
            phase,
            schedule: vec![
                (0, OperatingPoint::GOVERNED),
                (100, OperatingPoint::GOVERNED),
            ],
            max_ms: None,
        };
        assert_eq!(run_scenario(&cal, &sc).unwrap(), a);
    }

    #[test]
    fn csv_round_trip() {
        let cal = cal();
        let phase = cal.decode(2).unwrap();
        let (trace, _) = run_phase(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_ms,f_cpu,f_gpu,f_mem,u_cpu,u_gpu,u_mem,power_mw,tokens_done\n"));
        assert_eq!(SimTrace::read_csv(phase, buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn bad_schedule_rejected() {
        let cal = cal();
        let phase = cal.decode(1).unwrap();
        let sc = Scenario {
            phase,
            schedule: vec![(5, OperatingPoint::GOVERNED)],
            max_ms: None,
        };
        assert!(run_scenario(&cal, &sc).is_err());
    }

    #[test]
    fn stalled_run_is_non_terminating() {
        let mut cal = cal();
        cal.perf.decode.gpu_work = 1e9;
        let phase = cal.decode(1).unwrap();
        let err = run_phase_summary(&cal, OperatingPoint::GOVERNED, &phase).unwrap_err();
        assert!(matches!(err, Error::NonTermination { .. }));
    }
}
