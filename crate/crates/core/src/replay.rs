//! Request traces and policy replay.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::freq::OperatingPoint;
use crate::fuse::{lookup_config, FuseTable};
use crate::metrics::{e2e_latency, CompensatedSum};
use crate::model::PhaseKind;
use crate::sim::{run_phase_summary, run_scenario, Scenario, SimTrace};

pub const MAX_PREFILL_TOKENS: u32 = 512;
pub const MAX_DECODE_TOKENS: u32 = 256;
/// Nominal battery voltage for mAh conversion.
pub const NOMINAL_VOLTAGE_V: f64 = 3.85;

// log-normal shapes for synthesized lengths
const PREFILL_LN: (f64, f64) = (5.19, 0.75);
const DECODE_LN: (f64, f64) = (3.95, 0.75);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_PREFILL_TOKENS).contains(&self.prefill_tokens) {
            return Err(Error::InvalidParams(format!(
                "prefill_tokens {} outside 1..={MAX_PREFILL_TOKENS}",
                self.prefill_tokens
            )));
        }
        if !(1..=MAX_DECODE_TOKENS).contains(&self.decode_tokens) {
            return Err(Error::InvalidParams(format!(
                "decode_tokens {} outside 1..={MAX_DECODE_TOKENS}",
                self.decode_tokens
            )));
        }
        Ok(())
    }
}

/// Reads line-delimited JSON records; blank lines are skipped.
pub fn load_requests(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_requests(&text, path)
}

pub fn parse_requests(text: &str, path: &Path) -> Result<Vec<Request>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let r: Request = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        r.validate().map_err(|e| err(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn save_requests(requests: &[Request], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for r in requests {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Deterministic log-normal prompt and decode lengths, clipped to the bounds.
pub fn synthesize_requests(n: usize, seed: u64) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefill = LogNormal::new(PREFILL_LN.0, PREFILL_LN.1).expect("valid shape");
    let decode = LogNormal::new(DECODE_LN.0, DECODE_LN.1).expect("valid shape");
    let clip = |x: f64, hi: u32| (x.round() as u32).clamp(1, hi);
    (0..n)
        .map(|i| Request {
            id: format!("req-{i:04}"),
            prefill_tokens: clip(prefill.sample(&mut rng), MAX_PREFILL_TOKENS),
            decode_tokens: clip(decode.sample(&mut rng), MAX_DECODE_TOKENS),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Gov,
    Fuse(FuseTable),
}

impl Policy {
    pub fn label(&self) -> &'static str {
        match self {
            Policy::Gov => "gov",
            Policy::Fuse(_) => "fuse",
        }
    }

    fn point(&self, kind: PhaseKind, n_p: u32) -> OperatingPoint {
        match self {
            Policy::Gov => OperatingPoint::GOVERNED,
            Policy::Fuse(t) => lookup_config(t, kind, n_p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestResult {
    pub id: String,
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub e2e_ms: f64,
    pub prefill_energy_mj: f64,
    pub decode_energy_mj: f64,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub policy: String,
    pub voltage_v: f64,
    pub requests: Vec<RequestResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((CompensatedSum::default(), 0usize), |(mut s, n), x| {
        s.add(x);
        (s, n + 1)
    });
    if n == 0 {
        0.0
    } else {
        s.value() / n as f64
    }
}

impl ReplayReport {
    pub fn mean_ttft_ms(&self) -> f64 {
        mean(self.requests.iter().map(|r| r.ttft_ms))
    }

    pub fn mean_tpot_ms(&self) -> f64 {
        mean(self.requests.iter().map(|r| r.tpot_ms))
    }

    pub fn mean_e2e_ms(&self) -> f64 {
        mean(self.requests.iter().map(|r| r.e2e_ms))
    }

    pub fn total_energy_mj(&self) -> f64 {
        let s: CompensatedSum = self.requests.iter().map(|r| r.energy_mj).collect();
        s.value()
    }

    /// mJ → mAh at the report voltage.
    pub fn total_mah(&self) -> f64 {
        self.total_energy_mj() / 1000.0 / self.voltage_v / 3.6
    }

    pub fn summary(&self) -> ReplaySummary {
        ReplaySummary {
            policy: self.policy.clone(),
            requests: self.requests.len(),
            mean_ttft_ms: self.mean_ttft_ms(),
            mean_tpot_ms: self.mean_tpot_ms(),
            mean_e2e_ms: self.mean_e2e_ms(),
            total_energy_mj: self.total_energy_mj(),
            total_mah: self.total_mah(),
            voltage_v: self.voltage_v,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.requests {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(policy: &str, path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let requests = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<RequestResult>, _>>()?;
        Ok(ReplayReport {
            policy: policy.to_string(),
            voltage_v: NOMINAL_VOLTAGE_V,
            requests,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub policy: String,
    pub requests: usize,
    pub mean_ttft_ms: f64,
    pub mean_tpot_ms: f64,
    pub mean_e2e_ms: f64,
    pub total_energy_mj: f64,
    pub total_mah: f64,
    pub voltage_v: f64,
}

fn replay_inner(
    cal: &Calibration,
    policy: &Policy,
    requests: &[Request],
    mut traces: Option<&mut Vec<SimTrace>>,
) -> Result<ReplayReport> {
    let mut out = Vec::with_capacity(requests.len());
    for req in requests {
        let wrap = |e: Error| Error::Request {
            id: req.id.clone(),
            source: Box::new(e),
        };
        req.validate().map_err(wrap)?;
        let mut phase_run = |kind: PhaseKind, tokens: u32| -> Result<(f64, f64)> {
            let phase = cal.phase(kind, tokens)?;
            let point = policy.point(kind, req.prefill_tokens);
            let r = match traces.as_deref_mut() {
                Some(ts) => {
                    let (t, r) = run_scenario(cal, &Scenario::fixed(phase, point))?;
                    ts.push(t);
                    r
                }
                None => run_phase_summary(cal, point, &phase)?,
            };
            Ok((r.latency_ms, r.energy_mj))
        };
        let (ttft, e_pre) = phase_run(PhaseKind::Prefill, req.prefill_tokens).map_err(wrap)?;
        let (dec, e_dec) = phase_run(PhaseKind::Decode, req.decode_tokens).map_err(wrap)?;
        let tpot = dec / f64::from(req.decode_tokens);
        out.push(RequestResult {
            id: req.id.clone(),
            prefill_tokens: req.prefill_tokens,
            decode_tokens: req.decode_tokens,
            ttft_ms: ttft,
            tpot_ms: tpot,
            e2e_ms: e2e_latency(ttft, tpot, req.decode_tokens),
            prefill_energy_mj: e_pre,
            decode_energy_mj: e_dec,
            energy_mj: e_pre + e_dec,
        });
    }
    Ok(ReplayReport {
        policy: policy.label().to_string(),
        voltage_v: NOMINAL_VOLTAGE_V,
        requests: out,
    })
}

/// Serves each request in order: prefill, then decode, each from fresh governor state.
pub fn replay(cal: &Calibration, policy: &Policy, requests: &[Request]) -> Result<ReplayReport> {
    replay_inner(cal, policy, requests, None)
}

/// As [`replay`], also returning every phase trace in order.
pub fn replay_traced(
    cal: &Calibration,
    policy: &Policy,
    requests: &[Request],
) -> Result<(ReplayReport, Vec<SimTrace>)> {
    let mut traces = Vec::new();
    let report = replay_inner(cal, policy, requests, Some(&mut traces))?;
    Ok((report, traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ttft: f64,
    pub tpot: f64,
    pub e2e: f64,
    pub energy: f64,
}

/// Ratios `other / base` of mean TTFT, TPOT, E2E and total energy.
pub fn compare_reports(base: &ReplayReport, other: &ReplayReport) -> Result<Comparison> {
    let key = |r: &RequestResult| (r.id.clone(), r.prefill_tokens, r.decode_tokens);
    let a: HashSet<_> = base.requests.iter().map(key).collect();
    let b: HashSet<_> = other.requests.iter().map(key).collect();
    if a != b || base.requests.len() != other.requests.len() {
        let only: Vec<_> = a
            .symmetric_difference(&b)
            .map(|k| k.0.clone())
            .take(5)
            .collect();
        return Err(Error::RequestMismatch(format!(
            "differing requests include {only:?}"
        )));
    }
    if base.requests.is_empty() {
        return Err(Error::Empty("no requests to compare".into()));
    }
    Ok(Comparison {
        ttft: other.mean_ttft_ms() / base.mean_ttft_ms(),
        tpot: other.mean_tpot_ms() / base.mean_tpot_ms(),
        e2e: other.mean_e2e_ms() / base.mean_e2e_ms(),
        energy: other.total_energy_mj() / base.total_energy_mj(),
    })
}
