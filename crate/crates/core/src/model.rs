//! Parametric performance and power model.
//!
//! One inference phase is a sequence of GPU kernels. Each kernel costs the CPU an
//! issue step (`W_c / f_cpu`), the GPU an execution step (`W_g / f_gpu + B_m / f_mem`)
//! and a dispatch gap (`G_c / f_cpu + g0`) during which neither side counts as busy.
//! These three are serialized. Host-side CPU work `W_h / f_cpu` runs concurrently with
//! execution and the gap; it only stretches the period if it outlasts them:
//!
//! ```text
//! T = t_issue + max(t_exec + t_gap, t_host)
//! u_cpu = (t_issue + t_host) / T,  u_gpu = t_exec / T,  u_mem = (B_m / f_mem) / T
//! ```
//!
//! Units: MHz, ms, MHz·ms for work, mW, mJ.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::{Component, FreqConfig, FrequencyTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Prefill,
    Decode,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Prefill => "prefill",
            PhaseKind::Decode => "decode",
        })
    }
}

impl FromStr for PhaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prefill" => Ok(PhaseKind::Prefill),
            "decode" => Ok(PhaseKind::Decode),
            other => Err(Error::InvalidParams(format!(
                "unknown phase kind {other:?}"
            ))),
        }
    }
}

/// One inference phase to simulate.
///
/// A prefill phase is a single batched pass of `kernels` kernels over `prompt_tokens`
/// tokens. A decode phase runs `kernels` kernels per generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub prompt_tokens: u32,
    pub decode_tokens: u32,
    pub kernels: u32,
}

impl PhaseSpec {
    pub fn prefill(prompt_tokens: u32, kernels: u32) -> Result<Self> {
        PhaseSpec {
            kind: PhaseKind::Prefill,
            prompt_tokens,
            decode_tokens: 0,
            kernels,
        }
        .validated()
    }

    pub fn decode(decode_tokens: u32, kernels: u32) -> Result<Self> {
        PhaseSpec {
            kind: PhaseKind::Decode,
            prompt_tokens: 0,
            decode_tokens,
            kernels,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.kernels == 0 {
            return Err(Error::InvalidParams(
                "kernels per token must be >= 1".into(),
            ));
        }
        match self.kind {
            PhaseKind::Prefill if self.prompt_tokens == 0 => Err(Error::InvalidParams(
                "prefill needs at least one prompt token".into(),
            )),
            PhaseKind::Decode if self.decode_tokens == 0 => Err(Error::InvalidParams(
                "decode needs at least one token".into(),
            )),
            _ => Ok(self),
        }
    }

    /// Number of token-sized units whose completion ends the phase: decode tokens, or
    /// the single batched prefill pass.
    pub fn passes(&self) -> u32 {
        match self.kind {
            PhaseKind::Prefill => 1,
            PhaseKind::Decode => self.decode_tokens,
        }
    }

    /// Tokens the phase produces or consumes (N_p or N_d).
    pub fn tokens(&self) -> u32 {
        match self.kind {
            PhaseKind::Prefill => self.prompt_tokens,
            PhaseKind::Decode => self.decode_tokens,
        }
    }

    pub fn total_kernels(&self) -> f64 {
        f64::from(self.kernels) * f64::from(self.passes())
    }
}

impl fmt::Display for PhaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PhaseKind::Prefill => write!(f, "prefill[{}]", self.prompt_tokens),
            PhaseKind::Decode => write!(f, "decode[{}]", self.decode_tokens),
        }
    }
}

/// Per-kernel work constants for one phase kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    /// CPU issue work W_c (MHz·ms), busy and on the critical path.
    pub issue_work: f64,
    /// GPU compute work W_g (MHz·ms).
    pub gpu_work: f64,
    /// Memory work B_m (MHz·ms), already divided by the bus-width factor.
    pub mem_work: f64,
    /// CPU-speed-dependent dispatch gap work G_c (MHz·ms), not busy.
    pub gap_work: f64,
    /// Fixed dispatch gap g0 (ms).
    pub gap_ms: f64,
    /// Host CPU work W_h (MHz·ms) overlapping GPU execution.
    #[serde(default)]
    pub host_work: f64,
    /// Kernels per token (per pass for prefill).
    pub kernels: u32,
    /// Prompt length the work constants are stated for (prefill only).
    #[serde(default = "default_reference_tokens")]
    pub reference_tokens: u32,
    /// Exponent applied to the prompt-length ratio for CPU-side work (prefill only).
    #[serde(default = "default_cpu_scale_exponent")]
    pub cpu_scale_exponent: f64,
}

fn default_reference_tokens() -> u32 {
    32
}

fn default_cpu_scale_exponent() -> f64 {
    0.5
}

impl PhaseParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("issue_work", self.issue_work),
            ("gpu_work", self.gpu_work),
            ("mem_work", self.mem_work),
            ("gap_work", self.gap_work),
            ("gap_ms", self.gap_ms),
            ("host_work", self.host_work),
            ("cpu_scale_exponent", self.cpu_scale_exponent),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.gpu_work <= 0.0 {
            return Err(Error::InvalidParams("gpu_work must be > 0".into()));
        }
        if self.kernels == 0 || self.reference_tokens == 0 {
            return Err(Error::InvalidParams(
                "kernels and reference_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Work constants for `phase`, with prefill work scaled from the reference length.
    pub fn scaled_for(&self, phase: &PhaseSpec) -> PhaseParams {
        match phase.kind {
            PhaseKind::Decode => *self,
            PhaseKind::Prefill => {
                let ratio = f64::from(phase.prompt_tokens) / f64::from(self.reference_tokens);
                let cpu_ratio = ratio.powf(self.cpu_scale_exponent);
                PhaseParams {
                    issue_work: self.issue_work * cpu_ratio,
                    host_work: self.host_work * cpu_ratio,
                    gpu_work: self.gpu_work * ratio,
                    mem_work: self.mem_work * ratio,
                    ..*self
                }
            }
        }
    }
}

/// Work constants for both phase kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfModelParams {
    pub prefill: PhaseParams,
    pub decode: PhaseParams,
}

impl PerfModelParams {
    pub fn phase(&self, kind: PhaseKind) -> &PhaseParams {
        match kind {
            PhaseKind::Prefill => &self.prefill,
            PhaseKind::Decode => &self.decode,
        }
    }

    pub fn phase_mut(&mut self, kind: PhaseKind) -> &mut PhaseParams {
        match kind {
            PhaseKind::Prefill => &mut self.prefill,
            PhaseKind::Decode => &mut self.decode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prefill.validate()?;
        self.decode.validate()
    }
}

/// Power coefficients for one component: `a · f̂^e + b · f̂`, scaled by utilization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentPower {
    pub dynamic_mw: f64,
    pub linear_mw: f64,
    pub exponent: f64,
}

impl ComponentPower {
    fn at(&self, f_norm: f64) -> f64 {
        self.dynamic_mw * f_norm.powf(self.exponent) + self.linear_mw * f_norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModelParams {
    pub idle_mw: f64,
    pub cpu: ComponentPower,
    pub gpu: ComponentPower,
    pub mem: ComponentPower,
}

impl PowerModelParams {
    pub fn component(&self, c: Component) -> &ComponentPower {
        match c {
            Component::Cpu => &self.cpu,
            Component::Gpu => &self.gpu,
            Component::Mem => &self.mem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.idle_mw.is_finite() && self.idle_mw > 0.0) {
            return Err(Error::InvalidParams("idle power must be > 0".into()));
        }
        for c in Component::ALL {
            let p = self.component(c);
            if !(p.dynamic_mw >= 0.0 && p.linear_mw >= 0.0 && p.exponent >= 1.0) {
                return Err(Error::InvalidParams(format!(
                    "{c} power coefficients must be >= 0 with exponent >= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Per-kernel step durations (ms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTimes {
    pub issue: f64,
    pub exec: f64,
    pub gap: f64,
    pub host: f64,
    /// Memory part of `exec`.
    pub mem: f64,
}

/// Steady-state kernel period and busy fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilPoint {
    pub period_ms: f64,
    pub u_cpu: f64,
    pub u_gpu: f64,
    pub u_mem: f64,
}

impl UtilPoint {
    pub fn idle() -> Self {
        UtilPoint {
            period_ms: f64::INFINITY,
            u_cpu: 0.0,
            u_gpu: 0.0,
            u_mem: 0.0,
        }
    }

    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Cpu => self.u_cpu,
            Component::Gpu => self.u_gpu,
            Component::Mem => self.u_mem,
        }
    }
}

pub fn kernel_times(cfg: &FreqConfig, phase: &PhaseSpec, params: &PhaseParams) -> KernelTimes {
    kernel_times_scaled(cfg, &params.scaled_for(phase))
}

/// As [`kernel_times`] with work constants already scaled for the phase.
pub fn kernel_times_scaled(cfg: &FreqConfig, p: &PhaseParams) -> KernelTimes {
    let f_cpu = cfg.cpu.as_f64();
    let mem = p.mem_work / cfg.mem.as_f64();
    KernelTimes {
        issue: p.issue_work / f_cpu,
        exec: p.gpu_work / cfg.gpu.as_f64() + mem,
        gap: p.gap_work / f_cpu + p.gap_ms,
        host: p.host_work / f_cpu,
        mem,
    }
}

pub fn steady_state(cfg: &FreqConfig, phase: &PhaseSpec, params: &PhaseParams) -> UtilPoint {
    steady_state_scaled(cfg, &params.scaled_for(phase))
}

/// As [`steady_state`] with work constants already scaled for the phase.
pub fn steady_state_scaled(cfg: &FreqConfig, p: &PhaseParams) -> UtilPoint {
    let t = kernel_times_scaled(cfg, p);
    let period = t.issue + (t.exec + t.gap).max(t.host);
    UtilPoint {
        period_ms: period,
        u_cpu: ((t.issue + t.host) / period).min(1.0),
        u_gpu: t.exec / period,
        u_mem: t.mem / period,
    }
}

/// Average device power (mW) at `cfg` with busy fractions `up`.
pub fn power_draw(
    cfg: &FreqConfig,
    up: &UtilPoint,
    pp: &PowerModelParams,
    table: &FrequencyTable,
) -> f64 {
    let mut p = pp.idle_mw;
    for c in Component::ALL {
        let u = up.get(c);
        if u > 0.0 {
            p += u * pp.component(c).at(table.normalized(c, cfg.get(c)));
        }
    }
    p
}
