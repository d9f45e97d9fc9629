//! Calibration documents and fitting work constants to observed utilizations.
//!
//! A calibration file is a single TOML document holding the frequency table, the
//! per-phase work constants, power coefficients, governor parameters, and the anchor
//! list (plus fixed parameters) the work constants were fitted from.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::freq::{FreqConfig, FrequencyTable};
use crate::governors::GovernorParams;
use crate::model::{
    steady_state, PerfModelParams, PhaseKind, PhaseParams, PhaseSpec, PowerModelParams,
};

const DEFAULT_DOCUMENT: &str = include_str!("../data/pixel7-tinyllama-like.toml");

/// Residual above which a fit is rejected.
pub const INFEASIBLE_RESIDUAL: f64 = 0.05;
const DESCENT_MAX_ITERS: usize = 10_000;
const DESCENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilMetric {
    Cpu,
    Gpu,
}

impl fmt::Display for UtilMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UtilMetric::Cpu => "u_cpu",
            UtilMetric::Gpu => "u_gpu",
        })
    }
}

/// An observed steady-state utilization at a pinned frequency combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub phase: PhaseKind,
    pub cpu: u32,
    pub gpu: u32,
    pub mem: u32,
    pub metric: UtilMetric,
    pub value: f64,
}

impl Anchor {
    pub fn cfg(&self) -> FreqConfig {
        FreqConfig::new(self.cpu, self.gpu, self.mem)
    }
}

/// Parameters held fixed while fitting one phase.
///
/// `mem_per_gpu_work` and `critical_cpu_share` tie unknowns together when the phase
/// has fewer anchors than free work constants: with three anchors B_m = ρ·W_g, with two
/// additionally (W_c + G_c) = φ·(W_c + G_c + W_h).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseFit {
    pub gap_ms: f64,
    /// Fraction of critical-path CPU work that is dispatch gap (G_c) rather than issue.
    pub gap_share: f64,
    pub kernels: u32,
    #[serde(default = "default_reference_tokens")]
    pub reference_tokens: u32,
    #[serde(default = "default_cpu_scale_exponent")]
    pub cpu_scale_exponent: f64,
    #[serde(default)]
    pub mem_per_gpu_work: Option<f64>,
    #[serde(default)]
    pub critical_cpu_share: Option<f64>,
}

fn default_reference_tokens() -> u32 {
    32
}

fn default_cpu_scale_exponent() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub prefill: PhaseFit,
    pub decode: PhaseFit,
}

impl FitParams {
    pub fn phase(&self, kind: PhaseKind) -> &PhaseFit {
        match kind {
            PhaseKind::Prefill => &self.prefill,
            PhaseKind::Decode => &self.decode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub params: PerfModelParams,
    /// Simulated minus observed, in anchor order.
    pub residuals: Vec<f64>,
}

impl CalibrationFit {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// A complete model: table, work constants, power, governors, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub name: String,
    pub table: FrequencyTable,
    pub perf: PerfModelParams,
    pub power: PowerModelParams,
    pub governors: GovernorParams,
    pub fit: FitParams,
    pub anchors: Vec<Anchor>,
}

impl Calibration {
    /// The shipped "pixel7-tinyllama-like" calibration.
    pub fn default_pixel7() -> Self {
        Self::from_toml(DEFAULT_DOCUMENT).expect("embedded calibration is valid")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let cal: Calibration = toml::from_str(doc)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        self.perf.validate()?;
        self.power.validate()?;
        self.governors.validate(&self.table)
    }

    /// Short SHA-256 digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let doc = self.to_toml().expect("calibration serializes");
        let digest = Sha256::digest(doc.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn prefill(&self, prompt_tokens: u32) -> Result<PhaseSpec> {
        PhaseSpec::prefill(prompt_tokens, self.perf.prefill.kernels)
    }

    pub fn decode(&self, decode_tokens: u32) -> Result<PhaseSpec> {
        PhaseSpec::decode(decode_tokens, self.perf.decode.kernels)
    }

    pub fn phase(&self, kind: PhaseKind, tokens: u32) -> Result<PhaseSpec> {
        match kind {
            PhaseKind::Prefill => self.prefill(tokens),
            PhaseKind::Decode => self.decode(tokens),
        }
    }

    pub fn phase_params(&self, kind: PhaseKind) -> &PhaseParams {
        self.perf.phase(kind)
    }

    /// Re-runs the fit on this document's anchors.
    pub fn refit(&self) -> Result<CalibrationFit> {
        calibrate_from_targets(&self.anchors, &self.fit)
    }
}

fn anchor_phase(fit: &PhaseFit, kind: PhaseKind) -> PhaseSpec {
    PhaseSpec {
        kind,
        prompt_tokens: if kind == PhaseKind::Prefill {
            fit.reference_tokens
        } else {
            0
        },
        decode_tokens: if kind == PhaseKind::Decode { 1 } else { 0 },
        kernels: fit.kernels,
    }
}

fn residual(anchor: &Anchor, phase: &PhaseSpec, params: &PhaseParams) -> f64 {
    let up = steady_state(&anchor.cfg(), phase, params);
    let sim = match anchor.metric {
        UtilMetric::Cpu => up.u_cpu,
        UtilMetric::Gpu => up.u_gpu,
    };
    sim - anchor.value
}

/// Unknowns per phase: critical CPU work c = W_c + G_c, W_g, B_m, W_h.
fn to_params(x: &[f64; 4], fit: &PhaseFit) -> PhaseParams {
    let [c, gpu, mem, host] = *x;
    PhaseParams {
        issue_work: c * (1.0 - fit.gap_share),
        gap_work: c * fit.gap_share,
        gpu_work: gpu,
        mem_work: mem,
        gap_ms: fit.gap_ms,
        host_work: host,
        kernels: fit.kernels,
        reference_tokens: fit.reference_tokens,
        cpu_scale_exponent: fit.cpu_scale_exponent,
    }
}

/// Maps reduced unknowns z to x = [c, W_g, B_m, W_h] for the given anchor count.
fn tie_matrix(n_anchors: usize, fit: &PhaseFit) -> Result<DMatrix<f64>> {
    let rho = || {
        fit.mem_per_gpu_work.ok_or_else(|| {
            Error::InvalidParams("fewer than 4 anchors needs mem_per_gpu_work".into())
        })
    };
    match n_anchors {
        n if n >= 4 => Ok(DMatrix::identity(4, 4)),
        3 => {
            let rho = rho()?;
            // z = [c, W_g, W_h]
            Ok(DMatrix::from_row_slice(
                4,
                3,
                &[
                    1.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, //
                    0.0, rho, 0.0, //
                    0.0, 0.0, 1.0,
                ],
            ))
        }
        2 => {
            let rho = rho()?;
            let phi = fit.critical_cpu_share.ok_or_else(|| {
                Error::InvalidParams("two anchors needs critical_cpu_share".into())
            })?;
            if !(phi > 0.0 && phi <= 1.0) {
                return Err(Error::InvalidParams(
                    "critical_cpu_share must be in (0, 1]".into(),
                ));
            }
            // z = [c, W_g]
            Ok(DMatrix::from_row_slice(
                4,
                2,
                &[
                    1.0,
                    0.0, //
                    0.0,
                    1.0, //
                    0.0,
                    rho, //
                    (1.0 - phi) / phi,
                    0.0,
                ],
            ))
        }
        n => Err(Error::InvalidParams(format!(
            "need at least 2 anchors per phase, got {n}"
        ))),
    }
}

/// Linearized row: with the host term not binding, each anchor is linear in x.
fn anchor_row(anchor: &Anchor, fit: &PhaseFit) -> ([f64; 4], f64) {
    let u = anchor.value;
    let (fc, fg, fm) = (
        f64::from(anchor.cpu),
        f64::from(anchor.gpu),
        f64::from(anchor.mem),
    );
    match anchor.metric {
        // (1-u)(W_g/fg + B_m/fm) - u c/fc = u g0
        UtilMetric::Gpu => (
            [-u / fc, (1.0 - u) / fg, (1.0 - u) / fm, 0.0],
            u * fit.gap_ms,
        ),
        // ((1-σ)c + W_h)/fc - u (c/fc + W_g/fg + B_m/fm) = u g0
        UtilMetric::Cpu => (
            [((1.0 - fit.gap_share) - u) / fc, -u / fg, -u / fm, 1.0 / fc],
            u * fit.gap_ms,
        ),
    }
}

fn fit_phase(kind: PhaseKind, anchors: &[&Anchor], fit: &PhaseFit) -> Result<PhaseParams> {
    let m = tie_matrix(anchors.len(), fit)?;
    let mut a = DMatrix::zeros(anchors.len(), 4);
    let mut b = DVector::zeros(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let (row, rhs) = anchor_row(anchor, fit);
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
        b[i] = rhs;
    }
    let reduced = &a * &m;
    let z = reduced
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidParams(format!("anchor system is singular: {e}")))?;
    let xv = &m * z;
    let mut x = [xv[0], xv[1], xv[2], xv[3]];

    let phase = anchor_phase(fit, kind);
    let sse = |x: &[f64; 4]| -> f64 {
        let p = to_params(x, fit);
        anchors
            .iter()
            .map(|a| residual(a, &phase, &p).powi(2))
            .sum()
    };

    let direct_ok = x.iter().all(|v| *v >= 0.0) && x[1] > 0.0 && {
        // linearization assumed the host term does not bind
        let p = to_params(&x, fit);
        anchors.iter().all(|a| {
            let t = crate::model::kernel_times(&a.cfg(), &phase, &p);
            t.host <= t.exec + t.gap
        })
    };
    if !direct_ok {
        x = coordinate_descent(x, sse);
    }
    Ok(to_params(&x, fit))
}

/// Non-negative coordinate descent on the squared residual.
fn coordinate_descent(start: [f64; 4], sse: impl Fn(&[f64; 4]) -> f64) -> [f64; 4] {
    let scale = start.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut x = start.map(|v| v.max(0.0));
    if x[1] <= 0.0 {
        x[1] = scale;
    }
    let mut best = sse(&x);
    let mut step = [scale * 0.25; 4];
    for _ in 0..DESCENT_MAX_ITERS {
        let mut improved = false;
        for j in 0..4 {
            for dir in [1.0, -1.0] {
                let mut cand = x;
                cand[j] = (cand[j] + dir * step[j]).max(0.0);
                if j == 1 && cand[j] <= 0.0 {
                    continue;
                }
                let v = sse(&cand);
                if v < best {
                    best = v;
                    x = cand;
                    step[j] *= 1.5;
                    improved = true;
                    break;
                }
            }
            if !improved {
                step[j] *= 0.5;
            }
        }
        if best < DESCENT_TOL * DESCENT_TOL || step.iter().all(|s| *s < DESCENT_TOL * scale) {
            break;
        }
    }
    x
}

/// Fits per-phase work constants to utilization anchors.
///
/// The anchor equations are linear in (W_c + G_c, W_g, B_m, W_h) once g0 is fixed, so
/// a least-squares solve is used directly; if that yields a negative constant the fit
/// falls back to coordinate descent.
pub fn calibrate_from_targets(anchors: &[Anchor], fit: &FitParams) -> Result<CalibrationFit> {
    let mut phases = Vec::new();
    for kind in [PhaseKind::Prefill, PhaseKind::Decode] {
        let these: Vec<&Anchor> = anchors.iter().filter(|a| a.phase == kind).collect();
        phases.push(fit_phase(kind, &these, fit.phase(kind))?);
    }
    let params = PerfModelParams {
        prefill: phases[0],
        decode: phases[1],
    };
    let residuals = anchors
        .iter()
        .map(|a| {
            let f = fit.phase(a.phase);
            residual(a, &anchor_phase(f, a.phase), params.phase(a.phase))
        })
        .collect();
    let result = CalibrationFit { params, residuals };
    let worst = result.max_residual();
    if worst > INFEASIBLE_RESIDUAL {
        return Err(Error::CalibrationInfeasible {
            residual: worst,
            limit: INFEASIBLE_RESIDUAL,
        });
    }
    Ok(result)
}

/// Utilization of `anchor`'s metric under `cal` at the anchor's configuration.
pub fn simulated_anchor(cal: &Calibration, anchor: &Anchor) -> f64 {
    let f = cal.fit.phase(anchor.phase);
    anchor.value
        + residual(
            anchor,
            &anchor_phase(f, anchor.phase),
            cal.perf.phase(anchor.phase),
        )
}
