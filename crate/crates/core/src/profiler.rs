//! Brute-force sweeps, profile persistence, and the Pin-Opt oracle.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::freq::{FrequencyTable, Mhz, OperatingPoint, Setting};
use crate::metrics::PhaseMetrics;
use crate::model::{PhaseKind, PhaseSpec};
use crate::sim::run_phase_summary;

pub const PROFILE_HEADER: [&str; 10] = [
    "phase_kind",
    "n_p",
    "n_d",
    "f_cpu",
    "f_gpu",
    "f_mem_or_default",
    "latency_ms",
    "energy_mj_per_token",
    "avg_power_mw",
    "calib_hash",
];

/// Identifies a phase independently of its kernel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseKey {
    pub kind: PhaseKind,
    pub n_p: u32,
    pub n_d: u32,
}

impl From<&PhaseSpec> for PhaseKey {
    fn from(p: &PhaseSpec) -> Self {
        PhaseKey {
            kind: p.kind,
            n_p: p.prompt_tokens,
            n_d: p.decode_tokens,
        }
    }
}

impl fmt::Display for PhaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PhaseKind::Prefill => write!(f, "prefill[{}]", self.n_p),
            PhaseKind::Decode => write!(f, "decode[{}]", self.n_d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub phase: PhaseKey,
    pub point: OperatingPoint,
    /// TTFT for prefill, TPOT for decode.
    pub latency_ms: f64,
    pub energy_per_token_mj: f64,
    pub avg_power_mw: f64,
}

/// One measured inference at `point`.
pub fn measure(
    cal: &Calibration,
    point: OperatingPoint,
    phase: &PhaseSpec,
) -> Result<ProfileEntry> {
    let r = run_phase_summary(cal, point, phase).map_err(|e| e.at_point(point))?;
    let m = PhaseMetrics::from_result(&r).map_err(|e| e.at_point(point))?;
    Ok(ProfileEntry {
        phase: phase.into(),
        point,
        latency_ms: m.latency_ms,
        energy_per_token_mj: m.energy_per_token_mj,
        avg_power_mw: m.avg_power_mw,
    })
}

/// Measured profiles from one calibration, keyed by phase and operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub calib_hash: String,
    pub entries: BTreeMap<(PhaseKey, OperatingPoint), ProfileEntry>,
}

impl ProfileSet {
    pub fn new(calib_hash: impl Into<String>) -> Self {
        ProfileSet {
            calib_hash: calib_hash.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, e: ProfileEntry) {
        self.entries.insert((e.phase, e.point), e);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.values()
    }

    pub fn get(&self, phase: PhaseKey, point: OperatingPoint) -> Option<&ProfileEntry> {
        self.entries.get(&(phase, point))
    }

    pub fn for_phase(&self, phase: PhaseKey) -> ProfileSet {
        ProfileSet {
            calib_hash: self.calib_hash.clone(),
            entries: self
                .entries
                .iter()
                .filter(|((k, _), _)| *k == phase)
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }

    /// Adds all entries of `other`; both sets must come from the same calibration.
    pub fn merge(&mut self, other: ProfileSet) -> Result<()> {
        if other.calib_hash != self.calib_hash {
            return Err(Error::CalibrationMismatch {
                ours: self.calib_hash.clone(),
                theirs: other.calib_hash,
            });
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn check_calibration(&self, cal: &Calibration) -> Result<()> {
        let ours = cal.hash();
        if ours != self.calib_hash {
            return Err(Error::CalibrationMismatch {
                ours,
                theirs: self.calib_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn pin_opt(&self, constraint: Constraint) -> Result<ProfileEntry> {
        pin_opt(self.iter(), constraint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_profiles(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_profiles(path)
    }
}

/// Operating points to sweep, one list of settings per component.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub cpu: Vec<Setting>,
    pub gpu: Vec<Setting>,
    pub mem: Vec<Setting>,
}

impl Grid {
    pub fn full(table: &FrequencyTable) -> Self {
        let pins = |xs: &[Mhz]| xs.iter().map(|&f| Setting::Pin(f)).collect();
        Grid {
            cpu: pins(table.cpu()),
            gpu: pins(table.gpu()),
            mem: pins(table.mem()),
        }
    }

    /// CPU × GPU pinned with memory under its governor.
    pub fn cpu_gpu(table: &FrequencyTable) -> Self {
        Grid {
            mem: vec![Setting::Governor],
            ..Grid::full(table)
        }
    }

    pub fn points(&self) -> Vec<OperatingPoint> {
        let mut out = Vec::with_capacity(self.cpu.len() * self.gpu.len() * self.mem.len());
        for &cpu in &self.cpu {
            for &gpu in &self.gpu {
                for &mem in &self.mem {
                    out.push(OperatingPoint { cpu, gpu, mem });
                }
            }
        }
        out
    }
}

/// One run per grid point. `workers = 0` uses rayon's default pool size.
pub fn sweep(
    cal: &Calibration,
    phase: &PhaseSpec,
    grid: &Grid,
    workers: usize,
) -> Result<ProfileSet> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Empty("sweep grid".into()));
    }
    for p in &points {
        p.validate(&cal.table).map_err(|e| e.at_point(p))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParams(format!("worker pool: {e}")))?;
    let results: Vec<Result<ProfileEntry>> =
        pool.install(|| points.par_iter().map(|&p| measure(cal, p, phase)).collect());
    let mut set = ProfileSet::new(cal.hash());
    for r in results {
        set.insert(r?);
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// mJ per token.
    EnergyBudget(f64),
    /// ms (TTFT or TPOT).
    LatencyTarget(f64),
}

fn point_key(e: &ProfileEntry) -> (Setting, Setting, Setting) {
    (e.point.gpu, e.point.cpu, e.point.mem)
}

/// Order for the energy-budget goal: latency, then energy, gpu, cpu, mem.
pub fn latency_first(a: &ProfileEntry, b: &ProfileEntry) -> Ordering {
    a.latency_ms
        .total_cmp(&b.latency_ms)
        .then(a.energy_per_token_mj.total_cmp(&b.energy_per_token_mj))
        .then(point_key(a).cmp(&point_key(b)))
}

/// Order for the latency-target goal: energy, then latency, gpu, cpu, mem.
pub fn energy_first(a: &ProfileEntry, b: &ProfileEntry) -> Ordering {
    a.energy_per_token_mj
        .total_cmp(&b.energy_per_token_mj)
        .then(a.latency_ms.total_cmp(&b.latency_ms))
        .then(point_key(a).cmp(&point_key(b)))
}

impl Constraint {
    pub fn admits(&self, e: &ProfileEntry) -> bool {
        match *self {
            Constraint::EnergyBudget(b) => e.energy_per_token_mj <= b,
            Constraint::LatencyTarget(t) => e.latency_ms <= t,
        }
    }

    pub fn order(&self) -> fn(&ProfileEntry, &ProfileEntry) -> Ordering {
        match self {
            Constraint::EnergyBudget(_) => latency_first,
            Constraint::LatencyTarget(_) => energy_first,
        }
    }
}

/// The best constraint-satisfying entry.
pub fn pin_opt<'a>(
    entries: impl IntoIterator<Item = &'a ProfileEntry>,
    constraint: Constraint,
) -> Result<ProfileEntry> {
    let order = constraint.order();
    entries
        .into_iter()
        .filter(|e| constraint.admits(e))
        .min_by(|a, b| order(a, b))
        .copied()
        .ok_or(Error::Infeasible)
}

fn dominates(a: &ProfileEntry, b: &ProfileEntry) -> bool {
    a.latency_ms <= b.latency_ms
        && a.energy_per_token_mj <= b.energy_per_token_mj
        && (a.latency_ms < b.latency_ms || a.energy_per_token_mj < b.energy_per_token_mj)
}

/// Entries not dominated in (latency, energy per token).
pub fn pareto(ps: &ProfileSet) -> ProfileSet {
    let mut sorted: Vec<&ProfileEntry> = ps.iter().collect();
    sorted.sort_by(|a, b| latency_first(a, b));
    let mut front = ProfileSet::new(ps.calib_hash.clone());
    let mut best_energy = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // entries with equal latency are judged together
        let lat = sorted[i].latency_ms;
        let mut j = i;
        while j < sorted.len() && sorted[j].latency_ms == lat {
            j += 1;
        }
        let group_min = sorted[i].energy_per_token_mj;
        if group_min < best_energy {
            for e in &sorted[i..j] {
                if e.energy_per_token_mj == group_min {
                    front.insert(**e);
                }
            }
            best_energy = group_min;
        }
        i = j;
    }
    debug_assert!(front.iter().all(|a| ps.iter().all(|b| !dominates(b, a))));
    front
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    phase_kind: PhaseKind,
    n_p: u32,
    n_d: u32,
    f_cpu: String,
    f_gpu: String,
    f_mem_or_default: String,
    latency_ms: f64,
    energy_mj_per_token: f64,
    avg_power_mw: f64,
    calib_hash: String,
}

fn setting_cell(s: Setting) -> String {
    match s {
        Setting::Pin(f) => f.0.to_string(),
        Setting::Governor => "default".into(),
    }
}

pub fn save_profiles(ps: &ProfileSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if ps.is_empty() {
        w.write_record(PROFILE_HEADER)?;
    }
    for e in ps.iter() {
        w.serialize(ProfileRow {
            phase_kind: e.phase.kind,
            n_p: e.phase.n_p,
            n_d: e.phase.n_d,
            f_cpu: setting_cell(e.point.cpu),
            f_gpu: setting_cell(e.point.gpu),
            f_mem_or_default: setting_cell(e.point.mem),
            latency_ms: e.latency_ms,
            energy_mj_per_token: e.energy_per_token_mj,
            avg_power_mw: e.avg_power_mw,
            calib_hash: ps.calib_hash.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet> {
    let path = path.as_ref();
    let schema = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Empty(format!("{}", path.display())));
    }
    if header.iter().ne(PROFILE_HEADER) {
        return Err(schema(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut set: Option<ProfileSet> = None;
    for (i, row) in rdr.deserialize::<ProfileRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let parse = |s: &str| {
            s.parse::<Setting>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })
        };
        let entry = ProfileEntry {
            phase: PhaseKey {
                kind: row.phase_kind,
                n_p: row.n_p,
                n_d: row.n_d,
            },
            point: OperatingPoint {
                cpu: parse(&row.f_cpu)?,
                gpu: parse(&row.f_gpu)?,
                mem: parse(&row.f_mem_or_default)?,
            },
            latency_ms: row.latency_ms,
            energy_per_token_mj: row.energy_mj_per_token,
            avg_power_mw: row.avg_power_mw,
        };
        let set = set.get_or_insert_with(|| ProfileSet::new(row.calib_hash.clone()));
        if set.calib_hash != row.calib_hash {
            return Err(Error::CalibrationMismatch {
                ours: set.calib_hash.clone(),
                theirs: row.calib_hash,
            });
        }
        if set.get(entry.phase, entry.point).is_some() {
            return Err(schema(format!("duplicate entry at line {line}")));
        }
        set.insert(entry);
    }
    set.ok_or_else(|| Error::Empty(format!("{} has no profile rows", path.display())))
}
