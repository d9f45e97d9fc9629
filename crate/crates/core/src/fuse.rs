//! Two-step offline frequency search and the runtime configuration table.
//!
//! Step 1 walks the GPU list downward with the CPU and memory left to their
//! governors. Step 2 pins each Step-1 candidate GPU frequency and walks the CPU list
//! downward with memory governed.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::freq::{Mhz, OperatingPoint};
use crate::model::{PhaseKind, PhaseSpec};
use crate::profiler::{energy_first, latency_first, measure, ProfileEntry};

/// Decode length used for the decode setting's search.
pub const DECODE_REPRESENTATIVE: u32 = 32;
/// Representative prefill lengths, one per bucket.
pub const PREFILL_REPRESENTATIVES: [u32; 5] = [32, 64, 128, 256, 512];
/// Largest length in each bucket: the floor of the geometric midpoint of adjacent representatives.
const BUCKET_UPPER: [u32; 4] = [45, 90, 181, 362];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "goal", rename_all = "lowercase")]
pub enum SearchGoal {
    /// Minimize latency subject to mJ per token ≤ budget.
    G1 { energy_budget_mj: f64 },
    /// Minimize energy subject to latency ≤ target (TTFT or TPOT, ms).
    G2 { latency_target_ms: f64 },
}

impl SearchGoal {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            SearchGoal::G1 { energy_budget_mj } => energy_budget_mj,
            SearchGoal::G2 { latency_target_ms } => latency_target_ms,
        };
        if v.is_nan() || v <= 0.0 {
            return Err(Error::InvalidParams(format!("{self} must be positive")));
        }
        Ok(())
    }
}

impl fmt::Display for SearchGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchGoal::G1 { energy_budget_mj } => {
                write!(f, "G1(budget {energy_budget_mj} mJ/token)")
            }
            SearchGoal::G2 { latency_target_ms } => write!(f, "G2(target {latency_target_ms} ms)"),
        }
    }
}

/// Source of measured inferences for a search.
pub trait Evaluator {
    /// GPU frequencies, ascending.
    fn gpu_list(&self) -> Vec<Mhz>;
    /// CPU frequencies, ascending.
    fn cpu_list(&self) -> Vec<Mhz>;
    fn evaluate(&mut self, point: OperatingPoint) -> Result<ProfileEntry>;
}

/// Runs one simulated inference per evaluation.
#[derive(Debug, Clone)]
pub struct SimEvaluator<'a> {
    pub cal: &'a Calibration,
    pub phase: PhaseSpec,
}

impl<'a> SimEvaluator<'a> {
    pub fn new(cal: &'a Calibration, phase: PhaseSpec) -> Self {
        SimEvaluator { cal, phase }
    }
}

impl Evaluator for SimEvaluator<'_> {
    fn gpu_list(&self) -> Vec<Mhz> {
        self.cal.table.gpu().to_vec()
    }

    fn cpu_list(&self) -> Vec<Mhz> {
        self.cal.table.cpu().to_vec()
    }

    fn evaluate(&mut self, point: OperatingPoint) -> Result<ProfileEntry> {
        measure(self.cal, point, &self.phase)
    }
}

/// Caches another evaluator's results by operating point.
#[derive(Debug)]
pub struct Memo<E> {
    pub inner: E,
    cache: HashMap<OperatingPoint, ProfileEntry>,
}

impl<E: Evaluator> Memo<E> {
    pub fn new(inner: E) -> Self {
        Memo {
            inner,
            cache: HashMap::new(),
        }
    }
}

impl<E: Evaluator> Evaluator for Memo<E> {
    fn gpu_list(&self) -> Vec<Mhz> {
        self.inner.gpu_list()
    }

    fn cpu_list(&self) -> Vec<Mhz> {
        self.inner.cpu_list()
    }

    fn evaluate(&mut self, point: OperatingPoint) -> Result<ProfileEntry> {
        if let Some(e) = self.cache.get(&point) {
            return Ok(*e);
        }
        let e = self.inner.evaluate(point)?;
        self.cache.insert(point, e);
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub goal: SearchGoal,
    pub chosen: ProfileEntry,
    /// Step-1 GPU candidates, highest first.
    pub candidates: Vec<Mhz>,
    pub step1: Vec<ProfileEntry>,
    pub step2: Vec<ProfileEntry>,
}

impl SearchReport {
    pub fn inferences_step1(&self) -> usize {
        self.step1.len()
    }

    pub fn inferences_step2(&self) -> usize {
        self.step2.len()
    }

    pub fn inferences(&self) -> usize {
        self.step1.len() + self.step2.len()
    }

    pub fn point(&self) -> OperatingPoint {
        self.chosen.point
    }
}

/// Minimizes latency subject to an energy-per-token budget.
pub fn search_g1(eval: &mut impl Evaluator, budget_mj: f64) -> Result<SearchReport> {
    let goal = SearchGoal::G1 {
        energy_budget_mj: budget_mj,
    };
    goal.validate()?;
    let gpus = eval.gpu_list();
    let cpus = eval.cpu_list();

    let mut step1 = Vec::new();
    let mut found = None;
    for (i, &g) in gpus.iter().enumerate().rev() {
        let e = eval.evaluate(OperatingPoint::gpu_only(g))?;
        step1.push(e);
        if e.energy_per_token_mj <= budget_mj {
            found = Some(i);
            break;
        }
    }
    let i = found.ok_or(Error::BudgetInfeasible { budget_mj })?;
    let mut candidates = vec![gpus[i]];
    if let Some(&above) = gpus.get(i + 1) {
        candidates.insert(0, above);
    }

    let mut step2 = Vec::new();
    let mut best: Option<ProfileEntry> = None;
    for &g in &candidates {
        for &c in cpus.iter().rev() {
            let e = eval.evaluate(OperatingPoint::cpu_gpu(c, g))?;
            step2.push(e);
            if e.energy_per_token_mj <= budget_mj {
                if best.is_none_or(|b| latency_first(&e, &b).is_lt()) {
                    best = Some(e);
                }
                break;
            }
        }
    }
    let chosen = best.ok_or(Error::BudgetInfeasible { budget_mj })?;
    Ok(SearchReport {
        goal,
        chosen,
        candidates,
        step1,
        step2,
    })
}

/// Minimizes energy per token subject to a latency target.
///
/// Step 2 also stops a CPU walk once energy rises; on a quasi-convex CPU curve every
/// lower frequency is then worse than one already seen.
pub fn search_g2(eval: &mut impl Evaluator, target_ms: f64) -> Result<SearchReport> {
    let goal = SearchGoal::G2 {
        latency_target_ms: target_ms,
    };
    goal.validate()?;
    let gpus = eval.gpu_list();
    let cpus = eval.cpu_list();

    // descending; stops one past the minimum-energy frequency
    let mut step1: Vec<ProfileEntry> = Vec::new();
    let mut walk: Vec<(Mhz, ProfileEntry)> = Vec::new();
    for &g in gpus.iter().rev() {
        let e = eval.evaluate(OperatingPoint::gpu_only(g))?;
        step1.push(e);
        let rising = walk
            .last()
            .is_some_and(|(_, prev)| e.energy_per_token_mj > prev.energy_per_token_mj);
        if rising {
            break;
        }
        walk.push((g, e));
    }
    let (g_min, at_min) = *walk.last().expect("GPU list is non-empty");
    let candidates = if target_ms >= at_min.latency_ms {
        vec![g_min]
    } else {
        walk.windows(2)
            .find(|w| w[0].1.latency_ms <= target_ms && target_ms < w[1].1.latency_ms)
            .map(|w| vec![w[0].0, w[1].0])
            .unwrap_or_else(|| vec![walk[0].0])
    };

    let mut step2 = Vec::new();
    let mut best: Option<ProfileEntry> = None;
    for &g in &candidates {
        let mut prev: Option<f64> = None;
        for &c in cpus.iter().rev() {
            let e = eval.evaluate(OperatingPoint::cpu_gpu(c, g))?;
            step2.push(e);
            if e.latency_ms > target_ms {
                break;
            }
            if best.is_none_or(|b| energy_first(&e, &b).is_lt()) {
                best = Some(e);
            }
            if prev.is_some_and(|p| e.energy_per_token_mj > p) {
                break;
            }
            prev = Some(e.energy_per_token_mj);
        }
    }
    let chosen = best.ok_or(Error::TargetInfeasible { target_ms })?;
    Ok(SearchReport {
        goal,
        chosen,
        candidates,
        step1,
        step2,
    })
}

pub fn search(eval: &mut impl Evaluator, goal: SearchGoal) -> Result<SearchReport> {
    match goal {
        SearchGoal::G1 { energy_budget_mj } => search_g1(eval, energy_budget_mj),
        SearchGoal::G2 { latency_target_ms } => search_g2(eval, latency_target_ms),
    }
}

/// Bucket index and representative length for a prompt of `n_p` tokens.
pub fn bucket_prefill_length(n_p: u32) -> (usize, u32) {
    let i = BUCKET_UPPER
        .iter()
        .position(|&u| n_p <= u)
        .unwrap_or(BUCKET_UPPER.len());
    (i, PREFILL_REPRESENTATIVES[i])
}

/// One of the six settings a table is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TableSetting {
    Prefill(usize),
    Decode,
}

impl TableSetting {
    pub const ALL: [TableSetting; 6] = [
        TableSetting::Prefill(0),
        TableSetting::Prefill(1),
        TableSetting::Prefill(2),
        TableSetting::Prefill(3),
        TableSetting::Prefill(4),
        TableSetting::Decode,
    ];

    /// The phase a search for this setting measures.
    pub fn phase(&self, cal: &Calibration) -> Result<PhaseSpec> {
        match *self {
            TableSetting::Prefill(i) => cal.prefill(PREFILL_REPRESENTATIVES[i]),
            TableSetting::Decode => cal.decode(DECODE_REPRESENTATIVE),
        }
    }
}

impl fmt::Display for TableSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableSetting::Prefill(i) => write!(f, "prefill-{}", PREFILL_REPRESENTATIVES[*i]),
            TableSetting::Decode => write!(f, "decode-{DECODE_REPRESENTATIVE}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub cpu: Mhz,
    pub gpu: Mhz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: String,
    pub goal: SearchGoal,
    pub cpu: Mhz,
    pub gpu: Mhz,
    pub latency_ms: f64,
    pub energy_per_token_mj: f64,
    pub inferences_step1: usize,
    pub inferences_step2: usize,
}

/// Runtime lookup table: five prefill buckets and one decode entry, memory governed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseTable {
    pub model: String,
    pub calib_hash: String,
    pub prefill: [TableEntry; 5],
    pub decode: TableEntry,
    pub reports: Vec<SettingReport>,
}

impl FuseTable {
    pub fn entry(&self, s: TableSetting) -> TableEntry {
        match s {
            TableSetting::Prefill(i) => self.prefill[i],
            TableSetting::Decode => self.decode,
        }
    }

    pub fn total_inferences(&self) -> (usize, usize) {
        self.reports.iter().fold((0, 0), |(a, b), r| {
            (a + r.inferences_step1, b + r.inferences_step2)
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        Ok(toml::from_str(doc)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self, cal: &Calibration) -> Result<()> {
        use crate::freq::Component;
        for e in self.prefill.iter().chain([&self.decode]) {
            cal.table.check(Component::Cpu, e.cpu)?;
            cal.table.check(Component::Gpu, e.gpu)?;
        }
        Ok(())
    }
}

/// Searches all six settings. `goal_for` supplies each setting's goal.
pub fn build_config_table(
    cal: &Calibration,
    mut goal_for: impl FnMut(TableSetting) -> Result<SearchGoal>,
) -> Result<(FuseTable, Vec<SearchReport>)> {
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for s in TableSetting::ALL {
        let wrap = |e: Error| Error::Setting {
            setting: s.to_string(),
            source: Box::new(e),
        };
        let goal = goal_for(s).map_err(wrap)?;
        let phase = s.phase(cal).map_err(wrap)?;
        let mut eval = SimEvaluator::new(cal, phase);
        let r = search(&mut eval, goal).map_err(wrap)?;
        let (cpu, gpu) = pinned_pair(&r.chosen.point);
        summaries.push(SettingReport {
            setting: s.to_string(),
            goal,
            cpu,
            gpu,
            latency_ms: r.chosen.latency_ms,
            energy_per_token_mj: r.chosen.energy_per_token_mj,
            inferences_step1: r.inferences_step1(),
            inferences_step2: r.inferences_step2(),
        });
        reports.push(r);
    }
    let entry = |r: &SettingReport| TableEntry {
        cpu: r.cpu,
        gpu: r.gpu,
    };
    let table = FuseTable {
        model: cal.name.clone(),
        calib_hash: cal.hash(),
        prefill: std::array::from_fn(|i| entry(&summaries[i])),
        decode: entry(&summaries[5]),
        reports: summaries,
    };
    Ok((table, reports))
}

fn pinned_pair(p: &OperatingPoint) -> (Mhz, Mhz) {
    match (p.cpu.pinned(), p.gpu.pinned()) {
        (Some(c), Some(g)) => (c, g),
        _ => unreachable!("searches only return CPU/GPU-pinned points"),
    }
}

/// Operating point for a phase at runtime: the table's pins with memory governed.
pub fn lookup_config(table: &FuseTable, kind: PhaseKind, n_p: u32) -> OperatingPoint {
    let e = match kind {
        PhaseKind::Decode => table.decode,
        PhaseKind::Prefill => table.prefill[bucket_prefill_length(n_p).0],
    };
    OperatingPoint::cpu_gpu(e.cpu, e.gpu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freq::Setting;
    use crate::profiler::PhaseKey;

    /// 4-step GPU ladder; CPU-pinned energy grows with CPU frequency, latency falls.
    struct Ladder {
        calls: usize,
    }

    const GPUS: [u32; 4] = [400, 500, 600, 700];
    const CPUS: [u32; 3] = [1000, 2000, 3000];

    fn step1(g: u32) -> (f64, f64) {
        match g {
            700 => (130.0, 410.0),
            600 => (150.0, 395.0),
            500 => (175.0, 388.0),
            400 => (210.0, 392.0),
            _ => unreachable!(),
        }
    }

    fn pinned(c: u32, g: u32) -> (f64, f64) {
        let (l, e) = step1(g);
        let k = f64::from(c) / 1000.0;
        (l - 4.0 * k, e - 12.0 + 4.0 * k)
    }

    impl Evaluator for Ladder {
        fn gpu_list(&self) -> Vec<Mhz> {
            GPUS.map(Mhz).to_vec()
        }
        fn cpu_list(&self) -> Vec<Mhz> {
            CPUS.map(Mhz).to_vec()
        }
        fn evaluate(&mut self, point: OperatingPoint) -> Result<ProfileEntry> {
            self.calls += 1;
            let g = point.gpu.pinned().unwrap().0;
            let (l, e) = match point.cpu {
                Setting::Governor => step1(g),
                Setting::Pin(c) => pinned(c.0, g),
            };
            Ok(ProfileEntry {
                phase: PhaseKey {
                    kind: PhaseKind::Decode,
                    n_p: 0,
                    n_d: 1,
                },
                point,
                latency_ms: l,
                energy_per_token_mj: e,
                avg_power_mw: 1000.0 * e / l,
            })
        }
    }

    fn grid_oracle(keep: impl Fn(f64, f64) -> bool, score: impl Fn(f64, f64) -> f64) -> f64 {
        let mut best = f64::INFINITY;
        for g in GPUS {
            for c in CPUS {
                let (l, e) = pinned(c, g);
                if keep(l, e) {
                    best = best.min(score(l, e));
                }
            }
        }
        best
    }

    #[test]
    fn g1_ladder() {
        let mut ev = Ladder { calls: 0 };
        let r = search_g1(&mut ev, 396.0).unwrap();
        assert_eq!(r.step1.len(), 2);
        assert_eq!(r.candidates, vec![Mhz(700), Mhz(600)]);
        assert!(r.chosen.energy_per_token_mj <= 396.0);
        let oracle = grid_oracle(|_, e| e <= 396.0, |l, _| l);
        assert_eq!(r.chosen.latency_ms, oracle);
        assert_eq!(ev.calls, r.inferences());

        let r = search_g1(&mut Ladder { calls: 0 }, 500.0).unwrap();
        assert_eq!(r.step1.len(), 1);
        assert_eq!(r.candidates, vec![Mhz(700)]);

        assert!(matches!(
            search_g1(&mut Ladder { calls: 0 }, 100.0),
            Err(Error::BudgetInfeasible { .. })
        ));
    }

    #[test]
    fn g2_ladder() {
        let r = search_g2(&mut Ladder { calls: 0 }, 200.0).unwrap();
        // energies rise at 400, so 500 is the minimum-energy frequency
        assert_eq!(r.step1.len(), 4);
        assert_eq!(r.candidates, vec![Mhz(500)]);
        assert_eq!(
            r.chosen.energy_per_token_mj,
            grid_oracle(|l, _| l <= 200.0, |_, e| e)
        );

        let r = search_g2(&mut Ladder { calls: 0 }, 160.0).unwrap();
        assert_eq!(r.candidates, vec![Mhz(600), Mhz(500)]);
        assert!(r.chosen.latency_ms <= 160.0);
        assert_eq!(
            r.chosen.energy_per_token_mj,
            grid_oracle(|l, _| l <= 160.0, |_, e| e)
        );

        assert!(matches!(
            search_g2(&mut Ladder { calls: 0 }, 50.0),
            Err(Error::TargetInfeasible { .. })
        ));
    }

    #[test]
    fn bucket_bounds_are_geometric_midpoints() {
        for (i, &u) in BUCKET_UPPER.iter().enumerate() {
            let (a, b) = (
                PREFILL_REPRESENTATIVES[i] as f64,
                PREFILL_REPRESENTATIVES[i + 1] as f64,
            );
            assert_eq!(u, (a * b).sqrt().floor() as u32);
        }
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_prefill_length(32), (0, 32));
        assert_eq!(bucket_prefill_length(1), (0, 32));
        assert_eq!(bucket_prefill_length(45), (0, 32));
        assert_eq!(bucket_prefill_length(46), (1, 64));
        assert_eq!(bucket_prefill_length(100), (2, 128));
        assert_eq!(bucket_prefill_length(200), (3, 256));
        assert_eq!(bucket_prefill_length(362), (3, 256));
        assert_eq!(bucket_prefill_length(363), (4, 512));
        assert_eq!(bucket_prefill_length(512), (4, 512));
        assert_eq!(bucket_prefill_length(10_000), (4, 512));
    }

    fn sample_table() -> FuseTable {
        let e = |c, g| TableEntry {
            cpu: Mhz(c),
            gpu: Mhz(g),
        };
        FuseTable {
            model: "m".into(),
            calib_hash: "h".into(),
            prefill: [
                e(2850, 848),
                e(2802, 848),
                e(2704, 762),
                e(2630, 701),
                e(2507, 572),
            ],
            decode: e(2188, 471),
            reports: Vec::new(),
        }
    }

    #[test]
    fn lookup() {
        let t = sample_table();
        assert_eq!(
            lookup_config(&t, PhaseKind::Prefill, 200),
            OperatingPoint::cpu_gpu(Mhz(2630), Mhz(701))
        );
        assert_eq!(
            lookup_config(&t, PhaseKind::Prefill, 1),
            OperatingPoint::cpu_gpu(Mhz(2850), Mhz(848))
        );
        assert_eq!(
            lookup_config(&t, PhaseKind::Decode, 0),
            OperatingPoint::cpu_gpu(Mhz(2188), Mhz(471))
        );
        assert_eq!(FuseTable::from_toml(&t.to_toml().unwrap()).unwrap(), t);
    }

    #[test]
    fn memo_counts_once() {
        let mut m = Memo::new(Ladder { calls: 0 });
        let p = OperatingPoint::gpu_only(Mhz(600));
        let a = m.evaluate(p).unwrap();
        assert_eq!(m.evaluate(p).unwrap(), a);
        assert_eq!(m.inner.calls, 1);
    }
}
