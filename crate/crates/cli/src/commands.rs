use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fusesim::calibration::simulated_anchor;
use fusesim::fuse::{
    build_config_table, search, FuseTable, SearchGoal, SearchReport, SimEvaluator,
};
use fusesim::metrics::PhaseMetrics;
use fusesim::profiler::{
    load_profiles, measure, pareto, save_profiles, sweep, Constraint, Grid, PhaseKey, ProfileEntry,
    ProfileSet,
};
use fusesim::replay::{
    compare_reports, load_requests, replay, save_requests, synthesize_requests, Policy,
    ReplayReport,
};
use fusesim::sim::{run_scenario, PhaseResult, Scenario};
use fusesim::{Calibration, Component, Mhz, OperatingPoint, PhaseKind, PhaseSpec, Setting};
use serde::Serialize;

use crate::*;

pub(crate) fn run(command: &Command, out: &Path) -> CliResult<RunOutput> {
    match command {
        Command::Simulate(a) => simulate(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
        Command::Search(a) => search_cmd(a, out),
        Command::Table(a) => table_cmd(a, out),
        Command::Replay(a) => replay_cmd(a, out),
        Command::Report(a) => report_cmd(a, out),
        Command::Calibrate(a) => calibrate_cmd(a, out),
        Command::Rerun(_) => unreachable!("rerun is resolved before dispatch"),
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Self {
        Outputs {
            dir,
            files: Vec::new(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(relative_to(self.dir, &p));
        p
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    fn csv<T: Serialize>(
        &mut self,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> CliResult<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(self, cal: &Calibration, seed: Option<u64>) -> RunOutput {
        RunOutput {
            calib_hash: cal.hash(),
            seed,
            artifacts: self.files,
        }
    }
}

fn phase_of(cal: &Calibration, p: &PhaseOpts) -> CliResult<PhaseSpec> {
    Ok(cal.phase(p.kind(), p.tokens())?)
}

fn gov_baseline(cal: &Calibration, phase: &PhaseSpec) -> fusesim::Result<ProfileEntry> {
    measure(cal, OperatingPoint::GOVERNED, phase)
}

/// The goal with its bound, measuring the governors when the bound is not given.
fn resolve_goal(
    cal: &Calibration,
    g: &GoalOpts,
    phase: &PhaseSpec,
) -> fusesim::Result<(SearchGoal, Option<ProfileEntry>)> {
    let given = match g.goal {
        GoalArg::G1 => g.budget_mj.map(|b| SearchGoal::G1 {
            energy_budget_mj: b,
        }),
        GoalArg::G2 => g.target_ms.map(|t| SearchGoal::G2 {
            latency_target_ms: t,
        }),
    };
    if let Some(goal) = given {
        return Ok((goal, None));
    }
    let gov = gov_baseline(cal, phase)?;
    let goal = match g.goal {
        GoalArg::G1 => SearchGoal::G1 {
            energy_budget_mj: gov.energy_per_token_mj,
        },
        GoalArg::G2 => SearchGoal::G2 {
            latency_target_ms: gov.latency_ms,
        },
    };
    Ok((goal, Some(gov)))
}

fn check_goal_flags(g: &GoalOpts) -> CliResult<()> {
    match (g.goal, g.budget_mj, g.target_ms) {
        (GoalArg::G1, _, Some(_)) => {
            Err(CliError::Usage("--target-ms applies to --goal g2".into()))
        }
        (GoalArg::G2, Some(_), _) => {
            Err(CliError::Usage("--budget-mj applies to --goal g1".into()))
        }
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    phase: &'a PhaseSpec,
    schedule: Vec<(u64, String)>,
    result: &'a PhaseResult,
    metrics: Option<PhaseMetrics>,
}

fn simulate(a: &SimulateArgs, out: &Path) -> CliResult<RunOutput> {
    let cal = load_calibration(&a.common)?;
    let mut phase_opts = a.phase.clone();
    let (first, unpin_at) = match a.spiral {
        Some(s) => {
            phase_opts.phase = PhaseArg::Decode;
            let first = match s {
                SpiralArg::Gpu => OperatingPoint {
                    gpu: Setting::Pin(cal.table.max(Component::Gpu)),
                    ..OperatingPoint::GOVERNED
                },
                SpiralArg::Cpu => OperatingPoint {
                    cpu: Setting::Pin(Mhz(2188)),
                    ..OperatingPoint::GOVERNED
                },
            };
            (first, Some(a.unpin_at.unwrap_or(250)))
        }
        None => (
            OperatingPoint {
                cpu: a.pin_cpu,
                gpu: a.pin_gpu,
                mem: a.pin_mem,
            },
            a.unpin_at,
        ),
    };
    first.validate(&cal.table)?;
    let phase = phase_of(&cal, &phase_opts)?;
    let mut sc = match unpin_at {
        Some(t) => Scenario::switch(phase, first, t, OperatingPoint::GOVERNED),
        None => Scenario::fixed(phase, first),
    };
    sc.max_ms = a.max_ms;
    let (trace, result) = run_scenario(&cal, &sc)?;
    let mut o = Outputs::new(out);
    trace.save_csv(o.path("trace.csv"))?;
    o.json(
        "summary.json",
        &SimulateSummary {
            phase: &phase,
            schedule: sc
                .schedule
                .iter()
                .map(|(t, p)| (*t, p.to_string()))
                .collect(),
            result: &result,
            metrics: PhaseMetrics::from_result(&result).ok(),
        },
    )?;
    Ok(o.finish(&cal, None))
}

fn sweep_cmd(a: &SweepArgs, out: &Path) -> CliResult<RunOutput> {
    let cal = load_calibration(&a.common)?;
    let phase = phase_of(&cal, &a.phase)?;
    let grid = match a.grid {
        GridArg::Full => Grid::full(&cal.table),
        GridArg::CpuGpu => Grid::cpu_gpu(&cal.table),
    };
    let ps = sweep(&cal, &phase, &grid, a.workers)?;
    let mut o = Outputs::new(out);
    save_profiles(&ps, o.path("profiles.csv"))?;
    Ok(o.finish(&cal, None))
}

#[derive(Serialize)]
struct EvalRow {
    step: u8,
    f_cpu: String,
    f_gpu: String,
    f_mem_or_default: String,
    latency_ms: f64,
    energy_mj_per_token: f64,
    avg_power_mw: f64,
}

fn eval_rows(r: &SearchReport) -> Vec<EvalRow> {
    let row = |step: u8, e: &ProfileEntry| EvalRow {
        step,
        f_cpu: e.point.cpu.to_string(),
        f_gpu: e.point.gpu.to_string(),
        f_mem_or_default: e.point.mem.to_string(),
        latency_ms: e.latency_ms,
        energy_mj_per_token: e.energy_per_token_mj,
        avg_power_mw: e.avg_power_mw,
    };
    r.step1
        .iter()
        .map(|e| row(1, e))
        .chain(r.step2.iter().map(|e| row(2, e)))
        .collect()
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    goal: SearchGoal,
    governor_baseline: Option<ProfileEntry>,
    chosen: String,
    inferences_step1: usize,
    inferences_step2: usize,
    report: &'a SearchReport,
}

fn search_cmd(a: &SearchArgs, out: &Path) -> CliResult<RunOutput> {
    check_goal_flags(&a.goal)?;
    let cal = load_calibration(&a.common)?;
    let phase = phase_of(&cal, &a.phase)?;
    let (goal, gov) = resolve_goal(&cal, &a.goal, &phase)?;
    let mut eval = SimEvaluator::new(&cal, phase);
    let report = search(&mut eval, goal)?;
    let mut o = Outputs::new(out);
    o.json(
        "search.json",
        &SearchSummary {
            goal,
            governor_baseline: gov,
            chosen: report.point().to_string(),
            inferences_step1: report.inferences_step1(),
            inferences_step2: report.inferences_step2(),
            report: &report,
        },
    )?;
    o.csv("evaluations.csv", eval_rows(&report))?;
    Ok(o.finish(&cal, None))
}

#[derive(Serialize)]
struct TableRow<'a> {
    setting: &'a str,
    goal: &'static str,
    bound: f64,
    f_cpu: u32,
    f_gpu: u32,
    latency_ms: f64,
    energy_mj_per_token: f64,
    inferences_step1: usize,
    inferences_step2: usize,
}

fn build_table(cal: &Calibration, g: &GoalOpts) -> CliResult<FuseTable> {
    check_goal_flags(g)?;
    let (table, _) = build_config_table(cal, |s| Ok(resolve_goal(cal, g, &s.phase(cal)?)?.0))?;
    Ok(table)
}

fn write_table(o: &mut Outputs, table: &FuseTable) -> CliResult<()> {
    table.save(o.path("fuse_table.toml"))?;
    o.csv(
        "table_report.csv",
        table.reports.iter().map(|r| {
            let (goal, bound) = match r.goal {
                SearchGoal::G1 { energy_budget_mj } => ("g1", energy_budget_mj),
                SearchGoal::G2 { latency_target_ms } => ("g2", latency_target_ms),
            };
            TableRow {
                setting: &r.setting,
                goal,
                bound,
                f_cpu: r.cpu.0,
                f_gpu: r.gpu.0,
                latency_ms: r.latency_ms,
                energy_mj_per_token: r.energy_per_token_mj,
                inferences_step1: r.inferences_step1,
                inferences_step2: r.inferences_step2,
            }
        }),
    )
}

fn table_cmd(a: &TableArgs, out: &Path) -> CliResult<RunOutput> {
    let cal = load_calibration(&a.common)?;
    let table = build_table(&cal, &a.goal)?;
    let mut o = Outputs::new(out);
    write_table(&mut o, &table)?;
    Ok(o.finish(&cal, None))
}

fn replay_cmd(a: &ReplayArgs, out: &Path) -> CliResult<RunOutput> {
    let cal = load_calibration(&a.common)?;
    let mut o = Outputs::new(out);
    let policy = match (a.policy, &a.table, a.goal) {
        (PolicyArg::Gov, None, None) => Policy::Gov,
        (PolicyArg::Gov, _, _) => {
            return Err(CliError::Usage(
                "--table and --goal need --policy fuse".into(),
            ))
        }
        (PolicyArg::Fuse, Some(path), None) => {
            let t = FuseTable::load(path)?;
            t.validate(&cal)?;
            if t.calib_hash != cal.hash() {
                return Err(fusesim::Error::CalibrationMismatch {
                    ours: cal.hash(),
                    theirs: t.calib_hash,
                }
                .into());
            }
            Policy::Fuse(t)
        }
        (PolicyArg::Fuse, None, Some(goal)) => {
            let opts = GoalOpts {
                goal,
                budget_mj: None,
                target_ms: None,
            };
            let t = build_table(&cal, &opts)?;
            write_table(&mut o, &t)?;
            Policy::Fuse(t)
        }
        (PolicyArg::Fuse, None, None) => {
            return Err(CliError::Usage(
                "--policy fuse needs --table or --goal".into(),
            ))
        }
        (PolicyArg::Fuse, Some(_), Some(_)) => unreachable!("clap rejects --table with --goal"),
    };
    let (requests, seed) = match &a.requests {
        Some(p) => (load_requests(p)?, None),
        None => {
            if a.n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            (synthesize_requests(a.n, a.seed), Some(a.seed))
        }
    };
    save_requests(&requests, o.path("requests.jsonl"))?;
    let report = replay(&cal, &policy, &requests)?;
    report.write_csv(o.path("replay.csv"))?;
    o.json("summary.json", &report.summary())?;
    Ok(o.finish(&cal, seed))
}

#[derive(Serialize)]
struct GovPinRow {
    phase: String,
    policy: &'static str,
    f_cpu: String,
    f_gpu: String,
    f_mem_or_default: String,
    latency_ms: Option<f64>,
    energy_mj_per_token: Option<f64>,
    latency_ratio: Option<f64>,
    energy_ratio: Option<f64>,
}

fn gov_pin_rows(cal: &Calibration, ps: &ProfileSet) -> CliResult<Vec<GovPinRow>> {
    let keys: BTreeSet<PhaseKey> = ps.iter().map(|e| e.phase).collect();
    let mut rows = Vec::new();
    for key in keys {
        let tokens = match key.kind {
            PhaseKind::Prefill => key.n_p,
            PhaseKind::Decode => key.n_d,
        };
        let gov = gov_baseline(cal, &cal.phase(key.kind, tokens)?)?;
        let sub = ps.for_phase(key);
        let row = |policy, e: Option<&ProfileEntry>| {
            let cell = |f: fn(&OperatingPoint) -> Setting| {
                e.map_or(String::new(), |e| f(&e.point).to_string())
            };
            GovPinRow {
                phase: key.to_string(),
                policy,
                f_cpu: cell(|p| p.cpu),
                f_gpu: cell(|p| p.gpu),
                f_mem_or_default: cell(|p| p.mem),
                latency_ms: e.map(|e| e.latency_ms),
                energy_mj_per_token: e.map(|e| e.energy_per_token_mj),
                latency_ratio: e.map(|e| e.latency_ms / gov.latency_ms),
                energy_ratio: e.map(|e| e.energy_per_token_mj / gov.energy_per_token_mj),
            }
        };
        rows.push(row("gov", Some(&gov)));
        for (policy, c) in [
            (
                "pin-opt-g1",
                Constraint::EnergyBudget(gov.energy_per_token_mj),
            ),
            ("pin-opt-g2", Constraint::LatencyTarget(gov.latency_ms)),
        ] {
            match sub.pin_opt(c) {
                Ok(e) => rows.push(row(policy, Some(&e))),
                Err(fusesim::Error::Infeasible) => rows.push(row(policy, None)),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct ComparisonRow {
    metric: &'static str,
    base: f64,
    other: f64,
    ratio: f64,
}

fn report_cmd(a: &ReportArgs, out: &Path) -> CliResult<RunOutput> {
    if a.profiles.is_none() && a.base.is_none() {
        return Err(CliError::Usage(
            "report needs --profiles or --base/--other".into(),
        ));
    }
    let cal = load_calibration(&a.common)?;
    let mut o = Outputs::new(out);
    if let Some(p) = &a.profiles {
        let ps = load_profiles(p)?;
        ps.check_calibration(&cal)?;
        let mut front = ProfileSet::new(ps.calib_hash.clone());
        let keys: BTreeSet<PhaseKey> = ps.iter().map(|e| e.phase).collect();
        for k in keys {
            front.merge(pareto(&ps.for_phase(k)))?;
        }
        save_profiles(&front, o.path("pareto.csv"))?;
        o.csv("gov_vs_pin.csv", gov_pin_rows(&cal, &ps)?)?;
    }
    if let (Some(b), Some(x)) = (&a.base, &a.other) {
        let base = ReplayReport::read_csv("base", b)?;
        let other = ReplayReport::read_csv("other", x)?;
        let c = compare_reports(&base, &other)?;
        let rows = [
            (
                "mean_ttft_ms",
                base.mean_ttft_ms(),
                other.mean_ttft_ms(),
                c.ttft,
            ),
            (
                "mean_tpot_ms",
                base.mean_tpot_ms(),
                other.mean_tpot_ms(),
                c.tpot,
            ),
            (
                "mean_e2e_ms",
                base.mean_e2e_ms(),
                other.mean_e2e_ms(),
                c.e2e,
            ),
            (
                "total_energy_mj",
                base.total_energy_mj(),
                other.total_energy_mj(),
                c.energy,
            ),
        ];
        o.csv(
            "comparison.csv",
            rows.into_iter()
                .map(|(metric, base, other, ratio)| ComparisonRow {
                    metric,
                    base,
                    other,
                    ratio,
                }),
        )?;
    }
    Ok(o.finish(&cal, None))
}

#[derive(Serialize)]
struct ResidualRow {
    phase: PhaseKind,
    f_cpu: u32,
    f_gpu: u32,
    f_mem: u32,
    metric: String,
    target: f64,
    simulated: f64,
    residual: f64,
}

fn calibrate_cmd(a: &CalibrateArgs, out: &Path) -> CliResult<RunOutput> {
    let input = load_calibration(&a.common)?;
    let fit = input.refit()?;
    let mut cal = input.clone();
    cal.perf = fit.params;
    let mut o = Outputs::new(out);
    cal.save(o.path("calibration.toml"))?;
    let rows: Vec<ResidualRow> = cal
        .anchors
        .iter()
        .map(|an| {
            let sim = simulated_anchor(&cal, an);
            ResidualRow {
                phase: an.phase,
                f_cpu: an.cpu,
                f_gpu: an.gpu,
                f_mem: an.mem,
                metric: an.metric.to_string(),
                target: an.value,
                simulated: sim,
                residual: sim - an.value,
            }
        })
        .collect();
    o.csv("residuals.csv", rows)?;
    Ok(o.finish(&input, None))
}
