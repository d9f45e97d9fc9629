use fusesim::fuse::{lookup_config, FuseTable, TableEntry};
use fusesim::metrics::PhaseMetrics;
use fusesim::profiler::{load_profiles, pareto, save_profiles, sweep, Grid, ProfileSet};
use fusesim::replay::{
    compare_reports, load_requests, replay, replay_traced, save_requests, synthesize_requests,
    Policy,
};
use fusesim::sim::{run_phase, SimTrace};
use fusesim::{Calibration, Component, Mhz, OperatingPoint, PhaseKind};

#[test]
fn calibration_document_round_trip() {
    let cal = Calibration::default_pixel7();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cal.toml");
    cal.save(&path).unwrap();
    let back = Calibration::load(&path).unwrap();
    assert_eq!(back.hash(), cal.hash());
    assert_eq!(back.table.grid_size(), 2808);
}

#[test]
fn profiles_survive_csv_and_pareto_is_a_subset() {
    let cal = Calibration::default_pixel7();
    let phase = cal.decode(4).unwrap();
    let ps = sweep(&cal, &phase, &Grid::cpu_gpu(&cal.table), 2).unwrap();
    assert_eq!(ps.len(), 18 * 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    save_profiles(&ps, &path).unwrap();
    let back = load_profiles(&path).unwrap();
    assert_eq!(back, ps);
    back.check_calibration(&cal).unwrap();
    let front = pareto(&ps);
    assert!(!front.is_empty());
    assert!(front.iter().all(|e| ps.get(e.phase, e.point) == Some(e)));
    let mut merged = ProfileSet::new(ps.calib_hash.clone());
    merged.merge(front.clone()).unwrap();
    assert_eq!(merged, front);
}

#[test]
fn trace_csv_round_trip_preserves_metrics() {
    let cal = Calibration::default_pixel7();
    let phase = cal.decode(6).unwrap();
    let (trace, result) = run_phase(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let back = SimTrace::read_csv(phase, buf.as_slice()).unwrap();
    assert_eq!(back, trace);
    let m = PhaseMetrics::from_result(&result).unwrap();
    assert!(m.effective(Component::Gpu) >= 151.0 && m.effective(Component::Gpu) <= 848.0);
    assert_eq!(trace.records.last().unwrap().tokens_done, 6);
}

#[test]
fn replay_is_deterministic_and_self_comparison_is_unit() {
    let cal = Calibration::default_pixel7();
    let reqs = synthesize_requests(6, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    save_requests(&reqs, &path).unwrap();
    assert_eq!(load_requests(&path).unwrap(), reqs);

    let a = replay(&cal, &Policy::Gov, &reqs).unwrap();
    let (b, traces) = replay_traced(&cal, &Policy::Gov, &reqs).unwrap();
    assert_eq!(a, b);
    assert_eq!(traces.len(), 2 * reqs.len());
    let c = compare_reports(&a, &b).unwrap();
    assert_eq!((c.ttft, c.tpot, c.e2e, c.energy), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn max_pin_table_is_faster_than_governors() {
    let cal = Calibration::default_pixel7();
    let top = TableEntry {
        cpu: Mhz(2850),
        gpu: Mhz(848),
    };
    let table = FuseTable {
        model: cal.name.clone(),
        calib_hash: cal.hash(),
        prefill: [top; 5],
        decode: top,
        reports: vec![],
    };
    assert_eq!(
        lookup_config(&table, PhaseKind::Prefill, 300),
        OperatingPoint::cpu_gpu(Mhz(2850), Mhz(848))
    );
    let reqs = synthesize_requests(4, 1);
    let gov = replay(&cal, &Policy::Gov, &reqs).unwrap();
    let fast = replay(&cal, &Policy::Fuse(table), &reqs).unwrap();
    let c = compare_reports(&gov, &fast).unwrap();
    assert!(c.tpot < 1.0 && c.ttft < 1.0);
}
