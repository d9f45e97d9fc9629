use std::path::Path;
use std::process::Command;

use fusesim::fuse::{search_g1, SimEvaluator};
use fusesim::profiler::measure;
use fusesim::sim::{run_scenario, Scenario, SimTrace};
use fusesim::{Calibration, Mhz, OperatingPoint, Setting};
use fusesim_cli::RunManifest;

fn fusesim(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fusesim"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) {
    let (code, err) = fusesim(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

fn read_trace(dir: &Path, cal: &Calibration, tokens: u32) -> SimTrace {
    let f = std::fs::File::open(dir.join("trace.csv")).unwrap();
    SimTrace::read_csv(cal.decode(tokens).unwrap(), f).unwrap()
}

#[test]
fn pinned_simulation_completes_all_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "simulate",
        "--nd",
        "32",
        "--pin-cpu",
        "2850",
        "--pin-gpu",
        "848",
        "--pin-mem",
        "3172",
        "--out",
        out.to_str().unwrap(),
    ]);
    let cal = Calibration::default_pixel7();
    let trace = read_trace(&out, &cal, 32);
    assert_eq!(trace.records.last().unwrap().tokens_done, 32);
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.calib_hash, cal.hash());
    assert!(m.artifacts.iter().all(|a| out.join(a).exists()));
}

#[test]
fn invalid_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        fusesim(&["simulate", "--pin-gpu", "849", "--out", out]).0,
        2
    );
    assert_eq!(
        fusesim(&["simulate", "--pin-gpu", "fast", "--out", out]).0,
        2
    );
    assert_eq!(fusesim(&["simulate", "--bogus"]).0, 2);
    assert_eq!(
        fusesim(&["search", "--goal", "g2", "--budget-mj", "5", "--out", out]).0,
        2
    );
    assert_eq!(fusesim(&["report", "--out", out]).0, 2);
    assert_eq!(fusesim(&["--help"]).0, 0);
}

#[test]
fn error_classes_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(
        fusesim(&["search", "--goal", "g1", "--budget-mj", "1", "--out", out]).0,
        4
    );
    assert_eq!(
        fusesim(&["rerun", "--manifest", "/nonexistent/manifest.json"]).0,
        6
    );
    let cal = dir.path().join("cal.toml");
    std::fs::write(&cal, "not = [toml").unwrap();
    assert_eq!(
        fusesim(&["calibrate", "--calib", cal.to_str().unwrap(), "--out", out]).0,
        6
    );
}

#[test]
fn spiral_flag_matches_library_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spiral");
    ok(&[
        "simulate",
        "--spiral",
        "gpu",
        "--max-ms",
        "1200",
        "--out",
        out.to_str().unwrap(),
    ]);
    let cal = Calibration::default_pixel7();
    let first = OperatingPoint {
        gpu: Setting::Pin(Mhz(848)),
        ..OperatingPoint::GOVERNED
    };
    let mut sc = Scenario::switch(
        cal.decode(32).unwrap(),
        first,
        250,
        OperatingPoint::GOVERNED,
    );
    sc.max_ms = Some(1200);
    let (expected, _) = run_scenario(&cal, &sc).unwrap();
    assert_eq!(read_trace(&out, &cal, 32), expected);
}

#[test]
fn full_sweep_has_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--nd",
        "2",
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(out.join("profiles.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2808);
}

#[test]
fn search_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("search");
    ok(&[
        "search",
        "--goal",
        "g1",
        "--nd",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    let cal = Calibration::default_pixel7();
    let phase = cal.decode(16).unwrap();
    let gov = measure(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
    let want = search_g1(&mut SimEvaluator::new(&cal, phase), gov.energy_per_token_mj).unwrap();
    let got: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("search.json")).unwrap()).unwrap();
    assert_eq!(got["chosen"], want.point().to_string());
    assert_eq!(got["inferences_step1"], want.inferences_step1());
    assert_eq!(got["inferences_step2"], want.inferences_step2());
    let rows = std::fs::read_to_string(out.join("evaluations.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + want.inferences());
}

#[test]
fn report_on_self_gives_unit_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("replay");
    let rep = dir.path().join("report");
    ok(&[
        "replay",
        "--n",
        "5",
        "--seed",
        "2",
        "--out",
        r.to_str().unwrap(),
    ]);
    let csv = r.join("replay.csv");
    ok(&[
        "report",
        "--base",
        csv.to_str().unwrap(),
        "--other",
        csv.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(rep.join("comparison.csv")).unwrap();
    let ratios: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(ratios, ["1.0"; 4]);
}

#[test]
fn fuse_replay_uses_a_built_table_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "replay",
        "--policy",
        "fuse",
        "--goal",
        "g1",
        "--n",
        "4",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert!(a.join("fuse_table.toml").exists());
    ok(&[
        "rerun",
        "--manifest",
        a.join("manifest.json").to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    for f in ["replay.csv", "table_report.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
