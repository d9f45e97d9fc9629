use fusesim::sim::{run_phase_summary, run_scenario, Scenario};
use fusesim::{Calibration, Component, FreqConfig, Mhz, OperatingPoint, Setting};
use proptest::prelude::*;

#[test]
fn released_gpu_pin_descends_to_the_floor() {
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
    sc.max_ms = Some(2000);
    let (trace, _) = run_scenario(&cal, &sc).unwrap();
    assert!(trace.records.iter().take(250).all(|r| r.f_gpu == Mhz(848)));
    let tail = trace.records.last().unwrap();
    assert_eq!((tail.f_cpu, tail.f_gpu), (Mhz(500), Mhz(151)));
}

#[test]
fn long_prefill_keeps_the_gpu_high() {
    let cal = Calibration::default_pixel7();
    let r = run_phase_summary(&cal, OperatingPoint::GOVERNED, &cal.prefill(256).unwrap()).unwrap();
    assert!(r.effective_mhz[1] > 800.0, "{:?}", r.effective_mhz);
}

#[test]
fn governed_decode_is_slower_than_max_pin() {
    let cal = Calibration::default_pixel7();
    let phase = cal.decode(16).unwrap();
    let gov = run_phase_summary(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
    let max = run_phase_summary(
        &cal,
        OperatingPoint::pinned(FreqConfig::max_of(&cal.table)),
        &phase,
    )
    .unwrap();
    assert!(gov.latency_ms > 2.0 * max.latency_ms);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pinned_latency_falls_with_any_component(c in 0usize..17, g in 0usize..11, m in 0usize..12, which in 0usize..3) {
        let cal = Calibration::default_pixel7();
        let t = &cal.table;
        let base = FreqConfig { cpu: t.cpu()[c], gpu: t.gpu()[g], mem: t.mem()[m] };
        let mut up = base;
        match Component::ALL[which] {
            Component::Cpu => up.cpu = t.cpu()[c + 1],
            Component::Gpu => up.gpu = t.gpu()[g + 1],
            Component::Mem => up.mem = t.mem()[m + 1],
        }
        let phase = cal.decode(4).unwrap();
        let a = run_phase_summary(&cal, OperatingPoint::pinned(base), &phase).unwrap();
        let b = run_phase_summary(&cal, OperatingPoint::pinned(up), &phase).unwrap();
        prop_assert!(b.latency_ms <= a.latency_ms);
    }
}
