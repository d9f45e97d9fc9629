use fusesim::fuse::{
    build_config_table, search_g1, search_g2, Memo, SearchGoal, SimEvaluator, TableSetting,
};
use fusesim::profiler::{measure, sweep, Constraint, Grid};
use fusesim::{Calibration, Error, OperatingPoint, PhaseSpec};
use proptest::prelude::*;

fn cal() -> Calibration {
    Calibration::default_pixel7()
}

fn phases(cal: &Calibration) -> Vec<PhaseSpec> {
    vec![cal.decode(32).unwrap(), cal.prefill(128).unwrap()]
}

#[test]
fn searches_never_beat_the_grid_oracle() {
    let cal = cal();
    for phase in phases(&cal) {
        let grid = sweep(&cal, &phase, &Grid::cpu_gpu(&cal.table), 1).unwrap();
        let gov = measure(&cal, OperatingPoint::GOVERNED, &phase).unwrap();
        let mut eval = Memo::new(SimEvaluator::new(&cal, phase));

        let g1 = search_g1(&mut eval, gov.energy_per_token_mj).unwrap();
        let o1 = grid
            .pin_opt(Constraint::EnergyBudget(gov.energy_per_token_mj))
            .unwrap();
        assert!(g1.chosen.energy_per_token_mj <= gov.energy_per_token_mj);
        assert!(g1.chosen.latency_ms >= o1.latency_ms);
        assert_eq!(grid.get(g1.chosen.phase, g1.chosen.point), Some(&g1.chosen));

        let g2 = search_g2(&mut eval, gov.latency_ms).unwrap();
        let o2 = grid
            .pin_opt(Constraint::LatencyTarget(gov.latency_ms))
            .unwrap();
        assert!(g2.chosen.latency_ms <= gov.latency_ms);
        assert!(g2.chosen.energy_per_token_mj >= o2.energy_per_token_mj);
    }
}

#[test]
fn evaluation_caps() {
    let cal = cal();
    for phase in phases(&cal) {
        let mut eval = SimEvaluator::new(&cal, phase);
        for budget in [1e9, 300.0, 390.0] {
            if let Ok(r) = search_g1(&mut eval, budget) {
                assert!(r.inferences_step1() <= 12 && r.inferences_step2() <= 36);
                assert_eq!(r.inferences(), r.step1.len() + r.step2.len());
            }
        }
        for target in [1e9, 200.0, 20_000.0] {
            if let Ok(r) = search_g2(&mut eval, target) {
                assert!(r.inferences_step1() <= 12 && r.inferences_step2() <= 36);
                assert!(r.candidates.len() == 1 || r.candidates.len() == 2);
            }
        }
    }
}

#[test]
fn unattainable_bounds_are_reported() {
    let cal = cal();
    let mut eval = SimEvaluator::new(&cal, cal.decode(8).unwrap());
    assert!(matches!(
        search_g1(&mut eval, 1.0),
        Err(Error::BudgetInfeasible { .. })
    ));
    assert!(matches!(
        search_g2(&mut eval, 1.0),
        Err(Error::TargetInfeasible { .. })
    ));
}

#[test]
fn tables_are_deterministic() {
    let cal = cal();
    let goal = |s: TableSetting| -> fusesim::Result<SearchGoal> {
        let gov = measure(&cal, OperatingPoint::GOVERNED, &s.phase(&cal)?)?;
        Ok(SearchGoal::G2 {
            latency_target_ms: gov.latency_ms,
        })
    };
    let (a, _) = build_config_table(&cal, goal).unwrap();
    let (b, _) = build_config_table(&cal, goal).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.reports.len(), 6);
    a.validate(&cal).unwrap();
    assert_eq!(
        fusesim::fuse::FuseTable::from_toml(&a.to_toml().unwrap()).unwrap(),
        a
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lower_budget_never_lowers_latency(hi in 250.0f64..600.0, frac in 0.5f64..1.0) {
        let cal = cal();
        let mut eval = Memo::new(SimEvaluator::new(&cal, cal.decode(16).unwrap()));
        let lo = hi * frac;
        if let (Ok(a), Ok(b)) = (search_g1(&mut eval, hi), search_g1(&mut eval, lo)) {
            prop_assert!(b.chosen.latency_ms >= a.chosen.latency_ms);
        }
    }

    #[test]
    fn results_respect_their_bounds(budget in 100.0f64..900.0, target in 100.0f64..800.0) {
        let cal = cal();
        let mut eval = Memo::new(SimEvaluator::new(&cal, cal.decode(16).unwrap()));
        match search_g1(&mut eval, budget) {
            Ok(r) => prop_assert!(r.chosen.energy_per_token_mj <= budget),
            Err(e) => prop_assert!(matches!(e, Error::BudgetInfeasible { .. }), "{}", e),
        }
        match search_g2(&mut eval, target) {
            Ok(r) => prop_assert!(r.chosen.latency_ms <= target),
            Err(e) => prop_assert!(matches!(e, Error::TargetInfeasible { .. }), "{}", e),
        }
    }
}
