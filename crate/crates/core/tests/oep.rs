mod common;

use common::{capacity_oracle, line_feeder, v2};
use pvm::netmodel::{year_horizon, LoadProfileSet, Network};
use pvm::oep::{
    audit_plan, build_toep, plan, solve_storage, tou_compare, tou_dispatch, BessPlan, BessSpec, PlanError, SocCycle, TouTariff,
    DEFAULT_TOU,
};
use pvm_conic::{BigMPolicy, SolveStatus, SolverConfig};

const V_LOW: f64 = 0.95;

/// Two-bus feeder, 1 MVA base, bus 2 nominal load 800 kW / 400 kvar.
fn feeder() -> Network {
    line_feeder(&[(0.05, 0.05)], &[(800.0, 400.0)])
}

fn day(net: &Network, heavy: &[usize], light: f64) -> LoadProfileSet {
    let shape: Vec<f64> = (0..24).map(|h| if heavy.contains(&h) { 1.0 } else { light }).collect();
    LoadProfileSet::from_shape(net, year_horizon(2017)[..24].to_vec(), &shape).unwrap()
}

fn solver() -> SolverConfig {
    SolverConfig::default()
}

#[test]
fn single_undervoltage_hour_matches_capacity_oracle() {
    let net = feeder();
    let prof = day(&net, &[19], 0.125);
    let spec = BessSpec::default();
    let p = plan(&net, &prof, &[0..24], &[2], &spec, (V_LOW, 1.05), &solver()).unwrap();
    let oracle = capacity_oracle(1, &spec, V_LOW);
    let got = p.total_capacity();
    assert!(oracle > 10.0);
    assert!((got - oracle).abs() <= 0.01 * oracle, "planned {} vs oracle {}", got, oracle);
    assert!((p.objective - spec.cost_per_kwh * got).abs() <= 1e-6 * p.objective);
    assert_eq!(p.status, SolveStatus::Optimal);
}

#[test]
fn energy_limited_evening_matches_capacity_oracle() {
    let net = feeder();
    let prof = day(&net, &[18, 19, 20], 0.125);
    let spec = BessSpec::default();
    let p = plan(&net, &prof, &[0..24], &[2], &spec, (V_LOW, 1.05), &solver()).unwrap();
    let oracle = capacity_oracle(3, &spec, V_LOW);
    assert!(oracle > capacity_oracle(1, &spec, V_LOW) * 1.05, "energy bound should bind");
    let got = p.total_capacity();
    assert!((got - oracle).abs() <= 0.01 * oracle, "planned {} vs oracle {}", got, oracle);
}

#[test]
fn planned_dispatch_lifts_voltage_to_the_limit() {
    let net = feeder();
    let prof = day(&net, &[19], 0.125);
    let spec = BessSpec::default();
    let p = plan(&net, &prof, &[0..24], &[2], &spec, (V_LOW, 1.05), &solver()).unwrap();
    let u = &p.units[0];
    let kw = 1e-3;
    for t in 0..24 {
        let load = prof.p(2).unwrap()[t] * kw + (u.ch_kw[t] - u.dis_kw[t]) * kw;
        let qload = prof.q(2).unwrap()[t] * kw + (u.q_abs_kvar[t] - u.q_inj_kvar[t]) * kw;
        let v = v2(0.05, 0.05, load, qload);
        assert!(v >= V_LOW - 1e-6, "hour {}: {}", t, v);
    }
    audit_plan(&p, &spec).unwrap();
}

#[test]
fn no_violation_means_no_storage() {
    let net = feeder();
    let prof = day(&net, &[], 0.3);
    let p = plan(&net, &prof, &[0..24], &[2], &BessSpec::default(), (V_LOW, 1.05), &solver()).unwrap();
    assert!(p.units.iter().all(|u| !u.installed && u.capacity_kwh == 0.0));
    assert!(p.objective.abs() < 1e-6);
}

#[test]
fn unreachable_limit_is_reported_with_its_period() {
    let net = feeder();
    let prof = day(&net, &[19], 0.125);
    let spec = BessSpec {
        e_max_kwh: 50.0,
        ..BessSpec::default()
    };
    match plan(&net, &prof, &[0..24], &[2], &spec, (V_LOW, 1.05), &solver()) {
        Err(PlanError::Infeasible { periods }) => {
            assert_eq!(periods.len(), 1);
            assert_eq!(periods[0].0, prof.horizon()[0]);
            assert_eq!(periods[0].1, prof.horizon()[23]);
        }
        other => panic!("expected infeasible, got {:?}", other.map(|p| p.total_capacity())),
    }
}

#[test]
fn big_m_scaling_does_not_change_the_optimum() {
    let net = line_feeder(&[(0.03, 0.03), (0.03, 0.03)], &[(300.0, 150.0), (500.0, 250.0)]);
    let shape: Vec<f64> = (0..24).map(|h| if (18..21).contains(&h) { 1.0 } else { 0.15 }).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..24].to_vec(), &shape).unwrap();
    let spec = BessSpec::default();
    let objs: Vec<f64> = [BigMPolicy::FromBounds, BigMPolicy::Scaled(10.0)]
        .iter()
        .map(|&m| {
            let model = build_toep(&net, &prof, &[0..24], &[2, 3], &spec, (V_LOW, 1.05), m).unwrap();
            let r = solve_storage(&model, &spec, &solver());
            assert_eq!(r.status, SolveStatus::Optimal);
            r.objective
        })
        .collect();
    assert!(objs[0] > 1.0);
    assert!((objs[0] - objs[1]).abs() <= 1e-3 * objs[0], "{:?}", objs);
}

#[test]
fn leaf_candidate_beats_midpoint_and_matches_subset_enumeration() {
    let net = line_feeder(&[(0.03, 0.03), (0.03, 0.03)], &[(300.0, 150.0), (500.0, 250.0)]);
    let shape: Vec<f64> = (0..24).map(|h| if h == 19 { 1.0 } else { 0.15 }).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..24].to_vec(), &shape).unwrap();
    let spec = BessSpec::default();
    let lim = (V_LOW, 1.05);
    let both = plan(&net, &prof, &[0..24], &[2, 3], &spec, lim, &solver()).unwrap();
    let single: Vec<f64> = [2, 3]
        .iter()
        .map(|&c| match plan(&net, &prof, &[0..24], &[c], &spec, lim, &solver()) {
            Ok(p) => p.objective,
            Err(PlanError::Infeasible { .. }) => f64::INFINITY,
            Err(e) => panic!("{}", e),
        })
        .collect();
    assert!(single[1] < single[0]);
    let best = single.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(both.objective <= best * (1.0 + 1e-3));
    assert!(both.units.iter().find(|u| u.bus == 3).unwrap().installed);
}

#[test]
fn window_cycle_is_no_more_expensive_than_daily() {
    let net = feeder();
    let shape: Vec<f64> = (0..48).map(|h| if h == 19 || h == 43 { 1.0 } else { 0.125 }).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..48].to_vec(), &shape).unwrap();
    let daily = plan(&net, &prof, &[0..48], &[2], &BessSpec::default(), (V_LOW, 1.05), &solver()).unwrap();
    let spec_w = BessSpec {
        cycle: SocCycle::Window,
        ..BessSpec::default()
    };
    let window = plan(&net, &prof, &[0..48], &[2], &spec_w, (V_LOW, 1.05), &solver()).unwrap();
    assert_eq!(daily.segments.len(), 2);
    assert_eq!(window.segments.len(), 1);
    assert!(window.objective <= daily.objective * (1.0 + 1e-6));
}

#[test]
fn zero_plan_dispatch_equals_baseline_and_storage_never_costs_more() {
    let net = line_feeder(&[(0.03, 0.03), (0.03, 0.03)], &[(300.0, 150.0), (500.0, 250.0)]);
    let shape: Vec<f64> = (0..48).map(|h| 0.3 + 0.6 * ((h % 24) as f64 / 23.0)).collect();
    let ts = year_horizon(2017)[..48].to_vec();
    let prof = LoadProfileSet::from_shape(&net, ts.clone(), &shape).unwrap();
    let spec = BessSpec::default();
    let tariff = TouTariff::from_daily(&DEFAULT_TOU, &ts).unwrap();
    let base = tou_dispatch(&net, &prof, &BessPlan::empty(), &tariff, &spec, None, &solver()).unwrap();
    let again = tou_dispatch(&net, &prof, &BessPlan::empty(), &tariff, &spec, None, &solver()).unwrap();
    assert_eq!(base, again);
    let mut p = plan(&net, &prof, &[0..48], &[3], &spec, (0.97, 1.05), &solver()).unwrap();
    assert!(p.total_capacity() > 0.0);
    for u in &mut p.units {
        u.capacity_kwh = u.capacity_kwh.max(200.0);
    }
    let with = tou_dispatch(&net, &prof, &p, &tariff, &spec, None, &solver()).unwrap();
    assert!(with.cost <= base.cost);
    assert!(with.losses_kwh <= base.losses_kwh + 1e-6);
    assert!(with.cost < base.cost, "peak-priced evening should make arbitrage worthwhile");
}

fn sized_plan(net: &Network, prof: &LoadProfileSet, spec: &BessSpec, kwh: f64) -> BessPlan {
    let mut p = plan(net, prof, &[0..prof.len()], &[3], spec, (0.97, 1.05), &solver()).unwrap();
    for u in &mut p.units {
        u.capacity_kwh = u.capacity_kwh.max(kwh);
    }
    p
}

#[test]
fn flat_tariff_with_lossless_storage_saves_only_priced_losses() {
    let net = line_feeder(&[(0.03, 0.03), (0.03, 0.03)], &[(300.0, 150.0), (500.0, 250.0)]);
    let shape: Vec<f64> = (0..48).map(|h| 0.3 + 0.6 * ((h % 24) as f64 / 23.0)).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..48].to_vec(), &shape).unwrap();
    let spec = BessSpec {
        eta_ch: 1.0,
        eta_dis: 1.0,
        ..BessSpec::default()
    };
    let p = sized_plan(&net, &prof, &spec, 200.0);
    let price = 0.15;
    let tariff = TouTariff::flat(price, prof.len());
    let (base, with) = tou_compare(&net, &prof, &p, &tariff, &spec, None, &solver()).unwrap();
    assert!(with.cost <= base.cost * (1.0 + 1e-9));
    // Only the loss reduction is priced; shifted energy earns nothing.
    let saved = base.cost - with.cost;
    let priced_losses = price * (base.losses_kwh - with.losses_kwh);
    assert!(priced_losses > 0.0);
    assert!((saved - priced_losses).abs() <= 1e-4 * base.cost, "saved {} vs priced losses {}", saved, priced_losses);
}

#[test]
fn raising_the_lower_limit_never_lowers_the_objective() {
    let net = feeder();
    let prof = day(&net, &[18, 19], 0.125);
    let spec = BessSpec::default();
    let objs: Vec<f64> = [0.945, 0.95, 0.955]
        .iter()
        .map(|&vl| plan(&net, &prof, &[0..24], &[2], &spec, (vl, 1.05), &solver()).unwrap().objective)
        .collect();
    assert!(objs[0] > 0.0);
    assert!(objs.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-6)), "{:?}", objs);
}

#[test]
fn disjoint_windows_give_the_union_of_hours_and_a_cycle_per_window() {
    let net = feeder();
    let shape: Vec<f64> = (0..72).map(|h| if h % 24 == 19 { 1.0 } else { 0.125 }).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..72].to_vec(), &shape).unwrap();
    let lim = (V_LOW, 1.05);
    let spec_w = BessSpec {
        cycle: SocCycle::Window,
        ..BessSpec::default()
    };
    let split = build_toep(&net, &prof, &[0..24, 48..72], &[2], &spec_w, lim, BigMPolicy::FromBounds).unwrap();
    let hours: Vec<usize> = (0..24).chain(48..72).collect();
    assert_eq!(split.hours, hours);
    assert_eq!(split.segments, vec![0..24, 24..48]);
    let joined = build_toep(&net, &prof, &[0..48], &[2], &spec_w, lim, BigMPolicy::FromBounds).unwrap();
    assert_eq!(joined.segments, vec![0..48]);
    // Same hour count; the split model only adds one more cyclic closure per unit.
    let rows = |m: &pvm::oep::StorageModel| (m.prog.equalities().len(), m.prog.inequalities().len(), m.prog.cones().len());
    let (se, si, sc) = rows(&split);
    let (je, ji, jc) = rows(&joined);
    assert_eq!((si, sc), (ji, jc));
    assert_eq!(se, je + 1);
    let daily = build_toep(&net, &prof, &[0..24, 48..72], &[2], &BessSpec::default(), lim, BigMPolicy::FromBounds).unwrap();
    assert_eq!(daily.segments, split.segments);
    assert_eq!(rows(&daily), rows(&split));
    let p = plan(&net, &prof, &[0..24, 48..72], &[2], &BessSpec::default(), lim, &solver()).unwrap();
    assert_eq!(p.hours, hours);
    assert_eq!(p.segments.len(), 2);
    audit_plan(&p, &BessSpec::default()).unwrap();
}

#[test]
fn comparison_baseline_equals_empty_plan_dispatch() {
    let net = line_feeder(&[(0.03, 0.03), (0.03, 0.03)], &[(300.0, 150.0), (500.0, 250.0)]);
    let shape: Vec<f64> = (0..48).map(|h| 0.3 + 0.6 * ((h % 24) as f64 / 23.0)).collect();
    let ts = year_horizon(2017)[..48].to_vec();
    let prof = LoadProfileSet::from_shape(&net, ts.clone(), &shape).unwrap();
    let spec = BessSpec::default();
    let tariff = TouTariff::from_daily(&DEFAULT_TOU, &ts).unwrap();
    let p = sized_plan(&net, &prof, &spec, 200.0);
    let (base, _) = tou_compare(&net, &prof, &p, &tariff, &spec, None, &solver()).unwrap();
    let bare = tou_dispatch(&net, &prof, &BessPlan::empty(), &tariff, &spec, None, &solver()).unwrap();
    assert!((base.cost - bare.cost).abs() <= 1e-6 * bare.cost, "{} vs {}", base.cost, bare.cost);
    assert!((base.losses_kwh - bare.losses_kwh).abs() <= 1e-6 * bare.losses_kwh);
    assert_eq!(base.infeasible_days, bare.infeasible_days);
}
