mod common;

use common::{ieee33, line_feeder, nominal_pu, sweep};
use pvm::netmodel::{year_horizon, LoadProfileSet};
use pvm::vva::{build_vva, cone_slack, detect_violations, run_vva, solve_hour, VvaOptions};
use pvm_conic::{solve_relaxation, SolveStatus, SolverConfig};

fn check_against_sweep(net: &pvm::netmodel::Network, scale: f64) {
    let (p, q) = nominal_pu(net, scale);
    let f = solve_hour(net, &p, &q, 1.0, &VvaOptions::default()).unwrap();
    let oracle = sweep(net, &p, &q, 1.0);
    for (i, vo) in oracle.iter().enumerate() {
        let v = f.v_sq[i].sqrt();
        assert!((v - vo).abs() <= 1e-6, "bus {}: {} vs {}", net.buses()[i].id, v, vo);
    }
    assert!(cone_slack(net, &f).0 <= 1e-6);
}

#[test]
fn small_feeders_match_sweep() {
    let two = line_feeder(&[(0.03, 0.04)], &[(300.0, 150.0)]);
    let four = line_feeder(&[(0.02, 0.03), (0.03, 0.02), (0.04, 0.05)], &[(100.0, 60.0), (200.0, 80.0), (150.0, 90.0)]);
    let six = line_feeder(
        &[(0.01, 0.02), (0.02, 0.02), (0.03, 0.01), (0.02, 0.04), (0.05, 0.03)],
        &[(80.0, 40.0), (120.0, 70.0), (60.0, 20.0), (150.0, 100.0), (90.0, 30.0)],
    );
    for net in [&two, &four, &six] {
        for scale in [0.5, 1.0, 1.5] {
            check_against_sweep(net, scale);
        }
    }
}

#[test]
fn ieee33_nominal_load_matches_sweep() {
    let net = ieee33();
    check_against_sweep(&net, 1.0);
    let (p, q) = nominal_pu(&net, 1.0);
    let f = solve_hour(&net, &p, &q, 1.0, &VvaOptions::default()).unwrap();
    let loss_kw = f.loss / net.kw_to_pu();
    assert!((loss_kw - 202.7).abs() < 0.5, "losses {} kW", loss_kw);
    let (vmin, idx) = f
        .v_sq
        .iter()
        .enumerate()
        .map(|(i, v)| (v.sqrt(), i))
        .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
    assert_eq!(net.buses()[idx].id, 18);
    assert!((vmin - 0.9131).abs() < 5e-4);
}

#[test]
fn joint_and_separate_hours_agree() {
    let net = ieee33();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..3].to_vec(), &[0.4, 0.8, 1.1]).unwrap();
    let (prog, _) = build_vva(&net, &prof, &[0, 1, 2]).unwrap();
    let joint = solve_relaxation(&prog, &SolverConfig::default());
    assert_eq!(joint.status, SolveStatus::Optimal);
    let sol = run_vva(&net, &prof).unwrap();
    let sum: f64 = sol.losses.iter().sum();
    assert!((joint.objective - sum).abs() <= 1e-9, "{} vs {}", joint.objective, sum);
}

#[test]
fn balance_audit_and_nonnegative_losses() {
    let net = ieee33();
    let shape: Vec<f64> = (0..24).map(|h| 0.5 + 0.5 * ((h as f64) / 24.0 * std::f64::consts::TAU).sin().abs()).collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..24].to_vec(), &shape).unwrap();
    let sol = run_vva(&net, &prof).unwrap();
    let f = net.kw_to_pu();
    for t in 0..24 {
        assert!(sol.losses[t] >= 0.0);
        let (pk, qk) = prof.snapshot(&net, t);
        for i in 0..net.num_buses() {
            let (mut bp, mut bq) = match net.upstream_branch(i) {
                Some(k) => {
                    let br = &net.branches()[k];
                    (sol.p_flow[k][t] - br.r * sol.i_sq[k][t], sol.q_flow[k][t] - br.x * sol.i_sq[k][t])
                }
                None => (sol.p_slack[t], sol.q_slack[t]),
            };
            for &m in net.downstream_branches(i) {
                bp -= sol.p_flow[m][t];
                bq -= sol.q_flow[m][t];
            }
            assert!((bp - pk[i] * f).abs() <= 1e-7);
            assert!((bq - qk[i] * f).abs() <= 1e-7);
        }
    }
}

#[test]
fn heavier_leaf_load_lowers_its_voltage() {
    let net = ieee33();
    let (p, q) = nominal_pu(&net, 0.6);
    let base = solve_hour(&net, &p, &q, 1.0, &VvaOptions::default()).unwrap();
    for leaf in net.leaf_buses() {
        let i = net.index_of(leaf).unwrap();
        let mut p2 = p.clone();
        p2[i] *= 2.0;
        let f = solve_hour(&net, &p2, &q, 1.0, &VvaOptions::default()).unwrap();
        assert!(f.v_sq[i] <= base.v_sq[i] + 1e-12);
    }
}

#[test]
fn violations_cover_weak_end_of_feeder() {
    let net = ieee33();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..2].to_vec(), &[0.3, 1.0]).unwrap();
    let sol = run_vva(&net, &prof).unwrap();
    let recs = detect_violations(&sol, net.v_lower, net.v_upper);
    assert!(recs.iter().all(|r| r.timestamp == prof.horizon()[1]));
    assert!(recs.iter().any(|r| r.bus == 18));
    for r in &recs {
        assert!(r.severity > 0.0);
        assert!((r.severity - (0.95 - r.voltage)).abs() < 1e-12);
    }
}
