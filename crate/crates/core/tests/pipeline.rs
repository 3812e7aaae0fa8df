mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::{fixture_path, line_feeder, line_feeder_json};
use pvm::netmodel::{year_horizon, LoadProfileSet, TIMESTAMP_FORMAT};
use pvm::oep::BessPlan;
use pvm::pipeline::{
    emit_reports, run_pvm, run_pvm_until, stage_inputs, stage_vva, validate_plan, Outcome, PvmConfig, Stage,
};

fn ieee33_config(penetration: f64, days: usize) -> PvmConfig {
    let mut cfg = PvmConfig::new(fixture_path("ieee33.json"));
    cfg.seed = 11;
    cfg.days = Some(days);
    cfg.scenarios.n = 200;
    cfg.scenarios.penetration = penetration;
    cfg.scenarios.chargers_per_bus = 20;
    cfg.stat.window_days = 7;
    cfg
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn light_year_without_chargers_needs_no_investment() {
    let mut cfg = ieee33_config(0.0, 14);
    cfg.scenarios.growth = 0.8;
    let report = run_pvm(&cfg).unwrap();
    assert_eq!(report.outcome, Outcome::NoInvestment);
    assert!(report.screening.records.is_empty());
    assert!(report.rounds.is_empty() && report.final_plan().is_none());
    assert_eq!(report.outcome.exit_code(), 0);
}

#[test]
fn charger_overlay_run_is_consistent_and_reproducible() {
    let cfg = ieee33_config(1.0, 14);
    let a = run_pvm(&cfg).unwrap();
    let b = run_pvm(&cfg).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_reports(&a, da.path()).unwrap();
    emit_reports(&b, db.path()).unwrap();
    let (fa, fb) = (dir_contents(da.path()), dir_contents(db.path()));
    assert!(fa.iter().any(|(n, _)| n == "report.json"));
    assert_eq!(fa, fb, "reruns with one seed must write identical reports");

    assert!(!a.screening.records.is_empty(), "full penetration should violate");
    let violating: BTreeSet<_> = a.screening.records.iter().map(|r| r.bus).collect();
    let t = a.targeting.as_ref().unwrap();
    assert!(t.candidates.buses.iter().all(|b| violating.contains(b)));
    for (i, r) in a.rounds.iter().enumerate() {
        assert_eq!(r.windows.len(), i + 1);
        if let Some(p) = &r.plan {
            assert!(p.installed().iter().all(|(b, _)| t.candidates.buses.contains(b)));
        }
        if let Some(v) = &r.verdict {
            assert_eq!(v.round, i);
            assert!(v.pass || !v.infeasible_days.is_empty());
            assert!(!v.pass || v.residuals.is_empty());
        }
    }
    let v_low = 0.95;
    match a.outcome {
        Outcome::Pass => {
            assert_eq!(a.post_plan_records, Some(0));
            let after = a.after.as_ref().unwrap();
            assert!(after.iter().all(|(_, f)| f.min >= v_low - 1e-6));
            let row = &a.economics[0];
            assert!(row.cost_with <= row.cost_without * (1.0 + 1e-9));
        }
        Outcome::ValidationFailed | Outcome::WindowsExhausted => {
            let v = a.rounds.last().unwrap().verdict.as_ref().unwrap();
            assert!(!v.residuals.is_empty() || !v.infeasible_days.is_empty());
        }
        ref o => panic!("unexpected outcome {:?}", o),
    }
}

#[test]
fn empty_plan_on_violating_year_reports_the_screening_violations() {
    let cfg = ieee33_config(1.0, 7);
    let inputs = stage_inputs(&cfg).unwrap();
    let solver = cfg.solver.to_config().unwrap();
    let screening = stage_vva(&inputs.net, &inputs.profiles, &solver).unwrap();
    assert!(!screening.records.is_empty());
    let limits = (inputs.net.v_lower, inputs.net.v_upper);
    let v = validate_plan(&inputs.net, &inputs.profiles, &BessPlan::empty(), &cfg.bess, limits, &solver, 0).unwrap();
    assert!(!v.verdict.pass);
    assert_eq!(v.verdict.residuals.len(), screening.records.len());
    for (res, rec) in v.verdict.residuals.iter().zip(&screening.records) {
        assert_eq!(res.bus, rec.bus);
        assert_eq!(res.timestamp, rec.timestamp.format(TIMESTAMP_FORMAT).to_string());
        assert!((res.voltage - rec.voltage).abs() <= 1e-6, "{:?} vs {:?}", res, rec);
    }
    let days: BTreeSet<_> = screening.records.iter().map(|r| r.timestamp.date()).collect();
    assert_eq!(v.verdict.infeasible_days, days.into_iter().collect::<Vec<_>>());
}

#[test]
fn empty_plan_on_clean_year_passes() {
    let mut cfg = ieee33_config(0.0, 3);
    cfg.scenarios.growth = 0.8;
    let inputs = stage_inputs(&cfg).unwrap();
    let solver = cfg.solver.to_config().unwrap();
    let limits = (inputs.net.v_lower, inputs.net.v_upper);
    let v = validate_plan(&inputs.net, &inputs.profiles, &BessPlan::empty(), &cfg.bess, limits, &solver, 0).unwrap();
    assert!(v.verdict.pass);
    assert!(v.verdict.residuals.is_empty() && v.verdict.infeasible_days.is_empty());
}

/// Two-bus feeder whose first week has many mild evening violations and whose
/// third week hides a single deeper hour that the first week's plan cannot cover.
fn adversarial_config(dir: &Path) -> PvmConfig {
    let z = [(0.05, 0.05)];
    let loads = [(800.0, 400.0)];
    let net_path = dir.join("net.json");
    fs::write(&net_path, line_feeder_json(&z, &loads)).unwrap();
    let net = line_feeder(&z, &loads);
    let days = 21;
    let shape: Vec<f64> = (0..days * 24)
        .map(|h| {
            let (d, hour) = (h / 24, h % 24);
            match (d, hour) {
                (0..=6, 18 | 19) => 0.9,
                (16, 19) => 1.1,
                _ => 0.3,
            }
        })
        .collect();
    let prof = LoadProfileSet::from_shape(&net, year_horizon(2017)[..days * 24].to_vec(), &shape).unwrap();
    let prof_path = dir.join("base.csv");
    prof.write_csv(fs::File::create(&prof_path).unwrap()).unwrap();
    let mut cfg = PvmConfig::new(net_path);
    cfg.base_profiles = Some(prof_path);
    cfg.days = Some(days);
    cfg.scenarios.penetration = 0.0;
    cfg.stat.window_days = 7;
    cfg.pipeline.economics = false;
    cfg
}

#[test]
fn deeper_later_violation_forces_a_backtrack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = adversarial_config(dir.path());
    let report = run_pvm(&cfg).unwrap();
    let t = report.targeting.as_ref().unwrap();
    assert_eq!(t.ranked_windows[0].offset, 0, "the mild week should rank first");
    assert!(report.rounds.len() >= 2, "expected at least one backtrack");
    let first = report.rounds[0].verdict.as_ref().unwrap();
    assert!(!first.pass);
    let deep = year_horizon(2017)[16 * 24].date();
    assert!(first.infeasible_days.contains(&deep));
    assert!(report.rounds[1].windows.iter().any(|w| w.start <= deep && deep <= w.end));
    assert_eq!(report.outcome, Outcome::Pass);
    let caps: Vec<f64> = report.rounds.iter().map(|r| r.plan.as_ref().unwrap().total_capacity()).collect();
    assert!(caps[1] > caps[0], "{:?}", caps);
    assert_eq!(report.post_plan_records, Some(0));
}

#[test]
fn planning_stage_stops_after_one_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = adversarial_config(dir.path());
    let report = run_pvm_until(&cfg, Stage::Plan).unwrap();
    assert_eq!(report.outcome, Outcome::Planned);
    assert_eq!(report.rounds.len(), 1);
    assert!(report.rounds[0].verdict.is_none());
    let stat = run_pvm_until(&cfg, Stage::Stat).unwrap();
    assert_eq!(stat.outcome, Outcome::Screened);
    assert!(stat.rounds.is_empty() && stat.targeting.is_some());
}

#[test]
fn unknown_config_keys_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("top.toml", "network = \"net.json\"\nthreshold = 0.9\n"),
        ("bess.toml", "network = \"net.json\"\n[bess]\ncapacity = 10.0\n"),
    ] {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        let err = PvmConfig::from_file(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{}", err);
    }
}

#[test]
fn missing_network_is_an_input_error() {
    let cfg = PvmConfig::new("/nonexistent/net.json");
    let err = run_pvm(&cfg).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}
