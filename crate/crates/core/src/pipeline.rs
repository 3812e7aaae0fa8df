//! End-to-end flow: screening, criticality reduction, planning, year-long
//! validation with backtracking, economics and report files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use log::{info, warn};
use pvm_conic::{solve_relaxation, BigMPolicy, ConicError, SolveStatus, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{load_network_file, year_horizon, BusId, LoadProfileSet, NetError, Network, TIMESTAMP_FORMAT};
use crate::oep::{
    build_storage_model, day_ranges, plan, savings_report, solve_storage, tou_compare, write_plan, write_savings,
    BessPlan, BessSpec, Capacity, Objective, PlanError, SavingsRow, TouTariff, DEFAULT_TOU,
};
use crate::scenarios::{
    base_shape, derive_seed, detect_events, extract_ev_load, generate_annual, overlay_penetration, synth_households,
    EventDistributions, HouseholdParams, ScenarioError, ScenarioSet,
};
use crate::stat::{
    build_pool, cluster, combined_metric, daily_metrics, default_threshold, diversity_filter, fill_calendar,
    normalize_and_score, percentile, rank_windows, sensitivities, worst_hour, write_candidates, write_scored_days,
    write_windows, CandidateSet, CriticalWindow, DailyStress, NodeFeatures, StatError, StressWeights,
};
use crate::vva::{
    assemble, cone_slack, detect_violations, extract_hour, hour_loads, node_stats, run_vva_with, write_violation_log,
    FlowSolution, HourFlow, NodeViolationStats, ViolationRecord, VvaError, VvaOptions,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("scenarios: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("vva: {0}")]
    Vva(#[from] VvaError),
    #[error("stat: {0}")]
    Stat(#[from] StatError),
    #[error("planning: {0}")]
    Plan(#[from] PlanError),
    #[error("solver: {0}")]
    Conic(#[from] ConicError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 2 for input problems, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Vva(VvaError::Solve { .. } | VvaError::ConeSlack { .. } | VvaError::Conic(_))
            | PipelineError::Plan(PlanError::Solver(_) | PlanError::Audit(_) | PlanError::Conic(_))
            | PipelineError::Stat(StatError::Sensitivity(_))
            | PipelineError::Conic(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Number of annual charger scenarios.
    pub n: usize,
    pub daily_prob: f64,
    /// Share of load buses that host chargers.
    pub penetration: f64,
    /// Multiplier on the base load.
    pub growth: f64,
    pub chargers_per_bus: usize,
    /// Peak of the synthesized base load as a fraction of nominal bus load.
    pub peak_fraction: f64,
    pub base_noise: f64,
    pub households: HouseholdParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 1200,
            daily_prob: 0.9,
            penetration: 0.1,
            growth: 1.0,
            chargers_per_bus: 1,
            peak_fraction: 0.55,
            base_noise: 0.05,
            households: HouseholdParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatConfig {
    pub weights: StressWeights,
    pub window_days: usize,
    pub alpha_eol: f64,
    pub n_max_top: usize,
    pub n_min_bottom: usize,
    pub k_max: usize,
    /// Electrical distance threshold (p.u.); the pool's 25th percentile when absent.
    pub distance_threshold: Option<f64>,
    /// Most candidates kept; 60% of the pool when absent.
    pub target_count: Option<usize>,
}

impl Default for StatConfig {
    fn default() -> Self {
        Self {
            weights: StressWeights::default(),
            window_days: 7,
            alpha_eol: 1.0,
            n_max_top: 5,
            n_min_bottom: 1,
            k_max: 10,
            distance_threshold: None,
            target_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub mip_gap: f64,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub node_limit: usize,
    pub time_limit_s: Option<f64>,
    /// Safety factor on the implied big-M constants; exact constants when absent.
    pub big_m_scale: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            mip_gap: d.mip_gap,
            feas_tol: d.feas_tol,
            gap_tol: d.ipm_gap_tol,
            max_iter: d.max_iter,
            node_limit: d.node_limit,
            time_limit_s: None,
            big_m_scale: None,
        }
    }
}

impl SolverSettings {
    pub fn to_config(&self) -> Result<SolverConfig, PipelineError> {
        let cfg = SolverConfig {
            mip_gap: self.mip_gap,
            feas_tol: self.feas_tol,
            cone_tol: self.feas_tol,
            ipm_gap_tol: self.gap_tol,
            max_iter: self.max_iter,
            node_limit: self.node_limit,
            time_limit: self.time_limit_s.map(std::time::Duration::from_secs_f64),
            big_m: self.big_m_scale.map_or(BigMPolicy::FromBounds, BigMPolicy::Scaled),
            ..SolverConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    /// Most backtracking rounds after the first plan.
    pub max_rounds: usize,
    /// Enforce voltage limits in both economics runs.
    pub economics_enforce_limits: bool,
    pub economics: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            economics_enforce_limits: false,
            economics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvmConfig {
    pub network: PathBuf,
    #[serde(default)]
    pub base_profiles: Option<PathBuf>,
    #[serde(default)]
    pub tariff: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_year")]
    pub year: i32,
    /// Simulate only the first this many days of the year.
    #[serde(default)]
    pub days: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scenarios: ScenarioConfig,
    #[serde(default)]
    pub stat: StatConfig,
    #[serde(default)]
    pub bess: BessSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub pipeline: PipelineSettings,
}

fn default_output() -> PathBuf {
    PathBuf::from("pvm-out")
}

fn default_year() -> i32 {
    2017
}

impl PvmConfig {
    pub fn new(network: impl Into<PathBuf>) -> Self {
        Self {
            network: network.into(),
            base_profiles: None,
            tariff: None,
            output_dir: default_output(),
            year: default_year(),
            days: None,
            seed: 0,
            scenarios: ScenarioConfig::default(),
            stat: StatConfig::default(),
            bess: BessSpec::default(),
            solver: SolverSettings::default(),
            pipeline: PipelineSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PvmConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {}", path.display(), e)))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut cfg.network);
        cfg.base_profiles.as_mut().map(fix);
        cfg.tariff.as_mut().map(fix);
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for p in [Some(&self.network), self.base_profiles.as_ref(), self.tariff.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("file not found: {}", p.display()));
            }
        }
        let s = &self.scenarios;
        if !(0.0..=1.0).contains(&s.daily_prob) || !(0.0..=1.0).contains(&s.penetration) {
            return bad("daily_prob and penetration must lie in [0, 1]".into());
        }
        if !(s.growth > 0.0) || !(s.peak_fraction > 0.0) || s.base_noise < 0.0 {
            return bad("growth and peak_fraction must be positive, base_noise non-negative".into());
        }
        if s.penetration > 0.0 && s.n == 0 {
            return bad("penetration requires at least one scenario".into());
        }
        let st = &self.stat;
        if st.window_days == 0 || st.target_count == Some(0) || st.n_max_top == 0 || st.n_min_bottom > st.n_max_top {
            return bad("window_days, target_count, n_max_top must be positive and n_min_bottom ≤ n_max_top".into());
        }
        if st.alpha_eol < 0.0 || st.distance_threshold.map_or(false, |d| d < 0.0) {
            return bad("alpha_eol and distance_threshold must be non-negative".into());
        }
        if self.days == Some(0) {
            return bad("days must be positive".into());
        }
        self.bess.validate()?;
        self.solver.to_config()?;
        Ok(())
    }

    pub fn horizon(&self) -> Vec<NaiveDateTime> {
        let mut h = year_horizon(self.year);
        if let Some(d) = self.days {
            h.truncate(d * 24);
        }
        h
    }
}

/// Scenario-stage facts kept for the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub events_detected: usize,
    pub scenarios: usize,
    pub mean_charging_days: f64,
}

/// Event distributions fitted to synthesized meter data and the annual charger scenarios drawn from them.
pub fn stage_scenarios(cfg: &PvmConfig) -> Result<(EventDistributions, ScenarioSet, ScenarioSummary), PipelineError> {
    let s = &cfg.scenarios;
    let homes = synth_households(&s.households, derive_seed(cfg.seed, 2))?;
    let mut events = Vec::new();
    for composite in &homes.ev_homes {
        let ev = extract_ev_load(composite, &homes.baseline)?;
        events.extend(detect_events(&ev, homes.timestamps[0], 1.0));
    }
    let dist = EventDistributions::fit(&events)?;
    let days = cfg.horizon().len().div_ceil(24);
    let set = generate_annual(&dist, s.n, s.daily_prob, days, derive_seed(cfg.seed, 3))?;
    let summary = ScenarioSummary {
        events_detected: events.len(),
        scenarios: set.len(),
        mean_charging_days: set.charging_days.iter().sum::<usize>() as f64 / set.len().max(1) as f64,
    };
    Ok((dist, set, summary))
}

pub struct Inputs {
    pub net: Network,
    pub profiles: LoadProfileSet,
    pub scenarios: Option<ScenarioSummary>,
    pub distributions: Option<EventDistributions>,
}

/// Network, base load and the EV overlay.
pub fn stage_inputs(cfg: &PvmConfig) -> Result<Inputs, PipelineError> {
    cfg.validate()?;
    let net = load_network_file(&cfg.network)?;
    let horizon = cfg.horizon();
    let base = match &cfg.base_profiles {
        Some(p) => {
            let f = File::open(p)?;
            let all = LoadProfileSet::read_csv(f)?;
            if all.len() < horizon.len() || all.horizon()[0] != horizon[0] {
                return Err(PipelineError::Config(format!(
                    "base profiles must start at {} and cover {} hours",
                    horizon[0].format(TIMESTAMP_FORMAT),
                    horizon.len()
                )));
            }
            all.slice(0, horizon.len())
        }
        None => {
            let shape = base_shape(
                &horizon,
                cfg.scenarios.peak_fraction,
                cfg.scenarios.base_noise,
                derive_seed(cfg.seed, 1),
            );
            LoadProfileSet::from_shape(&net, horizon.clone(), &shape)?
        }
    };
    base.check_covers(&net)?;
    let s = &cfg.scenarios;
    let count = (s.penetration * net.load_bus_ids().len() as f64).round() as usize;
    if count == 0 {
        let profiles = crate::netmodel::scale_profiles(&base, s.growth)?;
        return Ok(Inputs {
            net,
            profiles,
            scenarios: None,
            distributions: None,
        });
    }
    let (dist, set, summary) = stage_scenarios(cfg)?;
    let profiles = overlay_penetration(&net, &base, &set, s.penetration, s.growth, s.chargers_per_bus, derive_seed(cfg.seed, 4))?;
    info!(
        "scenarios: {} events detected, {} annual scenarios, {} buses with chargers",
        summary.events_detected, summary.scenarios, count
    );
    Ok(Inputs {
        net,
        profiles,
        scenarios: Some(summary),
        distributions: Some(dist),
    })
}

pub struct Screening {
    pub flows: FlowSolution,
    pub records: Vec<ViolationRecord>,
    pub node_stats: Vec<NodeViolationStats>,
}

pub fn stage_vva(net: &Network, profiles: &LoadProfileSet, solver: &SolverConfig) -> Result<Screening, PipelineError> {
    let opts = VvaOptions {
        solver: solver.clone(),
        ..VvaOptions::default()
    };
    let flows = run_vva_with(net, profiles, &opts)?;
    let records = detect_violations(&flows, net.v_lower, net.v_upper);
    let ids: Vec<BusId> = net.buses().iter().map(|b| b.id).collect();
    let node_stats = node_stats(&records, profiles.len(), &ids);
    info!("vva: {} hours, {} violation records", profiles.len(), records.len());
    Ok(Screening {
        flows,
        records,
        node_stats,
    })
}

#[derive(Debug, Clone)]
pub struct Targeting {
    pub scored_days: Vec<DailyStress>,
    pub ranked_windows: Vec<CriticalWindow>,
    pub worst_hour: usize,
    pub features: Vec<NodeFeatures>,
    pub k_opt: usize,
    pub candidates: CandidateSet,
}

/// Daily stress scoring, window ranking and candidate selection over the violating buses.
pub fn stage_stat(
    net: &Network,
    profiles: &LoadProfileSet,
    screening: &Screening,
    cfg: &StatConfig,
    seed: u64,
    solver: &SolverConfig,
) -> Result<Targeting, PipelineError> {
    let horizon = profiles.horizon();
    let first = horizon[0].date();
    let last = horizon[horizon.len() - 1].date();
    let days = fill_calendar(&daily_metrics(&screening.records), first, last);
    let scored_days = normalize_and_score(&days, &cfg.weights);
    let w = cfg.window_days.min(scored_days.len());
    let ranked_windows = rank_windows(&scored_days, w)?;
    let worst = worst_hour(&screening.records, horizon)
        .ok_or_else(|| PipelineError::Config("targeting needs at least one violation".into()))?;
    let violating: Vec<&NodeViolationStats> = screening.node_stats.iter().filter(|s| s.f_viol > 0.0).collect();
    let buses: Vec<BusId> = violating.iter().map(|s| s.bus).collect();
    let (p, q) = hour_loads(net, profiles, worst);
    let opts = VvaOptions {
        solver: solver.clone(),
        ..VvaOptions::default()
    };
    let sens = sensitivities(net, &p, &q, net.slack_voltage.at(worst), &buses, &opts)?;
    let leaves = net.leaf_buses();
    let mut features: Vec<NodeFeatures> = violating
        .iter()
        .zip(&sens)
        .map(|(s, &m)| NodeFeatures::new(s.bus, m, s.f_viol, leaves.contains(&s.bus)))
        .collect();
    combined_metric(&mut features, cfg.alpha_eol);
    let points: Vec<Vec<f64>> = features.iter().map(|f| vec![f.s_mean_abs, f.f_viol, f.s_eol]).collect();
    let clustering = cluster(&points, cfg.k_max, derive_seed(seed, 5));
    for (f, &l) in features.iter_mut().zip(&clustering.labels) {
        f.cluster = l;
    }
    let pool = build_pool(&features, clustering.k_opt, cfg.n_max_top, cfg.n_min_bottom);
    let threshold = match cfg.distance_threshold {
        Some(t) => t,
        None => default_threshold(net, &pool)?,
    };
    let target = cfg.target_count.unwrap_or_else(|| default_target(pool.len()));
    let candidates = diversity_filter(&pool, net, threshold, target)?;
    info!(
        "stat: {} ranked windows, k = {}, {} candidates {:?}",
        ranked_windows.len(),
        clustering.k_opt,
        candidates.buses.len(),
        candidates.buses
    );
    Ok(Targeting {
        scored_days,
        ranked_windows,
        worst_hour: worst,
        features,
        k_opt: clustering.k_opt,
        candidates,
    })
}

/// Candidate budget when none is configured: 60% of the pool, at least one.
pub fn default_target(pool: usize) -> usize {
    ((0.6 * pool as f64).round() as usize).max(1)
}

/// Profile hours covered by a window of the scored calendar.
pub fn window_hours(horizon: &[NaiveDateTime], w: &CriticalWindow) -> Range<usize> {
    let days = day_ranges(horizon);
    days[w.offset].1.start..days[w.offset + w.days - 1].1.end
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationVerdict {
    pub pass: bool,
    pub residuals: Vec<ResidualRecord>,
    pub infeasible_days: Vec<NaiveDate>,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRecord {
    pub bus: BusId,
    pub timestamp: String,
    pub voltage: f64,
    pub severity: f64,
}

impl From<&ViolationRecord> for ResidualRecord {
    fn from(r: &ViolationRecord) -> Self {
        Self {
            bus: r.bus,
            timestamp: r.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            voltage: r.voltage,
            severity: r.severity,
        }
    }
}

pub struct Validation {
    pub verdict: ValidationVerdict,
    /// Adopted flows over the year; failed days carry their diagnostic flows.
    pub flows: FlowSolution,
}

enum DayCheck {
    Feasible(Vec<HourFlow>),
    Failed(Vec<HourFlow>),
}

fn exact(net: &Network, flows: &[HourFlow], tol: f64) -> bool {
    flows.iter().all(|f| cone_slack(net, f).0 <= tol)
}

fn solve_day(
    net: &Network,
    profiles: &LoadProfileSet,
    hours: Range<usize>,
    units: &[(BusId, Capacity)],
    spec: &BessSpec,
    limits: Option<(f64, f64)>,
    cfg: &SolverConfig,
) -> Result<Option<Vec<HourFlow>>, PipelineError> {
    let m = build_storage_model(net, profiles, &[hours], units, spec, limits, &Objective::Losses, cfg.big_m)?;
    let r = if units.is_empty() {
        solve_relaxation(&m.prog, cfg)
    } else {
        solve_storage(&m, spec, cfg)
    };
    match r.status {
        SolveStatus::Optimal | SolveStatus::GapLimit if r.has_point() => {
            Ok(Some(m.flows.iter().map(|h| extract_hour(net, h, &r.x)).collect()))
        }
        SolveStatus::Infeasible => Ok(None),
        other => Err(PlanError::Solver(other).into()),
    }
}

fn validate_day(
    net: &Network,
    profiles: &LoadProfileSet,
    hours: Range<usize>,
    units: &[(BusId, Capacity)],
    spec: &BessSpec,
    limits: (f64, f64),
    cfg: &SolverConfig,
) -> Result<DayCheck, PipelineError> {
    let tol = VvaOptions::default().cone_tol;
    if let Some(f) = solve_day(net, profiles, hours.clone(), &[], spec, Some(limits), cfg)? {
        if exact(net, &f, tol) {
            return Ok(DayCheck::Feasible(f));
        }
    }
    if !units.is_empty() {
        if let Some(f) = solve_day(net, profiles, hours.clone(), units, spec, Some(limits), cfg)? {
            if exact(net, &f, tol) {
                return Ok(DayCheck::Feasible(f));
            }
        }
    }
    let diag = solve_day(net, profiles, hours, units, spec, None, cfg)?
        .ok_or(PipelineError::Plan(PlanError::Solver(SolveStatus::Infeasible)))?;
    Ok(DayCheck::Failed(diag))
}

/// Operates every day of the year with the plan's capacities frozen, minimizing
/// losses under hard voltage limits; passes iff every day is feasible.
pub fn validate_plan(
    net: &Network,
    profiles: &LoadProfileSet,
    plan: &BessPlan,
    spec: &BessSpec,
    limits: (f64, f64),
    cfg: &SolverConfig,
    round: usize,
) -> Result<Validation, PipelineError> {
    let units: Vec<(BusId, Capacity)> = plan.installed().into_iter().map(|(b, c)| (b, Capacity::Fixed(c))).collect();
    let days = day_ranges(profiles.horizon());
    let checks: Vec<Result<DayCheck, PipelineError>> = days
        .par_iter()
        .map(|(date, r)| {
            validate_day(net, profiles, r.clone(), &units, spec, limits, cfg).inspect_err(|e| warn!("validation of {}: {}", date, e))
        })
        .collect();
    let mut flows = Vec::with_capacity(profiles.len());
    let mut infeasible_days = Vec::new();
    let mut residuals = Vec::new();
    for ((date, r), c) in days.iter().zip(checks) {
        match c? {
            DayCheck::Feasible(f) => flows.extend(f),
            DayCheck::Failed(f) => {
                let day = assemble(net, profiles.horizon()[r.clone()].to_vec(), &f);
                residuals.extend(detect_violations(&day, limits.0, limits.1).iter().map(ResidualRecord::from));
                infeasible_days.push(*date);
                flows.extend(f);
            }
        }
    }
    let flows = assemble(net, profiles.horizon().to_vec(), &flows);
    let verdict = ValidationVerdict {
        pass: infeasible_days.is_empty(),
        residuals,
        infeasible_days,
        round,
    };
    info!(
        "validation round {}: {} ({} infeasible days)",
        round,
        if verdict.pass { "pass" } else { "fail" },
        verdict.infeasible_days.len()
    );
    Ok(Validation { verdict, flows })
}

/// Adds the best-ranked window not yet monitored and not overlapping any monitored one.
pub fn backtrack(used: &[CriticalWindow], ranked: &[CriticalWindow]) -> Option<Vec<CriticalWindow>> {
    let next = ranked.iter().find(|w| used.iter().all(|u| !u.overlaps(w)))?;
    let mut out = used.to_vec();
    out.push(next.clone());
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    NoInvestment,
    /// Violations found; stopped before planning or validation finished.
    Screened,
    Planned,
    Pass,
    ValidationFailed,
    PlanningInfeasible,
    WindowsExhausted,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::NoInvestment | Outcome::Screened | Outcome::Planned | Outcome::Pass => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Round {
    pub windows: Vec<CriticalWindow>,
    pub plan: Option<BessPlan>,
    pub verdict: Option<ValidationVerdict>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Self {
        Self {
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            q1: percentile(values, 25.0),
            median: percentile(values, 50.0),
            q3: percentile(values, 75.0),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub fn voltage_summaries(flows: &FlowSolution) -> Vec<(BusId, FiveNumber)> {
    flows
        .bus_ids
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let v: Vec<f64> = (0..flows.hours()).map(|t| flows.voltage(i, t)).collect();
            (b, FiveNumber::of(&v))
        })
        .collect()
}

pub struct PvmReport {
    pub outcome: Outcome,
    pub config: PvmConfig,
    pub scenarios: Option<ScenarioSummary>,
    pub distributions: Option<EventDistributions>,
    pub screening: Screening,
    pub targeting: Option<Targeting>,
    pub rounds: Vec<Round>,
    pub economics: Vec<SavingsRow>,
    pub before: Vec<(BusId, FiveNumber)>,
    pub after: Option<Vec<(BusId, FiveNumber)>>,
    /// Violations left on the adopted flows of the last validated year.
    pub post_plan_records: Option<usize>,
}

impl PvmReport {
    pub fn final_plan(&self) -> Option<&BessPlan> {
        self.rounds.iter().rev().find_map(|r| r.plan.as_ref())
    }
}

pub fn load_tariff(cfg: &PvmConfig, horizon: &[NaiveDateTime]) -> Result<TouTariff, PipelineError> {
    Ok(match &cfg.tariff {
        Some(p) => TouTariff::read_csv(File::open(p)?, horizon)?,
        None => TouTariff::from_daily(&DEFAULT_TOU, horizon)?,
    })
}

/// Costs and losses with and without the plan under the configured voltage policy.
pub fn stage_economics(
    net: &Network,
    profiles: &LoadProfileSet,
    plan: &BessPlan,
    cfg: &PvmConfig,
    solver: &SolverConfig,
) -> Result<SavingsRow, PipelineError> {
    let tariff = load_tariff(cfg, profiles.horizon())?;
    let limits = cfg.pipeline.economics_enforce_limits.then_some((net.v_lower, net.v_upper));
    let (base, with) = tou_compare(net, profiles, plan, &tariff, &cfg.bess, limits, solver)?;
    let label = format!("{:.0}%", cfg.scenarios.penetration * 100.0);
    Ok(savings_report(&label, &base, &with)?)
}

/// Last stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Vva,
    Stat,
    /// Plans the top window without validating.
    Plan,
    /// Plans, validates and backtracks without economics.
    Validate,
    /// Plans the top window and evaluates its economics without validating.
    Economics,
    Run,
}

/// Runs screening, targeting, planning with validation and backtracking, and economics.
pub fn run_pvm(cfg: &PvmConfig) -> Result<PvmReport, PipelineError> {
    run_pvm_until(cfg, Stage::Run)
}

pub fn run_pvm_until(cfg: &PvmConfig, stop: Stage) -> Result<PvmReport, PipelineError> {
    let solver = cfg.solver.to_config()?;
    let inputs = stage_inputs(cfg)?;
    let (net, profiles) = (&inputs.net, &inputs.profiles);
    let screening = stage_vva(net, profiles, &solver)?;
    let before = voltage_summaries(&screening.flows);
    let mut report = PvmReport {
        outcome: Outcome::NoInvestment,
        config: cfg.clone(),
        scenarios: inputs.scenarios.clone(),
        distributions: inputs.distributions.clone(),
        screening,
        targeting: None,
        rounds: Vec::new(),
        economics: Vec::new(),
        before,
        after: None,
        post_plan_records: None,
    };
    if report.screening.records.is_empty() {
        info!("no violations: no investment needed");
        return Ok(report);
    }
    report.outcome = Outcome::Screened;
    if stop == Stage::Vva {
        return Ok(report);
    }
    let targeting = stage_stat(net, profiles, &report.screening, &cfg.stat, cfg.seed, &solver)?;
    if stop == Stage::Stat {
        report.targeting = Some(targeting);
        return Ok(report);
    }
    let limits = (net.v_lower, net.v_upper);
    let validate = matches!(stop, Stage::Validate | Stage::Run);
    let mut windows = vec![targeting.ranked_windows[0].clone()];
    let mut round = 0;
    loop {
        let hours: Vec<Range<usize>> = windows.iter().map(|w| window_hours(profiles.horizon(), w)).collect();
        info!("planning round {} over {} window(s)", round, windows.len());
        let p = match plan(net, profiles, &hours, &targeting.candidates.buses, &cfg.bess, limits, &solver) {
            Ok(p) => p,
            Err(PlanError::Infeasible { periods }) => {
                let note = format!("{}", PlanError::Infeasible { periods });
                report.rounds.push(Round {
                    windows,
                    plan: None,
                    verdict: None,
                    note: Some(note),
                });
                report.outcome = Outcome::PlanningInfeasible;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        info!("plan: {:.2} kWh at {:?}", p.total_capacity(), p.installed());
        if !validate {
            report.outcome = Outcome::Planned;
            report.rounds.push(Round {
                windows,
                plan: Some(p),
                verdict: None,
                note: None,
            });
            break;
        }
        let v = validate_plan(net, profiles, &p, &cfg.bess, limits, &solver, round)?;
        let pass = v.verdict.pass;
        report.after = Some(voltage_summaries(&v.flows));
        report.post_plan_records = Some(detect_violations(&v.flows, limits.0, limits.1).len());
        report.rounds.push(Round {
            windows: windows.clone(),
            plan: Some(p),
            verdict: Some(v.verdict),
            note: None,
        });
        if pass {
            report.outcome = Outcome::Pass;
            break;
        }
        if round >= cfg.pipeline.max_rounds {
            report.outcome = Outcome::ValidationFailed;
            break;
        }
        match backtrack(&windows, &targeting.ranked_windows) {
            Some(next) => windows = next,
            None => {
                report.outcome = Outcome::WindowsExhausted;
                break;
            }
        }
        round += 1;
    }
    if matches!(stop, Stage::Economics | Stage::Run) && cfg.pipeline.economics {
        if let Some(p) = report.final_plan() {
            let row = stage_economics(net, profiles, p, cfg, &solver)?;
            report.economics.push(row);
        }
    }
    report.targeting = Some(targeting);
    Ok(report)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_summaries<W: Write>(
    before: &[(BusId, FiveNumber)],
    after: Option<&[(BusId, FiveNumber)]>,
    writer: W,
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bus", "stage", "min", "q1", "median", "q3", "max"]).map_err(csv_io)?;
    let mut emit = |stage: &str, rows: &[(BusId, FiveNumber)]| -> Result<(), PipelineError> {
        for (b, f) in rows {
            w.write_record([
                b.to_string(),
                stage.to_string(),
                format!("{:.6}", f.min),
                format!("{:.6}", f.q1),
                format!("{:.6}", f.median),
                format!("{:.6}", f.q3),
                format!("{:.6}", f.max),
            ])
            .map_err(csv_io)?;
        }
        Ok(())
    };
    emit("before", before)?;
    if let Some(a) = after {
        emit("after", a)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> PipelineError {
    PipelineError::Io(e.into())
}

#[derive(Serialize)]
struct RoundOut<'a> {
    round: usize,
    windows: Vec<(String, String)>,
    total_capacity_kwh: Option<f64>,
    objective: Option<f64>,
    verdict: Option<&'a ValidationVerdict>,
    note: Option<&'a str>,
}

#[derive(Serialize)]
struct SummaryOut<'a> {
    outcome: &'a Outcome,
    seed: u64,
    hours: usize,
    scenarios: Option<&'a ScenarioSummary>,
    violation_records: usize,
    worst_voltage: Option<(f64, BusId, String)>,
    candidates: Option<&'a [BusId]>,
    rounds: Vec<RoundOut<'a>>,
    post_plan_violations: Option<usize>,
    economics: &'a [SavingsRow],
}

/// Writes every report file into `dir`.
pub fn emit_reports(report: &PvmReport, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let s = &report.screening;
    write_violation_log(&s.records, create(dir, "violations.csv")?)?;
    {
        let mut w = csv::Writer::from_writer(create(dir, "node_stats.csv")?);
        w.write_record(["bus", "p_uv", "p_ov", "f_viol"]).map_err(csv_io)?;
        for n in &s.node_stats {
            w.write_record([n.bus.to_string(), format!("{:.9}", n.p_uv), format!("{:.9}", n.p_ov), format!("{:.9}", n.f_viol)])
                .map_err(csv_io)?;
        }
        w.flush()?;
    }
    if let Some(d) = &report.distributions {
        d.write_snapshot(create(dir, "event_distributions.json")?)?;
    }
    if let Some(t) = &report.targeting {
        write_scored_days(&t.scored_days, create(dir, "scored_days.csv")?)?;
        write_windows(&t.ranked_windows, create(dir, "windows.csv")?)?;
        write_candidates(&t.candidates, create(dir, "candidates.csv")?)?;
        let mut w = csv::Writer::from_writer(create(dir, "features.csv")?);
        w.write_record(["bus", "s_mean_abs", "f_viol", "e_topo", "s_eol", "m_comb", "cluster"]).map_err(csv_io)?;
        for f in &t.features {
            w.write_record([
                f.bus.to_string(),
                format!("{:.9}", f.s_mean_abs),
                format!("{:.9}", f.f_viol),
                f.e_topo.to_string(),
                format!("{:.9}", f.s_eol),
                format!("{:.9}", f.m_comb),
                f.cluster.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
    }
    if let Some(p) = report.final_plan() {
        write_plan(p, &report.config.bess, create(dir, "plan.json")?)?;
    }
    if !report.economics.is_empty() {
        write_savings(&report.economics, create(dir, "economics.csv")?)?;
    }
    write_summaries(&report.before, report.after.as_deref(), create(dir, "voltage_summary.csv")?)?;
    let (vmin, bus, t) = s.flows.min_voltage();
    let summary = SummaryOut {
        outcome: &report.outcome,
        seed: report.config.seed,
        hours: s.flows.hours(),
        scenarios: report.scenarios.as_ref(),
        violation_records: s.records.len(),
        worst_voltage: (s.flows.hours() > 0).then(|| (vmin, bus, s.flows.timestamps[t].format(TIMESTAMP_FORMAT).to_string())),
        candidates: report.targeting.as_ref().map(|t| t.candidates.buses.as_slice()),
        rounds: report
            .rounds
            .iter()
            .enumerate()
            .map(|(i, r)| RoundOut {
                round: i,
                windows: r.windows.iter().map(|w| (w.start.to_string(), w.end.to_string())).collect(),
                total_capacity_kwh: r.plan.as_ref().map(|p| p.total_capacity()),
                objective: r.plan.as_ref().map(|p| p.objective),
                verdict: r.verdict.as_ref(),
                note: r.note.as_deref(),
            })
            .collect(),
        post_plan_violations: report.post_plan_records,
        economics: &report.economics,
    };
    let mut w = create(dir, "report.json")?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| PipelineError::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PvmConfig::from_toml("network = \"a.json\"\nbogus = 1\n").is_err());
        assert!(PvmConfig::from_toml("network = \"a.json\"\n[stat]\nwindow = 3\n").is_err());
        let c = PvmConfig::from_toml("network = \"a.json\"\n[stat]\nwindow_days = 3\n").unwrap();
        assert_eq!(c.stat.window_days, 3);
        assert_eq!(c.pipeline.max_rounds, 5);
    }

    #[test]
    fn backtrack_appends_next_free_window() {
        let d = |i: u32| NaiveDate::from_ymd_opt(2017, 1, i).unwrap();
        let w = |o: usize| CriticalWindow {
            start: d(o as u32 + 1),
            end: d(o as u32 + 3),
            days: 3,
            score: 1.0,
            offset: o,
        };
        let ranked = vec![w(0), w(3), w(6)];
        let one = backtrack(&[w(0)], &ranked).unwrap();
        assert_eq!(one, vec![w(0), w(3)]);
        let all = backtrack(&one, &ranked).unwrap();
        assert_eq!(all.len(), 3);
        assert!(backtrack(&all, &ranked).is_none());
    }

    #[test]
    fn default_target_is_sixty_percent_of_pool() {
        assert_eq!(default_target(10), 6);
        assert_eq!(default_target(9), 5);
        assert_eq!(default_target(1), 1);
    }

    #[test]
    fn five_numbers() {
        let f = FiveNumber::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    }
}
