//! Battery storage planning: the sizing/placement MISOCP, plan extraction and
//! audits, and fixed-capacity operation (time-of-use cost and loss dispatch).

use std::io::{Read, Write};
use std::ops::Range;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use pvm_conic::{
    solve_relaxation, BigMPolicy, BranchAndBound, ConicError, ConicProgram, IncumbentHeuristic, LinExpr,
    ProgramBuilder, SolveResult, SolveStatus, SolverConfig, VarId,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{BusId, BusKind, LoadProfileSet, NetError, Network, TIMESTAMP_FORMAT};
use crate::vva::{add_flow_hour, extract_hour, hour_loads, loss_expr, ExtraLoad, HourFlow, HourVars};

/// Length of one dispatch interval (h).
pub const DT_HOURS: f64 = 1.0;
/// Voltage limits are enforced this far inside the band (p.u.).
pub const VOLTAGE_MARGIN: f64 = 1e-7;
/// Tolerance of the post-solve plan audits (kW, kvar, kWh).
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("empty candidate set")]
    NoCandidates,
    #[error("candidate bus {0} is not a load bus")]
    BadCandidate(BusId),
    #[error("window hours {start}..{end} exceed the profile horizon of {len} hours")]
    Window { start: usize, end: usize, len: usize },
    #[error("invalid storage parameters: {0}")]
    Spec(String),
    #[error("no plan fixes the violations within the capacity caps; infeasible periods: {}", format_periods(.periods))]
    Infeasible { periods: Vec<(NaiveDateTime, NaiveDateTime)> },
    #[error("solver ended with status {0}")]
    Solver(SolveStatus),
    #[error("plan audit failed: {0}")]
    Audit(String),
    #[error("tariff: {0}")]
    Tariff(String),
    #[error("horizons differ ({0} vs {1} hours)")]
    Horizon(usize, usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_periods(p: &[(NaiveDateTime, NaiveDateTime)]) -> String {
    p.iter()
        .map(|(a, b)| format!("{}..{}", a.format(TIMESTAMP_FORMAT), b.format(TIMESTAMP_FORMAT)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// How the stored energy is tied at the ends of each cyclic segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SocCycle {
    /// Every day starts and ends at the same stored energy.
    Daily,
    /// Every planning window starts and ends at the same stored energy.
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BessSpec {
    pub e_min_kwh: f64,
    pub e_max_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_initial: f64,
    /// Pin the stored energy at both ends of each cycle to `soc_initial`.
    pub pin_initial_soc: bool,
    pub cycle: SocCycle,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub c_rate_ch: f64,
    pub c_rate_dis: f64,
    pub kq_inj: f64,
    pub kq_abs: f64,
    pub cost_per_kwh: f64,
}

impl Default for BessSpec {
    fn default() -> Self {
        Self {
            e_min_kwh: 0.0,
            e_max_kwh: 1000.0,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_initial: 0.5,
            pin_initial_soc: true,
            cycle: SocCycle::Daily,
            eta_ch: 0.95,
            eta_dis: 0.95,
            c_rate_ch: 0.5,
            c_rate_dis: 0.5,
            kq_inj: 0.5,
            kq_abs: 0.5,
            cost_per_kwh: 300.0,
        }
    }
}

impl BessSpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Spec(m.into()));
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return bad("require 0 ≤ soc_min < soc_max ≤ 1");
        }
        if !(self.soc_min..=self.soc_max).contains(&self.soc_initial) {
            return bad("soc_initial must lie in [soc_min, soc_max]");
        }
        if !(self.eta_ch > 0.0 && self.eta_ch <= 1.0 && self.eta_dis > 0.0 && self.eta_dis <= 1.0) {
            return bad("efficiencies must lie in (0, 1]");
        }
        if !(0.0 <= self.e_min_kwh && self.e_min_kwh <= self.e_max_kwh && self.e_max_kwh.is_finite()) {
            return bad("require 0 ≤ e_min ≤ e_max < ∞");
        }
        if [self.c_rate_ch, self.c_rate_dis, self.kq_inj, self.kq_abs, self.cost_per_kwh]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("rates and costs must be finite and non-negative");
        }
        Ok(())
    }

    /// Capital cost of a set of capacities.
    pub fn capital_cost(&self, capacities_kwh: &[f64]) -> f64 {
        capacities_kwh.iter().sum::<f64>() * self.cost_per_kwh
    }
}

/// Capacity of a storage unit in a model: decided by the solver or given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capacity {
    Decide,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct UnitVars {
    pub bus: BusId,
    pub bus_index: usize,
    pub energy: Option<VarId>,
    pub fixed_kwh: f64,
    pub z: Option<VarId>,
    pub ch: Vec<VarId>,
    pub dis: Vec<VarId>,
    pub q_inj: Vec<VarId>,
    pub q_abs: Vec<VarId>,
    /// Stored energy at the end of each hour (kWh).
    pub soc: Vec<VarId>,
    pub u_ch: Vec<VarId>,
    pub u_dis: Vec<VarId>,
    pub u_inj: Vec<VarId>,
    pub u_abs: Vec<VarId>,
}

impl UnitVars {
    fn capacity_expr(&self) -> LinExpr {
        match self.energy {
            Some(e) => LinExpr::var(e),
            None => LinExpr::constant(self.fixed_kwh),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    /// Total installed capital cost.
    Capital,
    /// Total branch losses.
    Losses,
    /// Purchased energy cost with a price ($/kWh) per profile hour.
    Cost(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct StorageModel {
    pub prog: ConicProgram,
    /// Profile hour of each model hour.
    pub hours: Vec<usize>,
    /// Cyclic segments as ranges of model hours.
    pub segments: Vec<Range<usize>>,
    pub flows: Vec<HourVars>,
    pub units: Vec<UnitVars>,
}

/// Splits a profile-hour range into cyclic segments.
pub fn cycle_segments(timestamps: &[NaiveDateTime], windows: &[Range<usize>], cycle: SocCycle) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for w in windows {
        match cycle {
            SocCycle::Window => out.push(w.clone()),
            SocCycle::Daily => out.extend(day_ranges(&timestamps[w.clone()]).into_iter().map(|(_, r)| {
                (r.start + w.start)..(r.end + w.start)
            })),
        }
    }
    out
}

/// Calendar days of a horizon as index ranges.
pub fn day_ranges(timestamps: &[NaiveDateTime]) -> Vec<(NaiveDate, Range<usize>)> {
    let mut out: Vec<(NaiveDate, Range<usize>)> = Vec::new();
    for (t, ts) in timestamps.iter().enumerate() {
        match out.last_mut() {
            Some((d, r)) if *d == ts.date() => r.end = t + 1,
            _ => out.push((ts.date(), t..t + 1)),
        }
    }
    out
}

/// Builds a storage model over `segments` (profile-hour ranges, each cyclic).
pub fn build_storage_model(
    net: &Network,
    profiles: &LoadProfileSet,
    segments: &[Range<usize>],
    units: &[(BusId, Capacity)],
    spec: &BessSpec,
    limits: Option<(f64, f64)>,
    objective: &Objective,
    big_m: BigMPolicy,
) -> Result<StorageModel, PlanError> {
    spec.validate()?;
    profiles.check_covers(net)?;
    for s in segments {
        if s.end > profiles.len() || s.start >= s.end {
            return Err(PlanError::Window {
                start: s.start,
                end: s.end,
                len: profiles.len(),
            });
        }
    }
    let limits = limits.map(|(lo, hi)| (lo + VOLTAGE_MARGIN, hi - VOLTAGE_MARGIN));
    let kw = net.kw_to_pu();
    let mut b = ProgramBuilder::new();
    let mut hours = Vec::new();
    let mut model_segments = Vec::new();
    for s in segments {
        let start = hours.len();
        hours.extend(s.clone());
        model_segments.push(start..hours.len());
    }
    let nh = hours.len();

    let mut uv = Vec::with_capacity(units.len());
    for &(bus, cap) in units {
        let i = net.index_of(bus)?;
        if net.buses()[i].kind != BusKind::Load {
            return Err(PlanError::BadCandidate(bus));
        }
        let (energy, z, fixed_kwh) = match cap {
            Capacity::Decide => {
                let e = b.add_var(format!("E[{}]", bus), Some(0.0), Some(spec.e_max_kwh));
                let z = b.add_binary(format!("z[{}]", bus));
                b.add_le(LinExpr::var(e).with(z, -spec.e_max_kwh), 0.0);
                b.add_ge(LinExpr::var(e).with(z, -spec.e_min_kwh), 0.0);
                (Some(e), Some(z), 0.0)
            }
            Capacity::Fixed(c) => (None, None, c),
        };
        let e_cap = match cap {
            Capacity::Decide => spec.e_max_kwh,
            Capacity::Fixed(c) => c,
        };
        let name = |what: &str, t: usize| format!("{}[{}]@{}", what, bus, hours[t]);
        let mut u = UnitVars {
            bus,
            bus_index: i,
            energy,
            fixed_kwh,
            z,
            ch: Vec::with_capacity(nh),
            dis: Vec::with_capacity(nh),
            q_inj: Vec::with_capacity(nh),
            q_abs: Vec::with_capacity(nh),
            soc: Vec::with_capacity(nh),
            u_ch: Vec::with_capacity(nh),
            u_dis: Vec::with_capacity(nh),
            u_inj: Vec::with_capacity(nh),
            u_abs: Vec::with_capacity(nh),
        };
        let cap_expr = u.capacity_expr();
        let m_ch = big_m.apply(spec.c_rate_ch * e_cap);
        let m_dis = big_m.apply(spec.c_rate_dis * e_cap);
        let m_inj = big_m.apply(spec.kq_inj * e_cap);
        let m_abs = big_m.apply(spec.kq_abs * e_cap);
        for t in 0..nh {
            let ch = b.add_nonneg(name("ch", t));
            let dis = b.add_nonneg(name("dis", t));
            let qi = b.add_nonneg(name("qinj", t));
            let qa = b.add_nonneg(name("qabs", t));
            let soc = b.add_nonneg(name("soc", t));
            let uc = b.add_binary(name("uch", t));
            let ud = b.add_binary(name("udis", t));
            let ui = b.add_binary(name("uinj", t));
            let ua = b.add_binary(name("uabs", t));
            for (p, rate, m, sw) in [
                (ch, spec.c_rate_ch, m_ch, uc),
                (dis, spec.c_rate_dis, m_dis, ud),
                (qi, spec.kq_inj, m_inj, ui),
                (qa, spec.kq_abs, m_abs, ua),
            ] {
                let mut cap_row = LinExpr::var(p);
                cap_row.add_expr(&cap_expr, -rate);
                b.add_le(cap_row, 0.0);
                b.add_le(LinExpr::var(p).with(sw, -m), 0.0);
            }
            b.add_le(LinExpr::var(uc).with(ud, 1.0), 1.0);
            b.add_le(LinExpr::var(ui).with(ua, 1.0), 1.0);
            let mut lo = LinExpr::var(soc);
            lo.add_expr(&cap_expr, -spec.soc_min);
            b.add_ge(lo, 0.0);
            let mut hi = LinExpr::var(soc);
            hi.add_expr(&cap_expr, -spec.soc_max);
            b.add_le(hi, 0.0);
            u.ch.push(ch);
            u.dis.push(dis);
            u.q_inj.push(qi);
            u.q_abs.push(qa);
            u.soc.push(soc);
            u.u_ch.push(uc);
            u.u_dis.push(ud);
            u.u_inj.push(ui);
            u.u_abs.push(ua);
        }
        for seg in &model_segments {
            for t in seg.clone() {
                let prev = if t == seg.start { seg.end - 1 } else { t - 1 };
                let row = LinExpr::var(u.soc[t])
                    .with(u.soc[prev], -1.0)
                    .with(u.ch[t], -spec.eta_ch * DT_HOURS)
                    .with(u.dis[t], DT_HOURS / spec.eta_dis);
                b.add_eq(row, 0.0);
            }
            if spec.pin_initial_soc {
                let mut pin = LinExpr::var(u.soc[seg.end - 1]);
                pin.add_expr(&cap_expr, -spec.soc_initial);
                b.add_eq(pin, 0.0);
            }
        }
        uv.push(u);
    }

    let mut flows = Vec::with_capacity(nh);
    let mut obj = LinExpr::new();
    for (t, &h) in hours.iter().enumerate() {
        let (pl, ql) = hour_loads(net, profiles, h);
        let mut extra = ExtraLoad::zeros(net.num_buses());
        for u in &uv {
            extra.p[u.bus_index].add_term(u.ch[t], kw).add_term(u.dis[t], -kw);
            extra.q[u.bus_index].add_term(u.q_abs[t], kw).add_term(u.q_inj[t], -kw);
        }
        let hv = add_flow_hour(&mut b, net, &format!("@{}", h), &pl, &ql, Some(&extra), net.slack_voltage.at(h), limits);
        match objective {
            Objective::Losses => {
                obj.add_expr(&loss_expr(net, &hv), 1.0 / kw);
            }
            Objective::Cost(prices) => {
                obj.add_term(hv.ps, prices[h] * DT_HOURS / kw);
            }
            Objective::Capital => {}
        }
        flows.push(hv);
    }
    if let Objective::Capital = objective {
        for u in &uv {
            if let Some(e) = u.energy {
                obj.add_term(e, spec.cost_per_kwh);
            }
        }
    }
    b.set_objective(obj);
    Ok(StorageModel {
        prog: b.seal()?,
        hours,
        segments: model_segments,
        flows,
        units: uv,
    })
}

/// The planning program over the window hours with every candidate sized by the solver.
pub fn build_toep(
    net: &Network,
    profiles: &LoadProfileSet,
    windows: &[Range<usize>],
    candidates: &[BusId],
    spec: &BessSpec,
    limits: (f64, f64),
    big_m: BigMPolicy,
) -> Result<StorageModel, PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    for w in windows {
        if w.end > profiles.len() {
            return Err(PlanError::Window {
                start: w.start,
                end: w.end,
                len: profiles.len(),
            });
        }
    }
    let segments = cycle_segments(profiles.horizon(), windows, spec.cycle);
    let units: Vec<(BusId, Capacity)> = candidates.iter().map(|&b| (b, Capacity::Decide)).collect();
    build_storage_model(net, profiles, &segments, &units, spec, Some(limits), &Objective::Capital, big_m)
}

/// Rounds a relaxed storage point to a consistent binary assignment: a unit is
/// installed when its relaxed capacity is non-negligible, and each hour keeps
/// the larger of charge/discharge and of injection/absorption.
pub struct StorageRounding {
    units: Vec<UnitVars>,
    e_tol: f64,
}

impl StorageRounding {
    pub fn new(model: &StorageModel, spec: &BessSpec) -> Self {
        Self {
            units: model.units.clone(),
            e_tol: 1e-6 * spec.e_max_kwh.max(1.0),
        }
    }
}

impl IncumbentHeuristic for StorageRounding {
    fn propose(&self, _prog: &ConicProgram, x: &[f64]) -> Option<Vec<(VarId, f64)>> {
        let mut out = Vec::new();
        let pick = |a: VarId, b: VarId, ua: VarId, ub: VarId, out: &mut Vec<(VarId, f64)>| {
            let a_wins = x[a.0] > x[b.0] || (x[a.0] == x[b.0] && x[ua.0] >= x[ub.0]);
            out.push((ua, if a_wins { 1.0 } else { 0.0 }));
            out.push((ub, if a_wins { 0.0 } else { 1.0 }));
        };
        for u in &self.units {
            if let (Some(e), Some(z)) = (u.energy, u.z) {
                out.push((z, if x[e.0] > self.e_tol { 1.0 } else { 0.0 }));
            }
            for t in 0..u.ch.len() {
                pick(u.ch[t], u.dis[t], u.u_ch[t], u.u_dis[t], &mut out);
                pick(u.q_inj[t], u.q_abs[t], u.u_inj[t], u.u_abs[t], &mut out);
            }
        }
        Some(out)
    }
}

pub fn solve_storage(model: &StorageModel, spec: &BessSpec, cfg: &SolverConfig) -> SolveResult {
    BranchAndBound::new(cfg.clone())
        .with_heuristic(Box::new(StorageRounding::new(model, spec)))
        .solve(&model.prog)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedUnit {
    pub bus: BusId,
    pub installed: bool,
    pub capacity_kwh: f64,
    pub ch_kw: Vec<f64>,
    pub dis_kw: Vec<f64>,
    pub q_inj_kvar: Vec<f64>,
    pub q_abs_kvar: Vec<f64>,
    pub soc_kwh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BessPlan {
    pub units: Vec<PlannedUnit>,
    /// Profile hour of each dispatch entry.
    pub hours: Vec<usize>,
    pub timestamps: Vec<NaiveDateTime>,
    pub segments: Vec<Range<usize>>,
    pub objective: f64,
    pub gap: f64,
    pub status: SolveStatus,
}

impl BessPlan {
    /// A plan that installs nothing.
    pub fn empty() -> Self {
        Self {
            units: Vec::new(),
            hours: Vec::new(),
            timestamps: Vec::new(),
            segments: Vec::new(),
            objective: 0.0,
            gap: 0.0,
            status: SolveStatus::Optimal,
        }
    }

    pub fn installed(&self) -> Vec<(BusId, f64)> {
        self.units
            .iter()
            .filter(|u| u.installed)
            .map(|u| (u.bus, u.capacity_kwh))
            .collect()
    }

    pub fn total_capacity(&self) -> f64 {
        self.units.iter().map(|u| u.capacity_kwh).sum()
    }
}

/// Extracts capacities and dispatch from a solved model. Units whose capacity
/// is negligible are reported as not installed with zero dispatch.
pub fn extract_plan(model: &StorageModel, res: &SolveResult, spec: &BessSpec, timestamps: &[NaiveDateTime]) -> BessPlan {
    let x = &res.x;
    let e_tol = 1e-6 * spec.e_max_kwh.max(1.0);
    let units = model
        .units
        .iter()
        .map(|u| {
            let cap = u.energy.map_or(u.fixed_kwh, |e| x[e.0]);
            let on = u.z.map_or(true, |z| x[z.0] > 0.5) && cap > e_tol;
            let vals = |v: &[VarId]| -> Vec<f64> { v.iter().map(|id| if on { x[id.0] } else { 0.0 }).collect() };
            PlannedUnit {
                bus: u.bus,
                installed: on,
                capacity_kwh: if on { cap } else { 0.0 },
                ch_kw: vals(&u.ch),
                dis_kw: vals(&u.dis),
                q_inj_kvar: vals(&u.q_inj),
                q_abs_kvar: vals(&u.q_abs),
                soc_kwh: vals(&u.soc),
            }
        })
        .collect();
    BessPlan {
        units,
        hours: model.hours.clone(),
        timestamps: model.hours.iter().map(|&h| timestamps[h]).collect(),
        segments: model.segments.clone(),
        objective: res.objective,
        gap: res.gap,
        status: res.status,
    }
}

/// Complementarity, energy bookkeeping, cycle closure and capacity gating.
pub fn audit_plan(plan: &BessPlan, spec: &BessSpec) -> Result<(), PlanError> {
    for u in &plan.units {
        let fail = |m: String| Err(PlanError::Audit(format!("bus {}: {}", u.bus, m)));
        if !u.installed {
            let all = u.ch_kw.iter().chain(&u.dis_kw).chain(&u.q_inj_kvar).chain(&u.q_abs_kvar);
            if u.capacity_kwh != 0.0 || all.into_iter().any(|v| v.abs() > AUDIT_TOL) {
                return fail("uninstalled unit has capacity or dispatch".into());
            }
            continue;
        }
        let cap = u.capacity_kwh;
        if cap > spec.e_max_kwh + AUDIT_TOL || cap < spec.e_min_kwh - AUDIT_TOL {
            return fail(format!("capacity {} outside bounds", cap));
        }
        for t in 0..u.ch_kw.len() {
            if u.ch_kw[t].min(u.dis_kw[t]) > AUDIT_TOL {
                return fail(format!("simultaneous charge/discharge at hour {}", plan.hours[t]));
            }
            if u.q_inj_kvar[t].min(u.q_abs_kvar[t]) > AUDIT_TOL {
                return fail(format!("simultaneous injection/absorption at hour {}", plan.hours[t]));
            }
            if u.ch_kw[t] > spec.c_rate_ch * cap + AUDIT_TOL || u.dis_kw[t] > spec.c_rate_dis * cap + AUDIT_TOL {
                return fail(format!("active power above rating at hour {}", plan.hours[t]));
            }
            let s = u.soc_kwh[t];
            if s < spec.soc_min * cap - AUDIT_TOL || s > spec.soc_max * cap + AUDIT_TOL {
                return fail(format!("stored energy {} outside band at hour {}", s, plan.hours[t]));
            }
        }
        for seg in &plan.segments {
            let mut e = u.soc_kwh[seg.end - 1];
            for t in seg.clone() {
                e += (spec.eta_ch * u.ch_kw[t] - u.dis_kw[t] / spec.eta_dis) * DT_HOURS;
                if (e - u.soc_kwh[t]).abs() > AUDIT_TOL {
                    return fail(format!("energy replay differs by {:.3e} at hour {}", e - u.soc_kwh[t], plan.hours[t]));
                }
            }
            if spec.pin_initial_soc && (u.soc_kwh[seg.end - 1] - spec.soc_initial * cap).abs() > AUDIT_TOL {
                return fail("cycle does not close at the initial state of charge".into());
            }
        }
    }
    Ok(())
}

/// Periods (as timestamp ranges) whose segment is infeasible even with every
/// candidate at the capacity cap.
fn infeasible_periods(
    net: &Network,
    profiles: &LoadProfileSet,
    segments: &[Range<usize>],
    candidates: &[BusId],
    spec: &BessSpec,
    limits: (f64, f64),
    cfg: &SolverConfig,
) -> Vec<(NaiveDateTime, NaiveDateTime)> {
    let units: Vec<(BusId, Capacity)> = candidates.iter().map(|&b| (b, Capacity::Fixed(spec.e_max_kwh))).collect();
    segments
        .par_iter()
        .filter_map(|s| {
            let m = build_storage_model(net, profiles, &[s.clone()], &units, spec, Some(limits), &Objective::Losses, cfg.big_m).ok()?;
            let r = solve_relaxation(&m.prog, cfg);
            (r.status == SolveStatus::Infeasible).then(|| (profiles.horizon()[s.start], profiles.horizon()[s.end - 1]))
        })
        .collect()
}

/// Sizes and places storage over the windows; audits the result.
pub fn plan(
    net: &Network,
    profiles: &LoadProfileSet,
    windows: &[Range<usize>],
    candidates: &[BusId],
    spec: &BessSpec,
    limits: (f64, f64),
    cfg: &SolverConfig,
) -> Result<BessPlan, PlanError> {
    let model = build_toep(net, profiles, windows, candidates, spec, limits, cfg.big_m)?;
    plan_model(net, profiles, &model, candidates, spec, limits, cfg)
}

pub fn plan_model(
    net: &Network,
    profiles: &LoadProfileSet,
    model: &StorageModel,
    candidates: &[BusId],
    spec: &BessSpec,
    limits: (f64, f64),
    cfg: &SolverConfig,
) -> Result<BessPlan, PlanError> {
    let res = solve_storage(model, spec, cfg);
    match res.status {
        SolveStatus::Optimal | SolveStatus::GapLimit if res.has_point() => {}
        SolveStatus::Infeasible => {
            let periods = infeasible_periods(net, profiles, &model.segments_as_profile(), candidates, spec, limits, cfg);
            return Err(PlanError::Infeasible { periods });
        }
        other => return Err(PlanError::Solver(other)),
    }
    let plan = extract_plan(model, &res, spec, profiles.horizon());
    audit_plan(&plan, spec)?;
    Ok(plan)
}

impl StorageModel {
    /// Segments as profile-hour ranges.
    pub fn segments_as_profile(&self) -> Vec<Range<usize>> {
        self.segments
            .iter()
            .map(|s| self.hours[s.start]..self.hours[s.end - 1] + 1)
            .collect()
    }
}

pub fn write_plan<W: Write>(plan: &BessPlan, spec: &BessSpec, writer: W) -> Result<(), PlanError> {
    #[derive(Serialize)]
    struct UnitOut {
        bus: BusId,
        installed: bool,
        capacity_kwh: f64,
    }
    #[derive(Serialize)]
    struct HourOut {
        timestamp: String,
        bus: BusId,
        ch_kw: f64,
        dis_kw: f64,
        q_inj_kvar: f64,
        q_abs_kvar: f64,
        soc_kwh: f64,
    }
    #[derive(Serialize)]
    struct PlanOut<'a> {
        objective: f64,
        gap: f64,
        status: &'a str,
        total_capacity_kwh: f64,
        units: Vec<UnitOut>,
        dispatch: Vec<HourOut>,
        config: &'a BessSpec,
    }
    let out = PlanOut {
        objective: plan.objective,
        gap: plan.gap,
        status: plan.status.as_str(),
        total_capacity_kwh: plan.total_capacity(),
        units: plan
            .units
            .iter()
            .map(|u| UnitOut {
                bus: u.bus,
                installed: u.installed,
                capacity_kwh: u.capacity_kwh,
            })
            .collect(),
        dispatch: plan
            .units
            .iter()
            .filter(|u| u.installed)
            .flat_map(|u| {
                plan.timestamps.iter().enumerate().map(move |(t, ts)| HourOut {
                    timestamp: ts.format(TIMESTAMP_FORMAT).to_string(),
                    bus: u.bus,
                    ch_kw: u.ch_kw[t],
                    dis_kw: u.dis_kw[t],
                    q_inj_kvar: u.q_inj_kvar[t],
                    q_abs_kvar: u.q_abs_kvar[t],
                    soc_kwh: u.soc_kwh[t],
                })
            })
            .collect(),
        config: spec,
    };
    serde_json::to_writer_pretty(writer, &out).map_err(|e| PlanError::Io(e.into()))
}

/// Hourly energy price over a horizon ($/kWh).
#[derive(Debug, Clone, PartialEq)]
pub struct TouTariff {
    pub prices: Vec<f64>,
}

/// Default daily schedule: off-peak overnight, shoulder by day, peak 17:00–21:00.
pub const DEFAULT_TOU: [f64; 24] = [
    0.08, 0.08, 0.08, 0.08, 0.08, 0.08, 0.08, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.25, 0.25,
    0.25, 0.25, 0.12, 0.08, 0.08,
];

impl TouTariff {
    pub fn from_daily(schedule: &[f64; 24], timestamps: &[NaiveDateTime]) -> Result<Self, PlanError> {
        if schedule.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(PlanError::Tariff("prices must be finite and non-negative".into()));
        }
        Ok(Self {
            prices: timestamps.iter().map(|t| schedule[t.hour() as usize]).collect(),
        })
    }

    pub fn flat(price: f64, hours: usize) -> Self {
        Self {
            prices: vec![price; hours],
        }
    }

    /// Rows `(hour_of_day | timestamp, price_per_kwh)`.
    pub fn read_csv<R: Read>(reader: R, timestamps: &[NaiveDateTime]) -> Result<Self, PlanError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let key = headers.get(0).unwrap_or("").to_string();
        let mut daily = [f64::NAN; 24];
        let mut by_ts = std::collections::HashMap::new();
        for row in rdr.records() {
            let row = row?;
            let price: f64 = row
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| PlanError::Tariff(format!("bad price in row {:?}", row)))?;
            if !(price >= 0.0 && price.is_finite()) {
                return Err(PlanError::Tariff(format!("negative or non-finite price {}", price)));
            }
            let k = row.get(0).unwrap_or("").trim();
            if key == "hour_of_day" {
                let h: usize = k.parse().map_err(|_| PlanError::Tariff(format!("bad hour '{}'", k)))?;
                if h >= 24 {
                    return Err(PlanError::Tariff(format!("hour {} out of range", h)));
                }
                daily[h] = price;
            } else if key == "timestamp" {
                let ts = NaiveDateTime::parse_from_str(k, TIMESTAMP_FORMAT)
                    .map_err(|e| PlanError::Tariff(format!("timestamp '{}': {}", k, e)))?;
                by_ts.insert(ts, price);
            } else {
                return Err(PlanError::Tariff("first column must be hour_of_day or timestamp".into()));
            }
        }
        if key == "hour_of_day" {
            if daily.iter().any(|p| p.is_nan()) {
                return Err(PlanError::Tariff("schedule must list all 24 hours".into()));
            }
            return Self::from_daily(&daily, timestamps);
        }
        let prices = timestamps
            .iter()
            .map(|t| {
                by_ts
                    .get(t)
                    .copied()
                    .ok_or_else(|| PlanError::Tariff(format!("no price for {}", t.format(TIMESTAMP_FORMAT))))
            })
            .collect::<Result<Vec<f64>, PlanError>>()?;
        Ok(Self { prices })
    }
}

/// Result of operating one day.
#[derive(Debug, Clone)]
pub struct DayOperation {
    pub date: NaiveDate,
    pub hours: Range<usize>,
    /// `None` when the day has no feasible dispatch.
    pub flows: Option<Vec<HourFlow>>,
    /// Objective value ($ or kWh) of the adopted dispatch.
    pub objective: f64,
    /// Objective value without storage; `None` when that is infeasible.
    pub baseline: Option<f64>,
    pub used_storage: bool,
}

/// Which daily operating problem to solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DayGoal<'a> {
    Losses,
    Cost(&'a [f64]),
}

fn day_value(net: &Network, flows: &[HourFlow], hours: Range<usize>, goal: DayGoal) -> f64 {
    let kw = net.kw_to_pu();
    match goal {
        DayGoal::Losses => flows.iter().map(|f| f.loss / kw * DT_HOURS).sum(),
        DayGoal::Cost(p) => flows.iter().zip(hours).map(|(f, h)| p[h] * f.ps / kw * DT_HOURS).sum(),
    }
}

/// Operates one day: the network alone and, when units are installed, with
/// storage; the cheaper feasible alternative is adopted.
pub fn operate_day(
    net: &Network,
    profiles: &LoadProfileSet,
    date: NaiveDate,
    hours: Range<usize>,
    units: &[(BusId, f64)],
    spec: &BessSpec,
    goal: DayGoal,
    limits: Option<(f64, f64)>,
    cfg: &SolverConfig,
) -> Result<DayOperation, PlanError> {
    let objective = match goal {
        DayGoal::Losses => Objective::Losses,
        DayGoal::Cost(p) => Objective::Cost(p.to_vec()),
    };
    let solve = |units: &[(BusId, Capacity)]| -> Result<Option<Vec<HourFlow>>, PlanError> {
        let m = build_storage_model(net, profiles, &[hours.clone()], units, spec, limits, &objective, cfg.big_m)?;
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
            other => Err(PlanError::Solver(other)),
        }
    };
    let bare = solve(&[])?;
    let active: Vec<(BusId, Capacity)> = units
        .iter()
        .filter(|u| u.1 > 0.0)
        .map(|&(b, c)| (b, Capacity::Fixed(c)))
        .collect();
    let with = if active.is_empty() { None } else { solve(&active)? };
    let value = |f: &Option<Vec<HourFlow>>| f.as_ref().map(|f| day_value(net, f, hours.clone(), goal));
    let (vb, vw) = (value(&bare), value(&with));
    let (flows, used) = match (vb, vw) {
        (Some(b), Some(w)) if w < b => (with, true),
        (Some(_), _) => (bare, false),
        (None, Some(_)) => (with, true),
        (None, None) => (None, false),
    };
    let objective = value(&flows).unwrap_or(f64::INFINITY);
    Ok(DayOperation {
        date,
        hours,
        flows,
        objective,
        baseline: vb,
        used_storage: used,
    })
}

/// Operates every day of the horizon in parallel.
pub fn operate_year(
    net: &Network,
    profiles: &LoadProfileSet,
    units: &[(BusId, f64)],
    spec: &BessSpec,
    goal: DayGoal,
    limits: Option<(f64, f64)>,
    cfg: &SolverConfig,
) -> Result<Vec<DayOperation>, PlanError> {
    day_ranges(profiles.horizon())
        .into_par_iter()
        .map(|(d, r)| operate_day(net, profiles, d, r, units, spec, goal, limits, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperationSummary {
    pub hours: usize,
    pub cost: f64,
    pub losses_kwh: f64,
    pub infeasible_days: Vec<NaiveDate>,
}

/// Time-of-use cost and minimum losses of operating the installed units.
pub fn tou_dispatch(
    net: &Network,
    profiles: &LoadProfileSet,
    plan: &BessPlan,
    tariff: &TouTariff,
    spec: &BessSpec,
    limits: Option<(f64, f64)>,
    cfg: &SolverConfig,
) -> Result<OperationSummary, PlanError> {
    Ok(tou_compare(net, profiles, plan, tariff, spec, limits, cfg)?.1)
}

/// Operating summaries without and with the installed units, from one pass
/// over the horizon.
pub fn tou_compare(
    net: &Network,
    profiles: &LoadProfileSet,
    plan: &BessPlan,
    tariff: &TouTariff,
    spec: &BessSpec,
    limits: Option<(f64, f64)>,
    cfg: &SolverConfig,
) -> Result<(OperationSummary, OperationSummary), PlanError> {
    if tariff.prices.len() < profiles.len() {
        return Err(PlanError::Horizon(tariff.prices.len(), profiles.len()));
    }
    let units = plan.installed();
    let cost_days = operate_year(net, profiles, &units, spec, DayGoal::Cost(&tariff.prices), limits, cfg)?;
    let loss_days = operate_year(net, profiles, &units, spec, DayGoal::Losses, limits, cfg)?;
    let summarize = |value: &dyn Fn(&DayOperation) -> Option<f64>| {
        let mut infeasible: Vec<NaiveDate> =
            cost_days.iter().chain(&loss_days).filter(|d| value(d).is_none()).map(|d| d.date).collect();
        infeasible.sort();
        infeasible.dedup();
        let sum = |days: &[DayOperation]| days.iter().filter_map(value).sum::<f64>();
        OperationSummary {
            hours: profiles.len(),
            cost: sum(&cost_days),
            losses_kwh: sum(&loss_days),
            infeasible_days: infeasible,
        }
    };
    let without = summarize(&|d| d.baseline);
    let with = summarize(&|d| d.flows.is_some().then_some(d.objective));
    Ok((without, with))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsRow {
    pub label: String,
    pub cost_without: f64,
    pub cost_with: f64,
    pub savings: f64,
    pub savings_pct: f64,
    pub loss_without_mwh: f64,
    pub loss_with_mwh: f64,
    pub loss_reduction_mwh: f64,
    pub loss_reduction_pct: f64,
}

fn pct(delta: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * delta / base
    }
}

pub fn savings_report(label: &str, baseline: &OperationSummary, with: &OperationSummary) -> Result<SavingsRow, PlanError> {
    if baseline.hours != with.hours {
        return Err(PlanError::Horizon(baseline.hours, with.hours));
    }
    Ok(savings_row(label, baseline.cost, with.cost, baseline.losses_kwh / 1000.0, with.losses_kwh / 1000.0))
}

pub fn savings_row(label: &str, cost_without: f64, cost_with: f64, loss_without_mwh: f64, loss_with_mwh: f64) -> SavingsRow {
    SavingsRow {
        label: label.to_string(),
        cost_without,
        cost_with,
        savings: cost_without - cost_with,
        savings_pct: pct(cost_without - cost_with, cost_without),
        loss_without_mwh,
        loss_with_mwh,
        loss_reduction_mwh: loss_without_mwh - loss_with_mwh,
        loss_reduction_pct: pct(loss_without_mwh - loss_with_mwh, loss_without_mwh),
    }
}

pub fn write_savings<W: Write>(rows: &[SavingsRow], writer: W) -> Result<(), PlanError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "case",
        "cost_wo_bess",
        "cost_w_bess",
        "savings",
        "savings_pct",
        "loss_wo_bess_mwh",
        "loss_w_bess_mwh",
        "loss_reduction_mwh",
        "loss_reduction_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            format!("{:.2}", r.cost_without),
            format!("{:.2}", r.cost_with),
            format!("{:.2}", r.savings),
            format!("{:.2}", r.savings_pct),
            format!("{:.3}", r.loss_without_mwh),
            format!("{:.3}", r.loss_with_mwh),
            format!("{:.3}", r.loss_reduction_mwh),
            format!("{:.2}", r.loss_reduction_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}
