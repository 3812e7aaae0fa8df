//! Loss-minimizing branch-flow screening and voltage-violation bookkeeping.
//!
//! Each hour is an independent second-order cone program in squared voltages
//! `v`, squared currents `l` and sending-end flows `P`, `Q`. The shared hourly
//! block is reused by the planner with extra storage terms and voltage bounds.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDateTime;
use pvm_conic::{
    solve_relaxation, ConicError, ConicProgram, LinExpr, ProgramBuilder, SolveStatus, SolverConfig, VarId,
};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::netmodel::{BusId, LoadProfileSet, NetError, Network, TIMESTAMP_FORMAT};

#[derive(Debug, Error)]
pub enum VvaError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("hour {hour} ({timestamp}): solver returned {status}")]
    Solve {
        hour: usize,
        timestamp: NaiveDateTime,
        status: SolveStatus,
    },
    #[error("hour {hour}: cone on branch {from}-{to} is slack by {slack:.3e}")]
    ConeSlack {
        hour: usize,
        from: BusId,
        to: BusId,
        slack: f64,
    },
    #[error("hour index {0} outside the profile horizon")]
    HourOutOfRange(usize),
    #[error("violation log: {0}")]
    Log(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Variables of one hourly branch-flow block.
#[derive(Debug, Clone)]
pub struct HourVars {
    /// Squared voltage per bus (network bus order).
    pub v: Vec<VarId>,
    /// Sending-end active flow per branch.
    pub p: Vec<VarId>,
    pub q: Vec<VarId>,
    /// Squared current per branch.
    pub l: Vec<VarId>,
    pub ps: VarId,
    pub qs: VarId,
}

/// Per-bus extra load-side terms in p.u. (positive draws from the grid).
#[derive(Debug, Clone, Default)]
pub struct ExtraLoad {
    pub p: Vec<LinExpr>,
    pub q: Vec<LinExpr>,
}

impl ExtraLoad {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![LinExpr::new(); n],
            q: vec![LinExpr::new(); n],
        }
    }
}

/// Adds one hour of branch-flow rows. Loads are per bus in p.u.; `limits` bounds
/// every non-slack voltage magnitude when given.
pub fn add_flow_hour(
    b: &mut ProgramBuilder,
    net: &Network,
    tag: &str,
    p_load: &[f64],
    q_load: &[f64],
    extra: Option<&ExtraLoad>,
    v_slack: f64,
    limits: Option<(f64, f64)>,
) -> HourVars {
    let nb = net.num_buses();
    let slack = net.slack_index();
    let v: Vec<VarId> = (0..nb)
        .map(|i| {
            let name = format!("v[{}]{}", net.buses()[i].id, tag);
            match limits {
                Some((lo, hi)) if i != slack => b.add_var(name, Some(lo * lo), Some(hi * hi)),
                _ => b.add_free(name),
            }
        })
        .collect();
    let mut p = Vec::with_capacity(net.num_branches());
    let mut q = Vec::with_capacity(net.num_branches());
    let mut l = Vec::with_capacity(net.num_branches());
    for br in net.branches() {
        let name = format!("{}-{}]{}", br.from, br.to, tag);
        p.push(b.add_free(format!("P[{}", name)));
        q.push(b.add_free(format!("Q[{}", name)));
        l.push(b.add_var(format!("l[{}", name), None, br.i_sq_limit));
    }
    let ps = b.add_free(format!("Ps{}", tag));
    let qs = b.add_free(format!("Qs{}", tag));

    for i in 0..nb {
        // Inflow minus outflow equals the bus load (plus any extra load terms).
        let mut bal_p = LinExpr::new();
        let mut bal_q = LinExpr::new();
        match net.upstream_branch(i) {
            Some(k) => {
                let br = &net.branches()[k];
                bal_p.add_term(p[k], 1.0).add_term(l[k], -br.r);
                bal_q.add_term(q[k], 1.0).add_term(l[k], -br.x);
            }
            None => {
                bal_p.add_term(ps, 1.0);
                bal_q.add_term(qs, 1.0);
            }
        }
        for &m in net.downstream_branches(i) {
            bal_p.add_term(p[m], -1.0);
            bal_q.add_term(q[m], -1.0);
        }
        if let Some(ex) = extra {
            bal_p.add_expr(&ex.p[i], -1.0);
            bal_q.add_expr(&ex.q[i], -1.0);
        }
        b.add_eq(bal_p, p_load[i]);
        b.add_eq(bal_q, q_load[i]);
    }
    for (k, br) in net.branches().iter().enumerate() {
        let (i, j) = net.branch_ends(k);
        let drop = LinExpr::var(v[j])
            .with(v[i], -1.0)
            .with(p[k], 2.0 * br.r)
            .with(q[k], 2.0 * br.x)
            .with(l[k], -(br.r * br.r + br.x * br.x));
        b.add_eq(drop, 0.0);
        b.add_rotated_cone(LinExpr::var(v[i]), LinExpr::var(l[k]), vec![LinExpr::var(p[k]), LinExpr::var(q[k])]);
    }
    b.add_eq(LinExpr::var(v[slack]), v_slack * v_slack);
    HourVars { v, p, q, l, ps, qs }
}

/// Loss objective `Σ r·l` of one hourly block.
pub fn loss_expr(net: &Network, h: &HourVars) -> LinExpr {
    let mut e = LinExpr::new();
    for (k, br) in net.branches().iter().enumerate() {
        e.add_term(h.l[k], br.r);
    }
    e
}

/// Per-bus loads of one hour in p.u. (network bus order).
pub fn hour_loads(net: &Network, profiles: &LoadProfileSet, hour: usize) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = profiles.snapshot(net, hour);
    let f = net.kw_to_pu();
    (p.iter().map(|v| v * f).collect(), q.iter().map(|v| v * f).collect())
}

/// Builds the screening program over the given hours (no voltage limits).
pub fn build_vva(net: &Network, profiles: &LoadProfileSet, hours: &[usize]) -> Result<(ConicProgram, Vec<HourVars>), VvaError> {
    profiles.check_covers(net)?;
    let mut b = ProgramBuilder::new();
    let mut blocks = Vec::with_capacity(hours.len());
    let mut obj = LinExpr::new();
    for &t in hours {
        if t >= profiles.len() {
            return Err(VvaError::HourOutOfRange(t));
        }
        let (pl, ql) = hour_loads(net, profiles, t);
        let h = add_flow_hour(&mut b, net, &format!("@{}", t), &pl, &ql, None, net.slack_voltage.at(t), None);
        obj.add_expr(&loss_expr(net, &h), 1.0);
        blocks.push(h);
    }
    b.set_objective(obj);
    Ok((b.seal()?, blocks))
}

/// Hourly branch-flow results in p.u.; outer index bus or branch, inner index hour.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub timestamps: Vec<NaiveDateTime>,
    pub bus_ids: Vec<BusId>,
    pub v_sq: Vec<Vec<f64>>,
    pub i_sq: Vec<Vec<f64>>,
    pub p_flow: Vec<Vec<f64>>,
    pub q_flow: Vec<Vec<f64>>,
    pub p_slack: Vec<f64>,
    pub q_slack: Vec<f64>,
    pub losses: Vec<f64>,
}

impl FlowSolution {
    pub fn voltage(&self, bus: usize, t: usize) -> f64 {
        self.v_sq[bus][t].max(0.0).sqrt()
    }

    pub fn hours(&self) -> usize {
        self.timestamps.len()
    }

    /// Lowest voltage over all buses and hours with its bus id and hour.
    pub fn min_voltage(&self) -> (f64, BusId, usize) {
        let mut best = (f64::INFINITY, 0, 0);
        for (i, series) in self.v_sq.iter().enumerate() {
            for (t, &v) in series.iter().enumerate() {
                let vm = v.max(0.0).sqrt();
                if vm < best.0 {
                    best = (vm, self.bus_ids[i], t);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct VvaOptions {
    pub solver: SolverConfig,
    /// Largest accepted `v·l − (P² + Q²)` at the optimum.
    pub cone_tol: f64,
}

impl Default for VvaOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            cone_tol: 1e-6,
        }
    }
}

/// One solved hour.
#[derive(Debug, Clone)]
pub struct HourFlow {
    pub v_sq: Vec<f64>,
    pub i_sq: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub ps: f64,
    pub qs: f64,
    pub loss: f64,
}

/// Solves a single hour with the given per-bus loads (p.u.).
pub fn solve_hour(
    net: &Network,
    p_load: &[f64],
    q_load: &[f64],
    v_slack: f64,
    opts: &VvaOptions,
) -> Result<HourFlow, SolveStatus> {
    let mut b = ProgramBuilder::new();
    let h = add_flow_hour(&mut b, net, "", p_load, q_load, None, v_slack, None);
    b.set_objective(loss_expr(net, &h));
    let prog = b.seal().expect("flow block references only its own variables");
    let r = solve_relaxation(&prog, &opts.solver);
    if r.status != SolveStatus::Optimal {
        return Err(r.status);
    }
    Ok(extract_hour(net, &h, &r.x))
}

pub fn extract_hour(net: &Network, h: &HourVars, x: &[f64]) -> HourFlow {
    let i_sq: Vec<f64> = h.l.iter().map(|v| x[v.0]).collect();
    let loss = net.branches().iter().zip(&i_sq).map(|(br, l)| br.r * l).sum();
    HourFlow {
        v_sq: h.v.iter().map(|v| x[v.0]).collect(),
        i_sq,
        p: h.p.iter().map(|v| x[v.0]).collect(),
        q: h.q.iter().map(|v| x[v.0]).collect(),
        ps: x[h.ps.0],
        qs: x[h.qs.0],
        loss,
    }
}

/// Largest `v·l − (P² + Q²)` over the branches of one solved hour.
pub fn cone_slack(net: &Network, f: &HourFlow) -> (f64, usize) {
    let mut worst = (f64::NEG_INFINITY, 0);
    for k in 0..net.num_branches() {
        let (i, _) = net.branch_ends(k);
        let s = f.v_sq[i] * f.i_sq[k] - (f.p[k] * f.p[k] + f.q[k] * f.q[k]);
        if s > worst.0 {
            worst = (s, k);
        }
    }
    worst
}

/// Solves every hour of the horizon independently and in parallel.
pub fn run_vva(net: &Network, profiles: &LoadProfileSet) -> Result<FlowSolution, VvaError> {
    run_vva_with(net, profiles, &VvaOptions::default())
}

pub fn run_vva_with(net: &Network, profiles: &LoadProfileSet, opts: &VvaOptions) -> Result<FlowSolution, VvaError> {
    profiles.check_covers(net)?;
    let hours: Vec<Result<HourFlow, VvaError>> = (0..profiles.len())
        .into_par_iter()
        .map(|t| {
            let (pl, ql) = hour_loads(net, profiles, t);
            let f = solve_hour(net, &pl, &ql, net.slack_voltage.at(t), opts).map_err(|status| VvaError::Solve {
                hour: t,
                timestamp: profiles.horizon()[t],
                status,
            })?;
            let (slack, k) = cone_slack(net, &f);
            if slack > opts.cone_tol {
                let br = &net.branches()[k];
                return Err(VvaError::ConeSlack {
                    hour: t,
                    from: br.from,
                    to: br.to,
                    slack,
                });
            }
            Ok(f)
        })
        .collect();
    let mut flows = Vec::with_capacity(hours.len());
    for h in hours {
        flows.push(h?);
    }
    Ok(assemble(net, profiles.horizon().to_vec(), &flows))
}

pub fn assemble(net: &Network, timestamps: Vec<NaiveDateTime>, flows: &[HourFlow]) -> FlowSolution {
    let nb = net.num_buses();
    let nl = net.num_branches();
    let by_bus = |f: fn(&HourFlow) -> &Vec<f64>, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|i| flows.iter().map(|h| f(h)[i]).collect()).collect()
    };
    FlowSolution {
        timestamps,
        bus_ids: net.buses().iter().map(|b| b.id).collect(),
        v_sq: by_bus(|h| &h.v_sq, nb),
        i_sq: by_bus(|h| &h.i_sq, nl),
        p_flow: by_bus(|h| &h.p, nl),
        q_flow: by_bus(|h| &h.q, nl),
        p_slack: flows.iter().map(|h| h.ps).collect(),
        q_slack: flows.iter().map(|h| h.qs).collect(),
        losses: flows.iter().map(|h| h.loss).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    Under,
    Over,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationRecord {
    pub bus: BusId,
    pub timestamp: NaiveDateTime,
    pub voltage: f64,
    pub severity: f64,
    pub kind: ViolationKind,
}

/// Severity of a voltage magnitude against the band (zero inside it).
pub fn severity(v: f64, v_lower: f64, v_upper: f64) -> Option<(f64, ViolationKind)> {
    if v < v_lower {
        Some((v_lower - v, ViolationKind::Under))
    } else if v > v_upper {
        Some((v - v_upper, ViolationKind::Over))
    } else {
        None
    }
}

/// Every bus-hour outside `[v_lower, v_upper]`, ordered by hour then bus.
pub fn detect_violations(sol: &FlowSolution, v_lower: f64, v_upper: f64) -> Vec<ViolationRecord> {
    let mut out = Vec::new();
    for t in 0..sol.hours() {
        for (i, &bus) in sol.bus_ids.iter().enumerate() {
            let v = sol.voltage(i, t);
            if let Some((s, kind)) = severity(v, v_lower, v_upper) {
                out.push(ViolationRecord {
                    bus,
                    timestamp: sol.timestamps[t],
                    voltage: v,
                    severity: s,
                    kind,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeViolationStats {
    pub bus: BusId,
    pub p_uv: f64,
    pub p_ov: f64,
    pub f_viol: f64,
}

/// Under/over-voltage hour fractions per bus.
pub fn node_stats(records: &[ViolationRecord], horizon_len: usize, buses: &[BusId]) -> Vec<NodeViolationStats> {
    let mut hours: BTreeMap<(BusId, ViolationKind), BTreeSet<NaiveDateTime>> = BTreeMap::new();
    for r in records {
        hours.entry((r.bus, r.kind)).or_default().insert(r.timestamp);
    }
    let n = horizon_len.max(1) as f64;
    buses
        .iter()
        .map(|&bus| {
            let count = |k| hours.get(&(bus, k)).map_or(0, |s| s.len()) as f64;
            let p_uv = count(ViolationKind::Under) / n;
            let p_ov = count(ViolationKind::Over) / n;
            NodeViolationStats {
                bus,
                p_uv,
                p_ov,
                f_viol: p_uv + p_ov,
            }
        })
        .collect()
}

pub fn write_violation_log<W: Write>(records: &[ViolationRecord], writer: W) -> Result<(), VvaError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "bus_id", "voltage_pu", "severity_pu"])?;
    for r in records {
        w.write_record([
            r.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            r.bus.to_string(),
            format!("{:.9}", r.voltage),
            format!("{:.9}", r.severity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a violation log; records below 1 p.u. are taken as undervoltage.
pub fn read_violation_log<R: Read>(reader: R) -> Result<Vec<ViolationRecord>, VvaError> {
    #[derive(Deserialize)]
    struct Row {
        timestamp: String,
        bus_id: BusId,
        voltage_pu: f64,
        severity_pu: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        let timestamp = NaiveDateTime::parse_from_str(&row.timestamp, TIMESTAMP_FORMAT)
            .map_err(|e| VvaError::Log(format!("timestamp '{}': {}", row.timestamp, e)))?;
        if !(row.severity_pu > 0.0) {
            return Err(VvaError::Log(format!("non-positive severity at {}", row.timestamp)));
        }
        out.push(ViolationRecord {
            bus: row.bus_id,
            timestamp,
            voltage: row.voltage_pu,
            severity: row.severity_pu,
            kind: if row.voltage_pu < 1.0 {
                ViolationKind::Under
            } else {
                ViolationKind::Over
            },
        });
    }
    Ok(out)
}
