//! Radial feeder model, topology queries and hourly load profiles.
//!
//! Impedances are stored in per-unit on the network's own bases; loads stay
//! in kW/kvar and are converted with [`Network::kw_to_pu`] when a model is built.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BusId = u32;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network document could not be parsed: {0}")]
    Parse(String),
    #[error("network has no slack bus")]
    MissingSlack,
    #[error("network has more than one slack bus ({0} and {1})")]
    MultipleSlack(BusId, BusId),
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate branch {0}-{1}")]
    DuplicateBranch(BusId, BusId),
    #[error("branch {0}-{1} references unknown bus {2}")]
    DanglingBranch(BusId, BusId, BusId),
    #[error("network is not radial: {buses} buses but {branches} branches")]
    NonRadial { buses: usize, branches: usize },
    #[error("network is disconnected: bus {0} is unreachable from the slack")]
    Disconnected(BusId),
    #[error("branch {0}-{1}: {2}")]
    InvalidBranch(BusId, BusId, String),
    #[error("invalid network data: {0}")]
    Invalid(String),
    #[error("unknown bus id {0}")]
    UnknownBus(BusId),
    #[error("invalid load profiles: {0}")]
    Profile(String),
    #[error("growth factor must be positive, got {0}")]
    InvalidGrowth(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub p_base_kw: f64,
    pub q_base_kvar: f64,
}

/// Branch oriented away from the slack: `from` is the upstream end.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    pub i_sq_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlackVoltage {
    Constant(f64),
    Hourly(Vec<f64>),
}

impl SlackVoltage {
    pub fn at(&self, hour: usize) -> f64 {
        match self {
            SlackVoltage::Constant(v) => *v,
            SlackVoltage::Hourly(vs) => vs[hour % vs.len()],
        }
    }
}

/// Validated radial network rooted at its slack bus.
#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    pub v_lower: f64,
    pub v_upper: f64,
    pub slack_voltage: SlackVoltage,
    index: HashMap<BusId, usize>,
    slack: usize,
    /// Parent bus index and connecting branch index, `None` at the slack.
    parent: Vec<Option<(usize, usize)>>,
    /// Downstream branch indices of each bus.
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    #[serde(default)]
    pub name: String,
    pub bases: BasesDoc,
    #[serde(default)]
    pub limits: Option<LimitsDoc>,
    #[serde(default)]
    pub slack_voltage_pu: Option<f64>,
    pub buses: Vec<BusDoc>,
    pub branches: Vec<BranchDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasesDoc {
    pub s_mva: f64,
    pub v_kv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsDoc {
    pub v_lower_pu: f64,
    pub v_upper_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDoc {
    pub id: BusId,
    pub kind: BusKind,
    #[serde(default)]
    pub p_base_kw: f64,
    #[serde(default)]
    pub q_base_kvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchDoc {
    pub from: BusId,
    pub to: BusId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ohm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ohm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_limit_a: Option<f64>,
}

/// Parses and validates a network document (JSON).
pub fn load_network(document: &str) -> Result<Network, NetError> {
    let doc: NetworkDoc = serde_json::from_str(document).map_err(|e| NetError::Parse(e.to_string()))?;
    Network::from_doc(doc)
}

pub fn load_network_file(path: &Path) -> Result<Network, NetError> {
    let text = std::fs::read_to_string(path)?;
    load_network(&text)
}

impl Network {
    pub fn from_doc(doc: NetworkDoc) -> Result<Network, NetError> {
        if !(doc.bases.s_mva > 0.0 && doc.bases.v_kv > 0.0) {
            return Err(NetError::Invalid("bases must be positive".into()));
        }
        let z_base = doc.bases.v_kv * doc.bases.v_kv / doc.bases.s_mva;
        let i_base_a = doc.bases.s_mva * 1e6 / (3f64.sqrt() * doc.bases.v_kv * 1e3);
        let (v_lower, v_upper) = match &doc.limits {
            Some(l) => (l.v_lower_pu, l.v_upper_pu),
            None => (0.95, 1.05),
        };
        if !(v_lower > 0.0 && v_lower < v_upper) {
            return Err(NetError::Invalid(format!("voltage limits [{}, {}]", v_lower, v_upper)));
        }
        let mut buses: Vec<Bus> = Vec::with_capacity(doc.buses.len());
        let mut index = HashMap::new();
        let mut slack: Option<usize> = None;
        for b in &doc.buses {
            if index.insert(b.id, buses.len()).is_some() {
                return Err(NetError::DuplicateBus(b.id));
            }
            if b.kind == BusKind::Slack {
                if let Some(s) = slack {
                    return Err(NetError::MultipleSlack(buses[s].id, b.id));
                }
                slack = Some(buses.len());
            }
            if !(b.p_base_kw.is_finite() && b.q_base_kvar.is_finite()) {
                return Err(NetError::Invalid(format!("bus {} has non-finite load", b.id)));
            }
            buses.push(Bus {
                id: b.id,
                kind: b.kind,
                p_base_kw: b.p_base_kw,
                q_base_kvar: b.q_base_kvar,
            });
        }
        let slack = slack.ok_or(NetError::MissingSlack)?;
        let mut seen = HashSet::new();
        let mut raw = Vec::with_capacity(doc.branches.len());
        for br in &doc.branches {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(NetError::DanglingBranch(br.from, br.to, end));
                }
            }
            if br.from == br.to {
                return Err(NetError::InvalidBranch(br.from, br.to, "self loop".into()));
            }
            let key = (br.from.min(br.to), br.from.max(br.to));
            if !seen.insert(key) {
                return Err(NetError::DuplicateBranch(br.from, br.to));
            }
            let pick = |ohm: Option<f64>, pu: Option<f64>, what: &str| -> Result<f64, NetError> {
                match (ohm, pu) {
                    (Some(o), None) => Ok(o / z_base),
                    (None, Some(p)) => Ok(p),
                    _ => Err(NetError::InvalidBranch(
                        br.from,
                        br.to,
                        format!("exactly one of {0}_ohm / {0}_pu is required", what),
                    )),
                }
            };
            let r = pick(br.r_ohm, br.r_pu, "r")?;
            let x = pick(br.x_ohm, br.x_pu, "x")?;
            if !(r >= 0.0 && x >= 0.0 && r.is_finite() && x.is_finite()) || r + x == 0.0 {
                return Err(NetError::InvalidBranch(br.from, br.to, format!("impedance r={} x={}", r, x)));
            }
            let i_sq_limit = match br.i_limit_a {
                Some(a) if a > 0.0 => Some((a / i_base_a).powi(2)),
                Some(a) => {
                    return Err(NetError::InvalidBranch(br.from, br.to, format!("current limit {}", a)));
                }
                None => None,
            };
            raw.push(Branch {
                from: br.from,
                to: br.to,
                r,
                x,
                i_sq_limit,
            });
        }
        if raw.len() + 1 != buses.len() {
            return Err(NetError::NonRadial {
                buses: buses.len(),
                branches: raw.len(),
            });
        }

        // Root at the slack and orient every branch downstream.
        let n = buses.len();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in raw.iter().enumerate() {
            let (a, b) = (index[&br.from], index[&br.to]);
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut parent = vec![None; n];
        let mut depth = vec![usize::MAX; n];
        let mut order = Vec::with_capacity(n);
        depth[slack] = 0;
        let mut queue = VecDeque::from([slack]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs = adj[u].clone();
            nbrs.sort_unstable();
            for (v, k) in nbrs {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    parent[v] = Some((u, k));
                    queue.push_back(v);
                }
            }
        }
        if let Some(i) = (0..n).find(|&i| depth[i] == usize::MAX) {
            return Err(NetError::Disconnected(buses[i].id));
        }
        let mut branches = raw;
        for v in 0..n {
            if let Some((u, k)) = parent[v] {
                if branches[k].from != buses[u].id {
                    let br = &mut branches[k];
                    std::mem::swap(&mut br.from, &mut br.to);
                }
            }
        }
        let mut children = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            children[index[&br.from]].push(k);
        }
        Ok(Network {
            name: doc.name,
            buses,
            branches,
            s_base_mva: doc.bases.s_mva,
            v_base_kv: doc.bases.v_kv,
            v_lower,
            v_upper,
            slack_voltage: SlackVoltage::Constant(doc.slack_voltage_pu.unwrap_or(1.0)),
            index,
            slack,
            parent,
            children,
            depth,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn slack_id(&self) -> BusId {
        self.buses[self.slack].id
    }

    pub fn index_of(&self, id: BusId) -> Result<usize, NetError> {
        self.index.get(&id).copied().ok_or(NetError::UnknownBus(id))
    }

    /// Upstream branch index of a bus (`None` at the slack).
    pub fn upstream_branch(&self, bus: usize) -> Option<usize> {
        self.parent[bus].map(|p| p.1)
    }

    pub fn parent_bus(&self, bus: usize) -> Option<usize> {
        self.parent[bus].map(|p| p.0)
    }

    /// Downstream branch indices of a bus.
    pub fn downstream_branches(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Ids of the buses directly downstream of `id`.
    pub fn downstream_buses(&self, id: BusId) -> Result<Vec<BusId>, NetError> {
        let i = self.index_of(id)?;
        Ok(self.children[i].iter().map(|&k| self.branches[k].to).collect())
    }

    pub fn depth(&self, bus: usize) -> usize {
        self.depth[bus]
    }

    /// Bus indices of the branch endpoints `(upstream, downstream)`.
    pub fn branch_ends(&self, k: usize) -> (usize, usize) {
        let br = &self.branches[k];
        (self.index[&br.from], self.index[&br.to])
    }

    pub fn load_bus_ids(&self) -> Vec<BusId> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Load)
            .map(|b| b.id)
            .collect()
    }

    /// Conversion factor from kW (or kvar) to per-unit.
    pub fn kw_to_pu(&self) -> f64 {
        1.0 / (1000.0 * self.s_base_mva)
    }

    /// Non-slack buses of degree one.
    pub fn leaf_buses(&self) -> Vec<BusId> {
        let mut degree = vec![0usize; self.buses.len()];
        for k in 0..self.branches.len() {
            let (a, b) = self.branch_ends(k);
            degree[a] += 1;
            degree[b] += 1;
        }
        (0..self.buses.len())
            .filter(|&i| i != self.slack && degree[i] == 1)
            .map(|i| self.buses[i].id)
            .collect()
    }

    pub fn are_adjacent(&self, a: BusId, b: BusId) -> Result<bool, NetError> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.parent[ia].map(|p| p.0) == Some(ib) || self.parent[ib].map(|p| p.0) == Some(ia))
    }

    /// Branch indices on the unique path between two buses.
    pub fn path_branches(&self, a: BusId, b: BusId) -> Result<Vec<usize>, NetError> {
        let (mut ia, mut ib) = (self.index_of(a)?, self.index_of(b)?);
        let mut up = Vec::new();
        let mut down = Vec::new();
        while self.depth[ia] > self.depth[ib] {
            let (p, k) = self.parent[ia].expect("non-root has a parent");
            up.push(k);
            ia = p;
        }
        while self.depth[ib] > self.depth[ia] {
            let (p, k) = self.parent[ib].expect("non-root has a parent");
            down.push(k);
            ib = p;
        }
        while ia != ib {
            let (pa, ka) = self.parent[ia].expect("non-root has a parent");
            let (pb, kb) = self.parent[ib].expect("non-root has a parent");
            up.push(ka);
            down.push(kb);
            ia = pa;
            ib = pb;
        }
        down.reverse();
        up.extend(down);
        Ok(up)
    }

    /// Magnitude of the summed complex impedance along the path from `a` to `b` (p.u.).
    pub fn electrical_distance(&self, a: BusId, b: BusId) -> Result<f64, NetError> {
        let path = self.path_branches(a, b)?;
        let (r, x) = path.iter().fold((0.0, 0.0), |acc, &k| {
            (acc.0 + self.branches[k].r, acc.1 + self.branches[k].x)
        });
        Ok(r.hypot(x))
    }

    /// Copy with a different slack-voltage schedule.
    pub fn with_slack_voltage(mut self, v: SlackVoltage) -> Self {
        self.slack_voltage = v;
        self
    }

    /// Copy with different voltage limits.
    pub fn with_limits(mut self, v_lower: f64, v_upper: f64) -> Self {
        self.v_lower = v_lower;
        self.v_upper = v_upper;
        self
    }
}

/// Hourly active/reactive demand per bus (kW, kvar).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfileSet {
    horizon: Vec<NaiveDateTime>,
    buses: Vec<BusId>,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

impl LoadProfileSet {
    pub fn new(
        horizon: Vec<NaiveDateTime>,
        buses: Vec<BusId>,
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    ) -> Result<Self, NetError> {
        for w in horizon.windows(2) {
            if w[1] - w[0] != Duration::hours(1) {
                return Err(NetError::Profile(format!(
                    "timestamps must be strictly increasing with hourly spacing ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        if p.len() != buses.len() || q.len() != buses.len() {
            return Err(NetError::Profile("one p and q series per bus required".into()));
        }
        let mut seen = HashSet::new();
        for (i, b) in buses.iter().enumerate() {
            if !seen.insert(*b) {
                return Err(NetError::Profile(format!("bus {} listed twice", b)));
            }
            if p[i].len() != horizon.len() || q[i].len() != horizon.len() {
                return Err(NetError::Profile(format!("bus {} series length differs from horizon", b)));
            }
            if p[i].iter().chain(&q[i]).any(|v| !v.is_finite()) {
                return Err(NetError::Profile(format!("bus {} has non-finite values", b)));
            }
        }
        Ok(Self { horizon, buses, p, q })
    }

    pub fn horizon(&self) -> &[NaiveDateTime] {
        &self.horizon
    }

    pub fn len(&self) -> usize {
        self.horizon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizon.is_empty()
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    fn position(&self, bus: BusId) -> Option<usize> {
        self.buses.iter().position(|&b| b == bus)
    }

    pub fn p(&self, bus: BusId) -> Option<&[f64]> {
        self.position(bus).map(|i| self.p[i].as_slice())
    }

    pub fn q(&self, bus: BusId) -> Option<&[f64]> {
        self.position(bus).map(|i| self.q[i].as_slice())
    }

    pub fn p_mut(&mut self, bus: BusId) -> Option<&mut Vec<f64>> {
        self.position(bus).map(move |i| &mut self.p[i])
    }

    /// Checks that every non-slack bus of `net` has a series.
    pub fn check_covers(&self, net: &Network) -> Result<(), NetError> {
        for id in net.load_bus_ids() {
            if self.position(id).is_none() {
                return Err(NetError::Profile(format!("no series for bus {}", id)));
            }
        }
        Ok(())
    }

    /// Per-bus (kW, kvar) at an hour, in network bus order; missing buses load zero.
    pub fn snapshot(&self, net: &Network, hour: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; net.num_buses()];
        let mut q = vec![0.0; net.num_buses()];
        for (i, &b) in self.buses.iter().enumerate() {
            if let Ok(j) = net.index_of(b) {
                p[j] = self.p[i][hour];
                q[j] = self.q[i][hour];
            }
        }
        (p, q)
    }

    /// Hours `[start, end)` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> LoadProfileSet {
        LoadProfileSet {
            horizon: self.horizon[start..end].to_vec(),
            buses: self.buses.clone(),
            p: self.p.iter().map(|s| s[start..end].to_vec()).collect(),
            q: self.q.iter().map(|s| s[start..end].to_vec()).collect(),
        }
    }

    /// Profiles shaped like the network's nominal loads: `shape[t] × base`.
    pub fn from_shape(net: &Network, horizon: Vec<NaiveDateTime>, shape: &[f64]) -> Result<Self, NetError> {
        let ids = net.load_bus_ids();
        let mut p = Vec::with_capacity(ids.len());
        let mut q = Vec::with_capacity(ids.len());
        for id in &ids {
            let bus = &net.buses()[net.index_of(*id)?];
            p.push(shape.iter().map(|s| s * bus.p_base_kw).collect());
            q.push(shape.iter().map(|s| s * bus.q_base_kvar).collect());
        }
        LoadProfileSet::new(horizon, ids, p, q)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, NetError> {
        #[derive(Deserialize)]
        struct Row {
            timestamp: String,
            bus_id: BusId,
            p_kw: f64,
            q_kvar: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut series: Vec<(BusId, Vec<(NaiveDateTime, f64, f64)>)> = Vec::new();
        let mut pos: HashMap<BusId, usize> = HashMap::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            let ts = NaiveDateTime::parse_from_str(&row.timestamp, TIMESTAMP_FORMAT)
                .map_err(|e| NetError::Profile(format!("timestamp '{}': {}", row.timestamp, e)))?;
            let i = *pos.entry(row.bus_id).or_insert_with(|| {
                series.push((row.bus_id, Vec::new()));
                series.len() - 1
            });
            series[i].1.push((ts, row.p_kw, row.q_kvar));
        }
        let Some(first) = series.first() else {
            return Err(NetError::Profile("profile file is empty".into()));
        };
        let horizon: Vec<NaiveDateTime> = first.1.iter().map(|r| r.0).collect();
        let mut buses = Vec::new();
        let mut p = Vec::new();
        let mut q = Vec::new();
        for (bus, rows) in series {
            let ts: Vec<NaiveDateTime> = rows.iter().map(|r| r.0).collect();
            if ts != horizon {
                return Err(NetError::Profile(format!("bus {} timestamps differ from the first bus", bus)));
            }
            buses.push(bus);
            p.push(rows.iter().map(|r| r.1).collect());
            q.push(rows.iter().map(|r| r.2).collect());
        }
        LoadProfileSet::new(horizon, buses, p, q)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), NetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "bus_id", "p_kw", "q_kvar"])?;
        for (i, bus) in self.buses.iter().enumerate() {
            for (t, ts) in self.horizon.iter().enumerate() {
                w.write_record([
                    ts.format(TIMESTAMP_FORMAT).to_string(),
                    bus.to_string(),
                    format!("{}", self.p[i][t]),
                    format!("{}", self.q[i][t]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Multiplies every active and reactive entry by `growth`.
pub fn scale_profiles(profiles: &LoadProfileSet, growth: f64) -> Result<LoadProfileSet, NetError> {
    if !(growth > 0.0 && growth.is_finite()) {
        return Err(NetError::InvalidGrowth(growth));
    }
    let mut out = profiles.clone();
    for s in out.p.iter_mut().chain(out.q.iter_mut()) {
        s.iter_mut().for_each(|v| *v *= growth);
    }
    Ok(out)
}

/// Hourly timestamps for a whole calendar year.
pub fn year_horizon(year: i32) -> Vec<NaiveDateTime> {
    let start = chrono::NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    let end = chrono::NaiveDate::from_ymd_opt(year + 1, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    let hours = (end - start).num_hours();
    (0..hours).map(|h| start + Duration::hours(h)).collect()
}
