//! Temporal criticality assessment (daily stress scores, worst windows) and
//! adaptive spatial targeting (bus features, clustering, candidate pools).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{BusId, NetError, Network};
use crate::vva::{solve_hour, ViolationRecord, VvaOptions};

#[derive(Debug, Error)]
pub enum StatError {
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    Weights([f64; 4]),
    #[error("need at least {needed} days, got {got}")]
    TooFewDays { needed: usize, got: usize },
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("days must be consecutive calendar dates ({0} follows {1})")]
    NonContiguous(NaiveDate, NaiveDate),
    #[error("sensitivity solve failed for bus {0}")]
    Sensitivity(BusId),
    #[error("empty candidate pool")]
    EmptyPool,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw metric order: count, total severity, max severity, duration.
pub const METRIC_NAMES: [&str; 4] = ["count", "total_sev", "max_sev", "duration"];

#[derive(Debug, Clone, PartialEq)]
pub struct DailyStress {
    pub date: NaiveDate,
    pub raw: [f64; 4],
    pub normalized: [f64; 4],
    pub score: f64,
}

impl DailyStress {
    pub fn zero(date: NaiveDate) -> Self {
        Self {
            date,
            raw: [0.0; 4],
            normalized: [0.0; 4],
            score: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct StressWeights([f64; 4]);

impl StressWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, StatError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(StatError::Weights(w));
        }
        Ok(Self(w))
    }

    pub fn get(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for StressWeights {
    fn default() -> Self {
        Self([0.25; 4])
    }
}

impl TryFrom<[f64; 4]> for StressWeights {
    type Error = StatError;
    fn try_from(w: [f64; 4]) -> Result<Self, StatError> {
        Self::new(w)
    }
}

impl From<StressWeights> for [f64; 4] {
    fn from(w: StressWeights) -> [f64; 4] {
        w.0
    }
}

/// Per-date count, total and max severity, and distinct violation hours.
pub fn daily_metrics(records: &[ViolationRecord]) -> Vec<DailyStress> {
    let mut by_day: BTreeMap<NaiveDate, (usize, f64, f64, BTreeSet<u32>)> = BTreeMap::new();
    for r in records {
        let e = by_day
            .entry(r.timestamp.date())
            .or_insert((0, 0.0, 0.0, BTreeSet::new()));
        e.0 += 1;
        e.1 += r.severity;
        e.2 = e.2.max(r.severity);
        e.3.insert(r.timestamp.hour());
    }
    by_day
        .into_iter()
        .map(|(date, (c, tot, max, hours))| DailyStress {
            date,
            raw: [c as f64, tot, max, hours.len() as f64],
            normalized: [0.0; 4],
            score: 0.0,
        })
        .collect()
}

/// Every date from `first` to `last` inclusive, zero-filled where `days` has no entry.
pub fn fill_calendar(days: &[DailyStress], first: NaiveDate, last: NaiveDate) -> Vec<DailyStress> {
    let known: BTreeMap<NaiveDate, &DailyStress> = days.iter().map(|d| (d.date, d)).collect();
    let mut out = Vec::new();
    let mut d = first;
    while d <= last {
        out.push(known.get(&d).map_or_else(|| DailyStress::zero(d), |s| (*s).clone()));
        d += Duration::days(1);
    }
    out
}

/// Min-max value of `x` in `[lo, hi]`; a constant metric maps to zero.
pub fn min_max(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Normalizes each raw metric across the days and combines them with `w`.
pub fn normalize_and_score(days: &[DailyStress], w: &StressWeights) -> Vec<DailyStress> {
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for d in days {
        for k in 0..4 {
            lo[k] = lo[k].min(d.raw[k]);
            hi[k] = hi[k].max(d.raw[k]);
        }
    }
    days.iter()
        .map(|d| {
            let mut n = [0.0; 4];
            for k in 0..4 {
                n[k] = min_max(d.raw[k], lo[k], hi[k]);
            }
            let score = (0..4).map(|k| w.0[k] * n[k]).sum();
            DailyStress {
                date: d.date,
                raw: d.raw,
                normalized: n,
                score,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub days: usize,
    pub score: f64,
    /// Index of the first day in the scored calendar.
    pub offset: usize,
}

impl CriticalWindow {
    pub fn overlaps(&self, other: &CriticalWindow) -> bool {
        self.offset < other.offset + other.days && other.offset < self.offset + self.days
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date <= self.end
    }
}

fn check_days(days: &[DailyStress], w: usize) -> Result<(), StatError> {
    if w == 0 {
        return Err(StatError::ZeroWindow);
    }
    if days.len() < w {
        return Err(StatError::TooFewDays {
            needed: w,
            got: days.len(),
        });
    }
    for pair in days.windows(2) {
        if pair[1].date != pair[0].date + Duration::days(1) {
            return Err(StatError::NonContiguous(pair[1].date, pair[0].date));
        }
    }
    Ok(())
}

fn window_sums(days: &[DailyStress], w: usize) -> Vec<f64> {
    // Direct sums keep ties exact (a running sum drifts in the last bits).
    (0..=days.len() - w)
        .map(|s| days[s..s + w].iter().map(|d| d.score).sum())
        .collect()
}

fn make_window(days: &[DailyStress], w: usize, s: usize, score: f64) -> CriticalWindow {
    CriticalWindow {
        start: days[s].date,
        end: days[s + w - 1].date,
        days: w,
        score,
        offset: s,
    }
}

/// Length-`w` window with the largest summed score, earliest on ties.
pub fn select_worst_window(days: &[DailyStress], w: usize) -> Result<CriticalWindow, StatError> {
    check_days(days, w)?;
    let sums = window_sums(days, w);
    let mut best = 0;
    for (s, &v) in sums.iter().enumerate() {
        if v > sums[best] {
            best = s;
        }
    }
    Ok(make_window(days, w, best, sums[best]))
}

/// Non-overlapping windows with positive score, greedily in descending score.
pub fn rank_windows(days: &[DailyStress], w: usize) -> Result<Vec<CriticalWindow>, StatError> {
    check_days(days, w)?;
    let sums = window_sums(days, w);
    let mut taken = vec![false; days.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (s, &v) in sums.iter().enumerate() {
            if v <= 0.0 || taken[s..s + w].iter().any(|&t| t) {
                continue;
            }
            if best.map_or(true, |b| v > sums[b]) {
                best = Some(s);
            }
        }
        let Some(s) = best else { break };
        taken[s..s + w].iter_mut().for_each(|t| *t = true);
        out.push(make_window(days, w, s, sums[s]));
    }
    Ok(out)
}

/// Hour index (into `timestamps`) with the largest summed severity.
pub fn worst_hour(records: &[ViolationRecord], timestamps: &[NaiveDateTime]) -> Option<usize> {
    let mut total: BTreeMap<NaiveDateTime, f64> = BTreeMap::new();
    for r in records {
        *total.entry(r.timestamp).or_default() += r.severity;
    }
    let mut best: Option<(NaiveDateTime, f64)> = None;
    for (ts, s) in total {
        if best.map_or(true, |b| s > b.1) {
            best = Some((ts, s));
        }
    }
    best.and_then(|(ts, _)| timestamps.iter().position(|t| *t == ts))
}

/// Active injection used for the sensitivity disturbance (p.u.).
pub const SENSITIVITY_INJECTION: f64 = 0.01;

/// Mean absolute voltage change over all buses for an injection at each of `buses`.
pub fn sensitivities(
    net: &Network,
    p_load: &[f64],
    q_load: &[f64],
    v_slack: f64,
    buses: &[BusId],
    opts: &VvaOptions,
) -> Result<Vec<f64>, StatError> {
    let base = solve_hour(net, p_load, q_load, v_slack, opts).map_err(|_| StatError::Sensitivity(net.slack_id()))?;
    let v0: Vec<f64> = base.v_sq.iter().map(|v| v.max(0.0).sqrt()).collect();
    buses
        .par_iter()
        .map(|&bus| {
            let i = net.index_of(bus)?;
            let mut p = p_load.to_vec();
            p[i] -= SENSITIVITY_INJECTION;
            let f = solve_hour(net, &p, q_load, v_slack, opts).map_err(|_| StatError::Sensitivity(bus))?;
            let sum: f64 = f
                .v_sq
                .iter()
                .zip(&v0)
                .map(|(v, b)| (v.max(0.0).sqrt() - b).abs())
                .sum();
            Ok(sum / net.num_buses() as f64)
        })
        .collect()
}

pub fn sensitivity(
    net: &Network,
    p_load: &[f64],
    q_load: &[f64],
    v_slack: f64,
    bus: BusId,
    opts: &VvaOptions,
) -> Result<f64, StatError> {
    Ok(sensitivities(net, p_load, q_load, v_slack, &[bus], opts)?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub bus: BusId,
    pub s_mean_abs: f64,
    pub f_viol: f64,
    pub e_topo: bool,
    pub s_eol: f64,
    pub m_comb: f64,
    pub cluster: usize,
}

impl NodeFeatures {
    pub fn new(bus: BusId, s_mean_abs: f64, f_viol: f64, e_topo: bool) -> Self {
        Self {
            bus,
            s_mean_abs,
            f_viol,
            e_topo,
            s_eol: 0.0,
            m_comb: 0.0,
            cluster: 0,
        }
    }
}

/// Sets `s_eol = α·E_topo` and `m_comb = S'_mean_abs + F'_viol + s_eol`, the
/// primed terms min-max normalized across `features`.
pub fn combined_metric(features: &mut [NodeFeatures], alpha_eol: f64) {
    let range = |f: fn(&NodeFeatures) -> f64| {
        features
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| (lo.min(f(n)), hi.max(f(n))))
    };
    let (s_lo, s_hi) = range(|n| n.s_mean_abs);
    let (f_lo, f_hi) = range(|n| n.f_viol);
    for n in features.iter_mut() {
        n.s_eol = if n.e_topo { alpha_eol } else { 0.0 };
        n.m_comb = min_max(n.s_mean_abs, s_lo, s_hi) + min_max(n.f_viol, f_lo, f_hi) + n.s_eol;
    }
}

/// Column-wise z-scores; constant columns become zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let d = points[0].len();
    let n = points.len() as f64;
    let mut out = points.to_vec();
    for j in 0..d {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for (o, p) in out.iter_mut().zip(points) {
            o[j] = if sd > 1e-12 * (1.0 + mean.abs()) { (p[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub history: Vec<f64>,
}

/// Lloyd's algorithm from k-means++ seeds.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> KMeansResult {
    let n = points.len();
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        };
        centers.push(points[next].clone());
    }
    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (j, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, dist2(p, c)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                inertia += d;
                j
            })
            .collect();
        (labels, inertia)
    };
    let (mut labels, mut inertia) = assign(&centers);
    let mut history = vec![inertia];
    for _ in 0..max_iter {
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (dim, cv) in c.iter_mut().enumerate() {
                *cv = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
            }
        }
        let (next, next_inertia) = assign(&centers);
        history.push(next_inertia);
        let changed = next != labels;
        labels = next;
        inertia = next_inertia;
        if !changed {
            break;
        }
    }
    KMeansResult {
        labels,
        centers,
        inertia,
        history,
    }
}

/// Mean silhouette coefficient; points alone in their cluster score zero.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(&points[i], &points[j]).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub k_opt: usize,
    /// `(k, silhouette)` for every evaluated k.
    pub scores: Vec<(usize, f64)>,
}

/// Restarts per k; the run with the lowest inertia is kept.
const KMEANS_RESTARTS: usize = 10;

/// K-means over standardized `features` with k chosen by silhouette in `2..=min(k_max, n−1)`.
pub fn cluster(features: &[Vec<f64>], k_max: usize, seed: u64) -> Clustering {
    let n = features.len();
    let pts = standardize(features);
    let distinct = pts.iter().any(|p| dist2(p, &pts[0]) > 0.0);
    let k_hi = k_max.min(n.saturating_sub(1));
    if n < 3 || !distinct || k_hi < 2 {
        return Clustering {
            labels: vec![0; n],
            k_opt: 1,
            scores: Vec::new(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    let mut scores = Vec::new();
    for k in 2..=k_hi {
        let run = (0..KMEANS_RESTARTS)
            .map(|_| kmeans(&pts, k, &mut rng, 300))
            .fold(None::<KMeansResult>, |acc, r| match acc {
                Some(a) if a.inertia <= r.inertia => Some(a),
                _ => Some(r),
            })
            .expect("at least one restart");
        let s = silhouette(&pts, &run.labels);
        scores.push((k, s));
        if best.as_ref().map_or(true, |b| s > b.0) {
            best = Some((s, run.labels, k));
        }
    }
    let (_, labels, k_opt) = best.expect("k range is nonempty");
    Clustering { labels, k_opt, scores }
}

/// Per-cluster quotas, linearly interpolated from `n_max` (best cluster) to `n_min`.
pub fn pool_quotas(k: usize, n_max: usize, n_min: usize) -> Vec<usize> {
    if k <= 1 {
        return vec![n_max];
    }
    (0..k)
        .map(|j| {
            let q = n_max as f64 - j as f64 * (n_max as f64 - n_min as f64) / (k as f64 - 1.0);
            q.round() as usize
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub bus: BusId,
    pub m_comb: f64,
    pub cluster: usize,
}

fn by_m_comb(a: &PoolEntry, b: &PoolEntry) -> std::cmp::Ordering {
    b.m_comb.total_cmp(&a.m_comb).then(a.bus.cmp(&b.bus))
}

/// Candidate pool: top buses of each cluster by quota, sorted by `m_comb` descending.
pub fn build_pool(features: &[NodeFeatures], k_opt: usize, n_max: usize, n_min: usize) -> Vec<PoolEntry> {
    let entries: Vec<PoolEntry> = features
        .iter()
        .map(|f| PoolEntry {
            bus: f.bus,
            m_comb: f.m_comb,
            cluster: f.cluster,
        })
        .collect();
    let mut pool = Vec::new();
    if k_opt < 2 {
        let mut all = entries;
        all.sort_by(by_m_comb);
        all.truncate(n_max);
        return all;
    }
    let mut clusters: Vec<(usize, f64, Vec<PoolEntry>)> = (0..k_opt)
        .map(|c| {
            let mut members: Vec<PoolEntry> = entries.iter().filter(|e| e.cluster == c).cloned().collect();
            members.sort_by(by_m_comb);
            let mean = if members.is_empty() {
                f64::NEG_INFINITY
            } else {
                members.iter().map(|e| e.m_comb).sum::<f64>() / members.len() as f64
            };
            (c, mean, members)
        })
        .collect();
    clusters.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let quotas = pool_quotas(k_opt, n_max, n_min);
    let mut seen = BTreeSet::new();
    for ((_, _, members), q) in clusters.into_iter().zip(quotas) {
        for e in members.into_iter().take(q) {
            if seen.insert(e.bus) {
                pool.push(e);
            }
        }
    }
    pool.sort_by(by_m_comb);
    pool
}

/// Linear-interpolation percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Default distance threshold: 25th percentile of pairwise pool distances.
pub fn default_threshold(net: &Network, pool: &[PoolEntry]) -> Result<f64, StatError> {
    let mut d = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(net.electrical_distance(pool[i].bus, pool[j].bus)?);
        }
    }
    Ok(percentile(&d, 25.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Decision {
    Accepted,
    TooClose(BusId),
    TargetReached,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Accepted => write!(f, "accepted"),
            Decision::TooClose(b) => write!(f, "adjacent to accepted bus {} within threshold", b),
            Decision::TargetReached => write!(f, "target count reached"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub buses: Vec<BusId>,
    pub threshold: f64,
    /// Every pool entry with its decision, in scan order.
    pub trail: Vec<(PoolEntry, Decision)>,
}

/// Greedy scan in pool order keeping buses that are non-adjacent to, or
/// farther than `threshold` from, every bus already kept.
pub fn diversity_filter(
    pool: &[PoolEntry],
    net: &Network,
    threshold: f64,
    target: usize,
) -> Result<CandidateSet, StatError> {
    if pool.is_empty() {
        return Err(StatError::EmptyPool);
    }
    let mut buses: Vec<BusId> = Vec::new();
    let mut trail = Vec::with_capacity(pool.len());
    for e in pool {
        if buses.len() >= target {
            trail.push((e.clone(), Decision::TargetReached));
            continue;
        }
        let mut conflict = None;
        for &a in &buses {
            if net.are_adjacent(e.bus, a)? && net.electrical_distance(e.bus, a)? <= threshold {
                conflict = Some(a);
                break;
            }
        }
        match conflict {
            Some(a) => trail.push((e.clone(), Decision::TooClose(a))),
            None => {
                buses.push(e.bus);
                trail.push((e.clone(), Decision::Accepted));
            }
        }
    }
    Ok(CandidateSet { buses, threshold, trail })
}

/// Checks the pairwise spatial criterion over every accepted pair.
pub fn audit_candidates(set: &CandidateSet, net: &Network) -> Result<bool, StatError> {
    for i in 0..set.buses.len() {
        for j in i + 1..set.buses.len() {
            let (a, b) = (set.buses[i], set.buses[j]);
            if net.are_adjacent(a, b)? && net.electrical_distance(a, b)? <= set.threshold {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn write_scored_days<W: Write>(days: &[DailyStress], writer: W) -> Result<(), StatError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    header.extend(METRIC_NAMES.iter().map(|s| format!("{}_norm", s)));
    header.push("s_daily".into());
    w.write_record(&header)?;
    for d in days {
        let mut row = vec![d.date.to_string()];
        row.extend(d.raw.iter().map(|v| format!("{:.9}", v)));
        row.extend(d.normalized.iter().map(|v| format!("{:.9}", v)));
        row.push(format!("{:.9}", d.score));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_windows<W: Write>(windows: &[CriticalWindow], writer: W) -> Result<(), StatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "start", "end", "days", "score"])?;
    for (i, win) in windows.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            win.start.to_string(),
            win.end.to_string(),
            win.days.to_string(),
            format!("{:.9}", win.score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_candidates<W: Write>(set: &CandidateSet, writer: W) -> Result<(), StatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bus", "m_comb", "cluster", "decision"])?;
    for (e, d) in &set.trail {
        w.write_record([e.bus.to_string(), format!("{:.9}", e.m_comb), e.cluster.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
