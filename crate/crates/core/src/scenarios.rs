//! EV charging scenarios: synthetic smart-meter homes, EV-load extraction,
//! event detection, kernel density models and annual Monte Carlo sampling.

use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{LoadProfileSet, NetError, Network};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("kernel density needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sampler rejected {0} consecutive draws")]
    RejectionCap(usize),
    #[error("{0} must lie in [0, 1], got {1}")]
    Fraction(&'static str, f64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Threshold of the sustained rule (kW) and its minimum duration (h).
pub const SUSTAINED_KW: f64 = 4.0;
pub const SUSTAINED_HOURS: f64 = 2.0;
/// Threshold of the high-power rule (kW) and its minimum duration (h).
pub const HIGH_KW: f64 = 7.2;
pub const HIGH_HOURS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChargeClass {
    Low,
    Normal,
    High,
}

impl ChargeClass {
    pub fn of(p_avg: f64) -> Self {
        if p_avg < SUSTAINED_KW {
            ChargeClass::Low
        } else if p_avg > HIGH_KW {
            ChargeClass::High
        } else {
            ChargeClass::Normal
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingEvent {
    pub start: NaiveDateTime,
    pub duration: f64,
    pub energy: f64,
    pub p_avg: f64,
    pub class: ChargeClass,
}

impl ChargingEvent {
    pub fn new(start: NaiveDateTime, duration: f64, energy: f64) -> Self {
        let p_avg = energy / duration;
        Self {
            start,
            duration,
            energy,
            p_avg,
            class: ChargeClass::of(p_avg),
        }
    }

    /// Start as fractional hour of day.
    pub fn start_hour(&self) -> f64 {
        self.start.hour() as f64 + self.start.minute() as f64 / 60.0 + self.start.second() as f64 / 3600.0
    }
}

fn at_hours(origin: NaiveDateTime, hours: f64) -> NaiveDateTime {
    origin + Duration::milliseconds((hours * 3_600_000.0).round() as i64)
}

/// Adds constant power `kw` over `[start, start + duration)` hours to an hourly
/// series, wrapping past the end to the beginning. Returns the energy added.
pub fn place_block(series: &mut [f64], start: f64, duration: f64, kw: f64) -> f64 {
    let n = series.len() as f64;
    let mut t = start;
    let end = start + duration;
    let mut added = 0.0;
    while t < end {
        let slot = t.floor();
        let upto = (slot + 1.0).min(end);
        let e = kw * (upto - t);
        let idx = (slot.rem_euclid(n)) as usize;
        series[idx] += e;
        added += e;
        t = upto;
    }
    added
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HouseholdParams {
    pub year: i32,
    pub homes_without_ev: usize,
    pub homes_with_ev: usize,
    /// Probability that an EV home charges on a given day.
    pub daily_prob: f64,
    /// Multiplicative per-hour noise (standard deviation).
    pub noise: f64,
    /// Largest per-home clock offset in hours (drawn uniformly in ±range).
    pub max_shift_hours: i64,
    /// Median and log-spread of event energy (kWh).
    pub energy_median: f64,
    pub energy_sigma: f64,
    /// Charger power levels (kW) and their probabilities.
    pub power_levels: Vec<(f64, f64)>,
    /// Mean and spread of the evening start-time peak (hour of day).
    pub start_mean: f64,
    pub start_sd: f64,
    /// Share of starts drawn uniformly over the day instead of the evening peak.
    pub start_uniform_share: f64,
}

impl Default for HouseholdParams {
    fn default() -> Self {
        Self {
            year: 2017,
            homes_without_ev: 40,
            homes_with_ev: 20,
            daily_prob: 0.9,
            noise: 0.05,
            max_shift_hours: 1,
            energy_median: 12.0,
            energy_sigma: 0.45,
            power_levels: vec![(4.8, 0.3), (6.6, 0.5), (9.6, 0.2)],
            start_mean: 20.5,
            start_sd: 1.2,
            start_uniform_share: 0.1,
        }
    }
}

/// Average-home demand shape (kW) at an hour of the year.
pub fn home_shape(ts: NaiveDateTime) -> f64 {
    use std::f64::consts::TAU;
    let h = ts.hour() as f64;
    let gauss = |c: f64, w: f64| (-((h - c) / w).powi(2) / 2.0).exp();
    let daily = 0.35 + 0.35 * gauss(7.5, 1.2) + 0.75 * gauss(19.0, 2.0) + 0.2 * gauss(13.0, 3.0);
    let seasonal = 1.0 + 0.25 * (TAU * (ts.ordinal() as f64 - 200.0) / 365.0).cos();
    daily * seasonal
}

#[derive(Debug, Clone)]
pub struct SynthHouseholds {
    pub timestamps: Vec<NaiveDateTime>,
    /// Homes without an EV.
    pub baseline_homes: Vec<Vec<f64>>,
    /// Homes with an EV: own demand plus charging.
    pub ev_homes: Vec<Vec<f64>>,
    /// Charging component of each EV home.
    pub ev_truth: Vec<Vec<f64>>,
    pub events: Vec<Vec<ChargingEvent>>,
    /// Average of the homes without an EV.
    pub baseline: Vec<f64>,
}

/// Synthetic smart-meter data with known embedded charging events.
pub fn synth_households(params: &HouseholdParams, seed: u64) -> Result<SynthHouseholds, ScenarioError> {
    if !(0.0..=1.0).contains(&params.daily_prob) {
        return Err(ScenarioError::Fraction("daily_prob", params.daily_prob));
    }
    if params.homes_without_ev == 0 {
        return Err(ScenarioError::Invalid("at least one home without EV is required".into()));
    }
    let total: f64 = params.power_levels.iter().map(|p| p.1).sum();
    if params.power_levels.is_empty() || params.power_levels.iter().any(|p| p.0 <= 0.0 || p.1 < 0.0) || total <= 0.0 {
        return Err(ScenarioError::Invalid("power levels need positive power and weights".into()));
    }
    let timestamps = crate::netmodel::year_horizon(params.year);
    let n = timestamps.len();
    let shape: Vec<f64> = timestamps.iter().map(|t| home_shape(*t)).collect();
    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let energy = LogNormal::new(params.energy_median.ln(), params.energy_sigma.max(1e-9))
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let start = Normal::new(params.start_mean, params.start_sd.max(1e-9)).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let home = |rng: &mut ChaCha8Rng, shift: i64| -> Vec<f64> {
        let amp = rng.gen_range(0.8..1.2);
        (0..n)
            .map(|t| {
                let src = (t as i64 - shift).rem_euclid(n as i64) as usize;
                (amp * shape[src] * (1.0 + noise.sample(rng))).max(0.0)
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let baseline_homes: Vec<Vec<f64>> = (0..params.homes_without_ev).map(|_| home(&mut rng, 0)).collect();
    let mut baseline = vec![0.0; n];
    for h in &baseline_homes {
        for (b, v) in baseline.iter_mut().zip(h) {
            *b += v / params.homes_without_ev as f64;
        }
    }
    let days = n / 24;
    let mut ev_homes = Vec::new();
    let mut ev_truth = Vec::new();
    let mut events = Vec::new();
    for _ in 0..params.homes_with_ev {
        let shift = if params.max_shift_hours > 0 {
            rng.gen_range(-params.max_shift_hours..=params.max_shift_hours)
        } else {
            0
        };
        let own = home(&mut rng, shift);
        let mut ev = vec![0.0; n];
        let mut evs = Vec::new();
        let mut busy_until = f64::NEG_INFINITY;
        for d in 0..days {
            if !rng.gen_bool(params.daily_prob) {
                continue;
            }
            let s = if rng.gen_bool(params.start_uniform_share.clamp(0.0, 1.0)) {
                rng.gen_range(0.0..24.0)
            } else {
                start.sample(&mut rng).rem_euclid(24.0)
            };
            let e = energy.sample(&mut rng);
            let mut r = rng.gen::<f64>() * total;
            let mut kw = params.power_levels[0].0;
            for &(p, w) in &params.power_levels {
                if r < w {
                    kw = p;
                    break;
                }
                r -= w;
            }
            let dur = e / kw;
            let t0 = (d as f64 * 24.0 + s).max(busy_until);
            place_block(&mut ev, t0, dur, kw);
            busy_until = t0 + dur;
            evs.push(ChargingEvent::new(at_hours(timestamps[0], t0), dur, e));
        }
        ev_homes.push(own.iter().zip(&ev).map(|(a, b)| a + b).collect());
        ev_truth.push(ev);
        events.push(evs);
    }
    Ok(SynthHouseholds {
        timestamps,
        baseline_homes,
        ev_homes,
        ev_truth,
        events,
        baseline,
    })
}

/// Hour of day at which the 95th-percentile daily profile is lowest.
pub fn trough_hour(series: &[f64]) -> usize {
    let days = series.len() / 24;
    let mut best = (f64::INFINITY, 0);
    for h in 0..24 {
        let vals: Vec<f64> = (0..days).map(|d| series[d * 24 + h]).collect();
        let p = crate::stat::percentile(&vals, 95.0);
        if p < best.0 {
            best = (p, h);
        }
    }
    best.1
}

fn shift(series: &[f64], by: i64) -> Vec<f64> {
    let n = series.len() as i64;
    (0..n).map(|t| series[(t - by).rem_euclid(n) as usize]).collect()
}

/// Residuals below this level (kW) are treated as noise.
pub const EXTRACTION_NOISE_FLOOR_KW: f64 = 0.5;

/// Estimated EV charging series of one home.
///
/// Stages: normalize the baseline, scale the composite to the baseline's
/// amplitude, shift it so the 95th-percentile troughs align, subtract, undo the
/// amplitude scaling and the shift, then clip residuals below the noise floor.
pub fn extract_ev_load(composite: &[f64], baseline: &[f64]) -> Result<Vec<f64>, ScenarioError> {
    if composite.len() != baseline.len() {
        return Err(ScenarioError::LengthMismatch(composite.len(), baseline.len()));
    }
    if composite.is_empty() {
        return Ok(Vec::new());
    }
    let peak = baseline.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(composite.iter().map(|v| if *v > EXTRACTION_NOISE_FLOOR_KW { *v } else { 0.0 }).collect());
    }
    let base_norm: Vec<f64> = baseline.iter().map(|v| v / peak).collect();
    // Low percentiles are rarely touched by evening charging.
    let c_ref = crate::stat::percentile(composite, 20.0);
    let b_ref = crate::stat::percentile(&base_norm, 20.0);
    let amp = if b_ref > 0.0 && c_ref > 0.0 { c_ref / b_ref } else { peak };
    let scaled: Vec<f64> = composite.iter().map(|v| v / amp).collect();
    let mut lag = trough_hour(&base_norm) as i64 - trough_hour(&scaled) as i64;
    if lag > 12 {
        lag -= 24;
    } else if lag < -12 {
        lag += 24;
    }
    let aligned = shift(&scaled, lag);
    let residual: Vec<f64> = aligned.iter().zip(&base_norm).map(|(c, b)| (c - b) * amp).collect();
    Ok(shift(&residual, -lag)
        .into_iter()
        .map(|v| if v > EXTRACTION_NOISE_FLOOR_KW { v } else { 0.0 })
        .collect())
}

/// Maximal runs above the sustained threshold that last at least the sustained
/// duration or contain a high-power stretch of at least the high duration.
pub fn detect_events(series: &[f64], origin: NaiveDateTime, dt_hours: f64) -> Vec<ChargingEvent> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < series.len() {
        if series[i] <= SUSTAINED_KW {
            i += 1;
            continue;
        }
        let start = i;
        while i < series.len() && series[i] > SUSTAINED_KW {
            i += 1;
        }
        let run = &series[start..i];
        let duration = run.len() as f64 * dt_hours;
        let mut longest_high = 0usize;
        let mut cur = 0usize;
        for &v in run {
            cur = if v > HIGH_KW { cur + 1 } else { 0 };
            longest_high = longest_high.max(cur);
        }
        let sustained = duration >= SUSTAINED_HOURS - 1e-9;
        let high = longest_high as f64 * dt_hours >= HIGH_HOURS - 1e-9;
        if sustained || high {
            let energy = run.iter().sum::<f64>() * dt_hours;
            out.push(ChargingEvent::new(at_hours(origin, start as f64 * dt_hours), duration, energy));
        }
    }
    out
}

/// Gaussian product-kernel density with per-dimension bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub points: Vec<Vec<f64>>,
    pub bandwidth: Vec<f64>,
}

pub const KDE_MIN_SAMPLES: usize = 10;

impl Kde {
    /// Fits with Silverman's rule; zero-variance dimensions get a small floor.
    pub fn fit(points: &[Vec<f64>]) -> Result<Kde, ScenarioError> {
        if points.len() < KDE_MIN_SAMPLES {
            return Err(ScenarioError::TooFewSamples {
                needed: KDE_MIN_SAMPLES,
                got: points.len(),
            });
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(ScenarioError::Invalid("samples must share a positive dimension".into()));
        }
        let n = points.len() as f64;
        let factor = (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
        let bandwidth = (0..d)
            .map(|j| {
                let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
                let sd = (points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let h = sd * factor;
                h.max(1e-3 * mean.abs().max(1.0))
            })
            .collect();
        Ok(Kde {
            points: points.to_vec(),
            bandwidth,
        })
    }

    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| 1.0 / (h * (std::f64::consts::TAU).sqrt()))
            .product();
        let sum: f64 = self
            .points
            .iter()
            .map(|p| {
                let q: f64 = p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((pi, xi), h)| ((xi - pi) / h).powi(2))
                    .sum();
                (-0.5 * q).exp()
            })
            .sum();
        norm * sum / self.points.len() as f64
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let p = &self.points[rng.gen_range(0..self.points.len())];
        p.iter()
            .zip(&self.bandwidth)
            .map(|(c, h)| c + h * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDistributions {
    /// Joint density over (duration h, energy kWh).
    pub joint: Kde,
    /// Density over start hour of day.
    pub start: Kde,
}

/// Longest accepted sampled duration (h).
pub const MAX_EVENT_HOURS: f64 = 24.0;
pub const REJECTION_CAP: usize = 10_000;

impl EventDistributions {
    pub fn fit(events: &[ChargingEvent]) -> Result<Self, ScenarioError> {
        let joint: Vec<Vec<f64>> = events.iter().map(|e| vec![e.duration, e.energy]).collect();
        let start: Vec<Vec<f64>> = events.iter().map(|e| vec![e.start_hour()]).collect();
        Ok(Self {
            joint: Kde::fit(&joint)?,
            start: Kde::fit(&start)?,
        })
    }

    /// One `(start hour, duration, energy)` draw.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<(f64, f64, f64), ScenarioError> {
        for _ in 0..REJECTION_CAP {
            let de = self.joint.sample(rng);
            if de[0] > 0.0 && de[1] > 0.0 && de[0] <= MAX_EVENT_HOURS {
                let s = self.start.sample(rng)[0].rem_euclid(24.0);
                return Ok((s, de[0], de[1]));
            }
        }
        Err(ScenarioError::RejectionCap(REJECTION_CAP))
    }

    pub fn write_snapshot<W: Write>(&self, writer: W) -> Result<(), ScenarioError> {
        serde_json::to_writer_pretty(writer, self).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }
}

/// `n` classified events on a reference day.
pub fn sample_events(dist: &EventDistributions, n: usize, seed: u64) -> Result<Vec<ChargingEvent>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = NaiveDate::from_ymd_opt(2017, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    (0..n)
        .map(|_| {
            let (s, d, e) = dist.draw(&mut rng)?;
            Ok(ChargingEvent::new(at_hours(origin, s), d, e))
        })
        .collect()
}

/// Independent stream seed for item `index` of a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub seed: u64,
    pub daily_prob: f64,
    pub days: usize,
    /// Hourly charger demand (kW) per scenario.
    pub series: Vec<Vec<f64>>,
    pub charging_days: Vec<usize>,
    /// Sum of sampled event energies per scenario (kWh).
    pub event_energy: Vec<f64>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Rows `(scenario, day, hour, kw)` after a metadata comment line.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<(), ScenarioError> {
        writeln!(writer, "# seed={} daily_prob={} n={}", self.seed, self.daily_prob, self.len())?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scenario", "day", "hour", "kw"])?;
        for (s, series) in self.series.iter().enumerate() {
            for (t, kw) in series.iter().enumerate() {
                w.write_record([s.to_string(), (t / 24).to_string(), (t % 24).to_string(), format!("{:.6}", kw)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Annual hourly charger demand: each day charges with `daily_prob`, one
/// sampled event per charging day, spill-over carried into later hours.
pub fn generate_annual(
    dist: &EventDistributions,
    n_scenarios: usize,
    daily_prob: f64,
    days: usize,
    seed: u64,
) -> Result<ScenarioSet, ScenarioError> {
    if !(0.0..=1.0).contains(&daily_prob) {
        return Err(ScenarioError::Fraction("daily_prob", daily_prob));
    }
    let hours = days * 24;
    let results: Vec<Result<(Vec<f64>, usize, f64), ScenarioError>> = (0..n_scenarios)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
            let mut series = vec![0.0; hours];
            let mut charged = 0;
            let mut energy = 0.0;
            let mut busy_until = f64::NEG_INFINITY;
            for d in 0..days {
                if !rng.gen_bool(daily_prob) {
                    continue;
                }
                let (start, dur, e) = dist.draw(&mut rng)?;
                let t0 = (d as f64 * 24.0 + start).max(busy_until);
                place_block(&mut series, t0, dur, e / dur);
                busy_until = t0 + dur;
                charged += 1;
                energy += e;
            }
            Ok((series, charged, energy))
        })
        .collect();
    let mut set = ScenarioSet {
        seed,
        daily_prob,
        days,
        series: Vec::with_capacity(n_scenarios),
        charging_days: Vec::with_capacity(n_scenarios),
        event_energy: Vec::with_capacity(n_scenarios),
    };
    for r in results {
        let (series, days, energy) = r?;
        set.series.push(series);
        set.charging_days.push(days);
        set.event_energy.push(energy);
    }
    Ok(set)
}

/// Adds charger demand to a seeded subset of `round(penetration × load buses)`
/// buses, `chargers_per_bus` distinct scenarios each, after scaling by `growth`.
pub fn overlay_penetration(
    net: &Network,
    base: &LoadProfileSet,
    scenarios: &ScenarioSet,
    penetration: f64,
    growth: f64,
    chargers_per_bus: usize,
    seed: u64,
) -> Result<LoadProfileSet, ScenarioError> {
    if !(0.0..=1.0).contains(&penetration) {
        return Err(ScenarioError::Fraction("penetration", penetration));
    }
    let mut out = crate::netmodel::scale_profiles(base, growth)?;
    let eligible = net.load_bus_ids();
    let count = (penetration * eligible.len() as f64).round() as usize;
    if count == 0 {
        return Ok(out);
    }
    if scenarios.is_empty() {
        return Err(ScenarioError::Invalid("no scenarios to overlay".into()));
    }
    if scenarios.series[0].len() < base.len() {
        return Err(ScenarioError::LengthMismatch(scenarios.series[0].len(), base.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = eligible.clone();
    chosen.shuffle(&mut rng);
    chosen.truncate(count);
    chosen.sort_unstable();
    let mut pick = 0usize;
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..scenarios.len()).collect();
        o.shuffle(&mut rng);
        o
    };
    for bus in chosen {
        let series = out.p_mut(bus).ok_or(NetError::UnknownBus(bus))?;
        for _ in 0..chargers_per_bus.max(1) {
            let s = &scenarios.series[order[pick % order.len()]];
            pick += 1;
            for (v, add) in series.iter_mut().zip(s) {
                *v += add;
            }
        }
    }
    Ok(out)
}

/// Network-level base demand shape: the average-home shape normalized so that
/// its annual peak equals `peak_fraction` of the nominal bus loads.
pub fn base_shape(timestamps: &[NaiveDateTime], peak_fraction: f64, noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite spread");
    let raw: Vec<f64> = timestamps
        .iter()
        .map(|t| (home_shape(*t) * (1.0 + jitter.sample(&mut rng))).max(0.0))
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter().map(|v| v / peak * peak_fraction).collect()
}
