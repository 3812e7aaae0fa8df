#![allow(dead_code)]

use num_complex::Complex64;
use pvm::netmodel::{load_network, load_network_file, Network};
use pvm::oep::BessSpec;

pub fn fixture(name: &str) -> Network {
    load_network_file(&fixture_path(name)).unwrap()
}

pub fn ieee33() -> Network {
    fixture("ieee33.json")
}

/// Line feeder 1–2–…–n on a 1 MVA / 1 kV base with the given per-branch
/// impedances (p.u.) and loads (kW, kvar) at buses 2..=n.
pub fn line_feeder(z: &[(f64, f64)], loads: &[(f64, f64)]) -> Network {
    load_network(&line_feeder_json(z, loads)).unwrap()
}

/// Network document for [`line_feeder`].
pub fn line_feeder_json(z: &[(f64, f64)], loads: &[(f64, f64)]) -> String {
    assert_eq!(z.len(), loads.len());
    let mut buses = vec![r#"{"id": 1, "kind": "slack"}"#.to_string()];
    let mut branches = Vec::new();
    for (k, ((r, x), (p, q))) in z.iter().zip(loads).enumerate() {
        let id = k + 2;
        buses.push(format!(r#"{{"id": {}, "kind": "load", "p_base_kw": {}, "q_base_kvar": {}}}"#, id, p, q));
        branches.push(format!(r#"{{"from": {}, "to": {}, "r_pu": {}, "x_pu": {}}}"#, id - 1, id, r, x));
    }
    format!(
        r#"{{"bases": {{"s_mva": 1.0, "v_kv": 1.0}}, "buses": [{}], "branches": [{}]}}"#,
        buses.join(","),
        branches.join(",")
    )
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Complex forward-backward sweep; returns voltage magnitudes in bus order.
pub fn sweep(net: &Network, p_pu: &[f64], q_pu: &[f64], v_slack: f64) -> Vec<f64> {
    let n = net.num_buses();
    let slack = net.slack_index();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| net.depth(i));
    let mut v = vec![Complex64::new(v_slack, 0.0); n];
    for _ in 0..500 {
        let mut inj: Vec<Complex64> = (0..n)
            .map(|i| (Complex64::new(p_pu[i], q_pu[i]) / v[i]).conj())
            .collect();
        let mut branch_i = vec![Complex64::new(0.0, 0.0); net.num_branches()];
        for &i in order.iter().rev() {
            if let Some(k) = net.upstream_branch(i) {
                branch_i[k] = inj[i];
                let parent = net.parent_bus(i).unwrap();
                let add = inj[i];
                inj[parent] += add;
            }
        }
        let mut next = v.clone();
        next[slack] = Complex64::new(v_slack, 0.0);
        for &i in &order {
            if let Some(k) = net.upstream_branch(i) {
                let br = &net.branches()[k];
                let z = Complex64::new(br.r, br.x);
                next[i] = next[net.parent_bus(i).unwrap()] - z * branch_i[k];
            }
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-15 {
            break;
        }
    }
    v.iter().map(|c| c.norm()).collect()
}

/// Per-bus loads in p.u. from the network's nominal values.
pub fn nominal_pu(net: &Network, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let f = net.kw_to_pu() * scale;
    (
        net.buses().iter().map(|b| b.p_base_kw * f).collect(),
        net.buses().iter().map(|b| b.q_base_kvar * f).collect(),
    )
}

/// Receiving-end magnitude of a two-bus feeder fed at 1 p.u.
pub fn v2(r: f64, x: f64, p: f64, q: f64) -> f64 {
    let a = 1.0 - 2.0 * (r * p + x * q);
    let disc = a * a - 4.0 * (r * r + x * x) * (p * p + q * q);
    if disc < 0.0 {
        return 0.0;
    }
    ((a + disc.sqrt()) / 2.0).sqrt()
}

pub fn bisect(mut lo: f64, mut hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Least capacity on the two-bus feeder (0.05 + j0.05 p.u., 800 kW / 400 kvar)
/// for which every heavy hour can be lifted to `v_low`, given rated discharge
/// and reactive injection of `rate·E` and the energy available between the
/// state-of-charge bounds.
pub fn capacity_oracle(heavy_hours: usize, spec: &BessSpec, v_low: f64) -> f64 {
    let (r, x, p, q) = (0.05, 0.05, 0.8, 0.4);
    let kw = 1e-3;
    let needed = |e: f64| -> f64 {
        let qi = spec.kq_inj * e * kw;
        if v2(r, x, p, q - qi) >= v_low {
            return 0.0;
        }
        bisect(0.0, p, |d| v2(r, x, p - d, q - qi) >= v_low)
    };
    let feasible = |e: f64| {
        let d = needed(e) / kw;
        let energy = (spec.soc_max - spec.soc_min) * e * spec.eta_dis;
        d <= spec.c_rate_dis * e && heavy_hours as f64 * d <= energy
    };
    // Grid scan then bisection on the first feasible cell.
    let step = 1.0;
    let mut e = 0.0;
    while !feasible(e) {
        e += step;
        assert!(e <= spec.e_max_kwh, "oracle found no feasible capacity");
    }
    bisect((e - step).max(0.0), e, feasible)
}
