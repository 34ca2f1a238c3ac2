#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radial_opf::hierarchy::{RawClustering, RawSubtree};
use radial_opf::network::{RawLine, RawNetwork, RawNode};
use radial_opf::scenario::scale_loads;
use radial_opf::{solve_nonlinear, InjectionVector, Network, SolverOptions};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn feeder(name: &str) -> Network {
    Network::load(&data(name)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random radial feeder with `n` non-root nodes. Node names and line order
/// are shuffled so that ingestion has to reorder them.
pub fn random_raw(rng: &mut impl Rng, n: usize) -> RawNetwork {
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(rng);
    let name = |k: usize| if k == 0 { "src".to_string() } else { format!("b{}", labels[k - 1]) };
    let mut nodes = vec![RawNode {
        name: name(0),
        p_nom_pu: 0.0,
        q_nom_pu: 0.0,
        controllable: false,
    }];
    let mut lines = Vec::with_capacity(n);
    for k in 1..=n {
        // Bias toward recent nodes for longer feeders.
        let lo = k.saturating_sub(4);
        let parent = if rng.gen_bool(0.7) { rng.gen_range(lo..k) } else { rng.gen_range(0..k) };
        lines.push(RawLine {
            from: name(parent),
            to: name(k),
            r_pu: rng.gen_range(0.002..0.03),
            x_pu: rng.gen_range(0.002..0.03),
        });
        let loaded = k == n || rng.gen_bool(0.8);
        let p = if loaded { rng.gen_range(0.005..0.05) } else { 0.0 };
        nodes.push(RawNode {
            name: name(k),
            p_nom_pu: -p,
            q_nom_pu: -p * rng.gen_range(0.2..0.6),
            controllable: loaded,
        });
    }
    nodes.shuffle(rng);
    lines.shuffle(rng);
    RawNetwork {
        v0_squared_pu: 1.1025,
        base_kv: None,
        base_kva: None,
        description: None,
        nodes,
        lines,
    }
}

pub fn random_network(seed: u64, n: usize) -> Network {
    Network::from_raw(&random_raw(&mut rng(seed), n)).unwrap()
}

fn min_voltage(net: &Network) -> Option<f64> {
    let st = solve_nonlinear(net, &InjectionVector::nominal(net), &SolverOptions::default()).ok()?;
    Some(st.min_voltage().1)
}

/// Scales loads so the nominal minimum voltage magnitude hits `target`.
pub fn scale_to_min_voltage(net: &Network, target: f64) -> Network {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while min_voltage(&scale_loads(net, hi).unwrap()).is_some_and(|v| v > target) {
        lo = hi;
        hi *= 2.0;
        assert!(hi < 1e6, "cannot reach target voltage");
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        match min_voltage(&scale_loads(net, mid).unwrap()) {
            Some(v) if v > target => lo = mid,
            _ => hi = mid,
        }
    }
    scale_loads(net, lo.max(f64::MIN_POSITIVE)).unwrap()
}

/// Random valid clustering: a backbone closed toward the root, with every
/// other maximal component hanging off it as one subtree.
pub fn random_clustering(net: &Network, rng: &mut impl Rng, backbone_prob: f64) -> RawClustering {
    let n = net.n();
    // part[j]: None for backbone, Some(k) for subtree k.
    let mut part: Vec<Option<usize>> = vec![None; n + 1];
    let mut roots = Vec::new();
    for j in 1..=n {
        let p = net.parent(j).unwrap();
        let parent_on_backbone = p == 0 || part[p].is_none();
        if parent_on_backbone && rng.gen_bool(backbone_prob) {
            part[j] = None;
        } else if parent_on_backbone {
            part[j] = Some(roots.len());
            roots.push(j);
        } else {
            part[j] = part[p];
        }
    }
    let mut subtrees: Vec<RawSubtree> = roots
        .iter()
        .map(|&r| RawSubtree {
            root: net.name_of(r).to_string(),
            nodes: Vec::new(),
        })
        .collect();
    let mut unclustered = Vec::new();
    for j in 1..=n {
        match part[j] {
            Some(k) => subtrees[k].nodes.push(net.name_of(j).to_string()),
            None => unclustered.push(net.name_of(j).to_string()),
        }
    }
    RawClustering {
        subtrees,
        unclustered,
    }
}

/// Chain 0 - 1 - 2 with identical lines and loads of power factor 0.89.
/// Only node 2 is controllable.
pub fn chain3_with(r: f64, x: f64, p1: f64, p2: f64) -> Network {
    let json = format!(
        r#"{{"v0_squared_pu": 1.1025,
            "nodes": [
              {{"name": "0", "p_nom_pu": 0.0, "q_nom_pu": 0.0, "controllable": false}},
              {{"name": "1", "p_nom_pu": {}, "q_nom_pu": {}, "controllable": false}},
              {{"name": "2", "p_nom_pu": {}, "q_nom_pu": {}, "controllable": true}}],
            "lines": [
              {{"from": "0", "to": "1", "r_pu": {r}, "x_pu": {x}}},
              {{"from": "1", "to": "2", "r_pu": {r}, "x_pu": {x}}}]}}"#,
        -p1,
        -p1 / 2.0,
        -p2,
        -p2 / 2.0
    );
    Network::from_json_str(&json).unwrap()
}

/// Node 2 sits near 0.91 p.u. at nominal load.
pub fn heavy_chain3() -> Network {
    chain3_with(0.03, 0.06, 0.4, 0.8)
}

/// Node 2 sits near 0.94 p.u. at nominal load, with smaller line impedance.
pub fn stiff_chain3() -> Network {
    chain3_with(0.02, 0.04, 0.5, 1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct ChainOptimum {
    pub p: f64,
    pub q: f64,
    pub objective: f64,
}

/// Brute-force optimum of min (p - p0)^2 + (q - q0)^2 over node 2's box
/// subject to v2 >= v_min (squared), using the nonlinear solver directly.
/// For fixed p the best feasible q is the smallest q reaching the limit, so
/// the search reduces to one dimension in p.
pub fn chain3_oracle(net: &Network, v_min: f64, b: &radial_opf::InjectionBox) -> ChainOptimum {
    let opts = SolverOptions {
        tol: 1e-13,
        max_sweeps: 5000,
    };
    let (p0, q0) = (net.node(2).p_nom, net.node(2).q_nom);
    let v2 = |p: f64, q: f64| {
        let u = InjectionVector {
            p: vec![net.node(1).p_nom, p],
            q: vec![net.node(1).q_nom, q],
        };
        solve_nonlinear(net, &u, &opts).unwrap().v[2]
    };
    let (q_lo, q_hi) = (b.q_min[1], b.q_max[1]);
    let best_q = |p: f64| -> Option<f64> {
        if v2(p, q_hi) < v_min {
            return None;
        }
        if v2(p, q_lo) >= v_min {
            return Some(q_lo.max(q0.min(q_hi)));
        }
        let (mut lo, mut hi) = (q_lo, q_hi);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if v2(p, mid) >= v_min {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi.max(q0))
    };
    let cost = |p: f64| best_q(p).map_or(f64::INFINITY, |q| (p - p0).powi(2) + (q - q0).powi(2));
    let (p_lo, p_hi) = (b.p_min[1], b.p_max[1]);
    let steps = 2000;
    let grid = |k: usize| p_lo + (p_hi - p_lo) * k as f64 / steps as f64;
    let k_best = (0..=steps)
        .min_by(|&a, &b| cost(grid(a)).total_cmp(&cost(grid(b))))
        .unwrap();
    let (mut a, mut c) = (grid(k_best.saturating_sub(1)), grid((k_best + 1).min(steps)));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let x1 = c - phi * (c - a);
        let x2 = a + phi * (c - a);
        if cost(x1) <= cost(x2) {
            c = x2;
        } else {
            a = x1;
        }
    }
    let p = 0.5 * (a + c);
    let q = best_q(p).expect("feasible");
    ChainOptimum {
        p,
        q,
        objective: cost(p),
    }
}
