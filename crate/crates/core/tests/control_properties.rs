mod common;

use proptest::prelude::*;
use rand::Rng;
use radial_opf::gradients::{improved_sensitivity, LineMeasurement};
use radial_opf::hierarchy::{
    assemble_alpha_beta, run_hierarchical, validate_clustering, Clustering, MessageLog, RawClustering,
    Round,
};
use radial_opf::opf::project_box;
use radial_opf::scenario::{build_problem, scale_loads};
use radial_opf::{
    run_centralized, solve_nonlinear, DualState, InjectionVector, OpfConfig, OpfParams, OpfProblem,
    SensitivityMode, SolverOptions,
};

use common::{
    chain3_oracle, feeder, heavy_chain3, random_clustering, stiff_chain3, random_network, rng, scale_to_min_voltage,
};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    }
}

fn problem(net: &radial_opf::Network, params: OpfParams) -> OpfProblem {
    build_problem(
        net,
        &OpfConfig {
            params,
            ..OpfConfig::default()
        },
    )
    .unwrap()
}

fn random_duals(rng: &mut impl Rng, n: usize) -> DualState {
    DualState {
        lower: (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..2.0) } else { 0.0 }).collect(),
        upper: (0..n).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..2.0) } else { 0.0 }).collect(),
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn iterates_stay_feasible_and_duals_nonnegative(seed in any::<u64>(), n in 3usize..30, improved in any::<bool>()) {
        let net = scale_to_min_voltage(&random_network(seed, n), 0.92);
        let prob = problem(&net, OpfParams { max_iter: 400, ..OpfParams::default() });
        let mode = if improved { SensitivityMode::Improved } else { SensitivityMode::Linear };
        let traj = run_centralized(&prob, mode, &prob.targets).unwrap();
        prop_assert!(!traj.records.is_empty() && traj.records.len() <= 400);
        for r in &traj.records {
            prop_assert!(prob.contains(&r.u));
            prop_assert!(r.duals.lower.iter().chain(&r.duals.upper).all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn hierarchical_assembly_matches_dense_product(seed in any::<u64>(), n in 2usize..40, bp in 0.0f64..0.8) {
        let net = scale_to_min_voltage(&random_network(seed, n), 0.93);
        let mut r = rng(seed ^ 0x5eed);
        let clustering = Clustering::resolve(&net, &random_clustering(&net, &mut r, bp)).unwrap();
        let prob = problem(&net, OpfParams::default());
        let st = solve_nonlinear(&net, &prob.targets, &SolverOptions::default()).unwrap();
        let sens = improved_sensitivity(&net, &prob.idx, &st).unwrap();
        let duals = random_duals(&mut r, net.n());
        let mut log = MessageLog::default();
        let (a, b) = assemble_alpha_beta(&net, &prob.idx, &clustering, &st, &duals, 0, &mut log).unwrap();
        let (ea, eb) = sens.transpose_mul(&duals.net_weight());
        let scale = ea.iter().chain(&eb).fold(0.0f64, |m, x| m.max(x.abs()));
        for h in 0..net.n() {
            prop_assert!((a[h] - ea[h]).abs() <= 1e-9 * ea[h].abs().max(1e-6 * scale) + 1e-15);
            prop_assert!((b[h] - eb[h]).abs() <= 1e-9 * eb[h].abs().max(1e-6 * scale) + 1e-15);
        }
        let k = clustering.k();
        prop_assert_eq!(log.count(0, Round::RcToCc), k);
        prop_assert_eq!(log.count(0, Round::CcToRc), k);
        prop_assert_eq!(log.count(0, Round::CcToNode), clustering.unclustered.len());
        prop_assert_eq!(log.count(0, Round::RcToNode), net.n() - clustering.unclustered.len());

        // Message pattern does not depend on the values carried.
        let mut zero_log = MessageLog::default();
        assemble_alpha_beta(&net, &prob.idx, &clustering, &st, &DualState::zeros(net.n()), 0, &mut zero_log).unwrap();
        prop_assert_eq!(zero_log.messages, log.messages);
    }

    #[test]
    fn cross_subtree_entries_factor_through_subtree_roots(seed in any::<u64>(), n in 4usize..40) {
        let net = scale_to_min_voltage(&random_network(seed, n), 0.93);
        let mut r = rng(seed);
        let c = Clustering::resolve(&net, &random_clustering(&net, &mut r, 0.3)).unwrap();
        let prob = problem(&net, OpfParams::default());
        let st = solve_nonlinear(&net, &prob.targets, &SolverOptions::default()).unwrap();
        let sens = improved_sensitivity(&net, &prob.idx, &st).unwrap();
        for (k, sk) in c.subtrees.iter().enumerate() {
            for (k2, sk2) in c.subtrees.iter().enumerate() {
                if k == k2 {
                    continue;
                }
                let (rw, xw) = (prob.idx.r(sk.root, sk2.root), prob.idx.x(sk.root, sk2.root));
                for &h in &sk.nodes {
                    for &j in &sk2.nodes {
                        prop_assert!(!prob.idx.on_path(j, h));
                        let w = LineMeasurement::read(&net, &st, j).unwrap().loss_weight();
                        prop_assert!((sens.dv_dp[(j - 1, h - 1)] - rw * w).abs() <= 1e-14);
                        prop_assert!((sens.dv_dq[(j - 1, h - 1)] - xw * w).abs() <= 1e-14);
                    }
                }
            }
        }
    }
}

/// Moves node `name` into part `target` (subtree index, or None for unclustered).
fn move_node(raw: &RawClustering, name: &str, target: Option<usize>) -> RawClustering {
    let mut out = raw.clone();
    for st in &mut out.subtrees {
        st.nodes.retain(|n| n != name);
    }
    out.unclustered.retain(|n| n != name);
    match target {
        Some(k) => out.subtrees[k].nodes.push(name.to_string()),
        None => out.unclustered.push(name.to_string()),
    }
    out
}

#[test]
fn validator_catches_every_single_node_move() {
    let mut detected = 0;
    let mut r = rng(8);
    for trial in 0..100u64 {
        let net = random_network(1000 + trial, r.gen_range(4..40));
        let raw = random_clustering(&net, &mut r, 0.35);
        assert!(validate_clustering(&net, &raw).is_empty(), "generator produced an invalid clustering");
        let j = r.gen_range(1..=net.n());
        let name = net.name_of(j).to_string();
        let current = raw.subtrees.iter().position(|s| s.nodes.contains(&name));
        let mut options: Vec<Option<usize>> = (0..raw.subtrees.len()).map(Some).collect();
        options.push(None);
        options.retain(|&o| o != current);
        if options.is_empty() {
            continue;
        }
        let target = options[r.gen_range(0..options.len())];
        let moved = move_node(&raw, &name, target);
        if !validate_clustering(&net, &moved).is_empty() {
            detected += 1;
        }
    }
    assert_eq!(detected, 100);
}

#[test]
fn flat_clustering_reproduces_centralized_bit_for_bit() {
    let net = scale_to_min_voltage(&random_network(77, 25), 0.92);
    let prob = problem(&net, OpfParams { max_iter: 600, ..OpfParams::default() });
    let central = run_centralized(&prob, SensitivityMode::Improved, &prob.targets).unwrap();
    let (hier, log) = run_hierarchical(&prob, &Clustering::flat(&net), &prob.targets).unwrap();
    assert_eq!(central.records.len(), hier.records.len());
    for (a, b) in central.records.iter().zip(&hier.records) {
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.duals, b.duals);
    }
    assert_eq!(log.count(3, Round::RcToCc), 0);
    assert_eq!(log.count(3, Round::CcToNode), net.n());
}

#[test]
fn chain_admits_a_single_subtree() {
    let net = radial_opf::Network::from_json_str(
        r#"{"v0_squared_pu": 1.1025,
            "nodes": [
              {"name": "s", "p_nom_pu": 0, "q_nom_pu": 0, "controllable": false},
              {"name": "a", "p_nom_pu": -0.2, "q_nom_pu": -0.1, "controllable": true},
              {"name": "b", "p_nom_pu": -0.3, "q_nom_pu": -0.1, "controllable": true},
              {"name": "c", "p_nom_pu": -0.3, "q_nom_pu": -0.15, "controllable": true},
              {"name": "d", "p_nom_pu": -0.2, "q_nom_pu": -0.1, "controllable": true},
              {"name": "e", "p_nom_pu": -0.4, "q_nom_pu": -0.2, "controllable": true}],
            "lines": [
              {"from": "s", "to": "a", "r_pu": 0.02, "x_pu": 0.03},
              {"from": "a", "to": "b", "r_pu": 0.02, "x_pu": 0.03},
              {"from": "b", "to": "c", "r_pu": 0.02, "x_pu": 0.03},
              {"from": "c", "to": "d", "r_pu": 0.02, "x_pu": 0.03},
              {"from": "d", "to": "e", "r_pu": 0.02, "x_pu": 0.03}]}"#,
    )
    .unwrap();
    assert!(solve_nonlinear(&net, &InjectionVector::nominal(&net), &SolverOptions::default())
        .unwrap()
        .min_voltage()
        .1
        < 0.95);
    // On a chain any second subtree lies on the first one's root path, so
    // every split into two subtrees is rejected.
    let names = ["a", "b", "c", "d", "e"];
    for first in 0..5 {
        for second in first + 1..5 {
            for end in second..5 {
                let q = |v: &[&str]| v.iter().map(|n| format!("\"{n}\"")).collect::<Vec<_>>().join(",");
                let json = format!(
                    r#"{{"subtrees": [{{"root": "{}", "nodes": [{}]}}, {{"root": "{}", "nodes": [{}]}}],
                        "unclustered": [{}]}}"#,
                    names[first],
                    q(&names[first..second]),
                    names[second],
                    q(&names[second..=end]),
                    q(&[&names[..first], &names[end + 1..]].concat()),
                );
                let raw = RawClustering::from_json_str(&json).unwrap();
                assert!(Clustering::resolve(&net, &raw).is_err(), "{json}");
            }
        }
    }

    let prob = problem(&net, OpfParams::default());
    let central = run_centralized(&prob, SensitivityMode::Improved, &prob.targets).unwrap();
    let c = Clustering::resolve(
        &net,
        &RawClustering::from_json_str(
            r#"{"subtrees": [{"root": "a", "nodes": ["a", "b", "c", "d", "e"]}], "unclustered": []}"#,
        )
        .unwrap(),
    )
    .unwrap();
    let (hier, _) = run_hierarchical(&prob, &c, &prob.targets).unwrap();
    let (uc, uh) = (&central.last().unwrap().u, &hier.last().unwrap().u);
    assert!(uc.distance(uh) <= 1e-6);
}

#[test]
fn two_subtree_star_matches_centralized() {
    // 0 - 1, then two branches 1 - 2 - 3 and 1 - 4 - 5 handled by separate RCs.
    let net = radial_opf::Network::from_json_str(
        r#"{"v0_squared_pu": 1.1025,
            "nodes": [
              {"name": "s", "p_nom_pu": 0, "q_nom_pu": 0, "controllable": false},
              {"name": "a", "p_nom_pu": -0.2, "q_nom_pu": -0.1, "controllable": true},
              {"name": "b", "p_nom_pu": -0.3, "q_nom_pu": -0.1, "controllable": true},
              {"name": "c", "p_nom_pu": -0.3, "q_nom_pu": -0.15, "controllable": true},
              {"name": "d", "p_nom_pu": -0.2, "q_nom_pu": -0.1, "controllable": true},
              {"name": "e", "p_nom_pu": -0.4, "q_nom_pu": -0.2, "controllable": true}],
            "lines": [
              {"from": "s", "to": "a", "r_pu": 0.03, "x_pu": 0.05},
              {"from": "a", "to": "b", "r_pu": 0.03, "x_pu": 0.04},
              {"from": "b", "to": "c", "r_pu": 0.03, "x_pu": 0.04},
              {"from": "a", "to": "d", "r_pu": 0.03, "x_pu": 0.04},
              {"from": "d", "to": "e", "r_pu": 0.03, "x_pu": 0.04}]}"#,
    )
    .unwrap();
    let c = Clustering::resolve(
        &net,
        &RawClustering::from_json_str(
            r#"{"subtrees": [{"root": "b", "nodes": ["b", "c"]}, {"root": "d", "nodes": ["d", "e"]}],
                "unclustered": ["a"]}"#,
        )
        .unwrap(),
    )
    .unwrap();
    let prob = problem(&net, OpfParams::default());
    let central = run_centralized(&prob, SensitivityMode::Improved, &prob.targets).unwrap();
    let (hier, log) = run_hierarchical(&prob, &c, &prob.targets).unwrap();
    assert_eq!(central.termination, hier.termination);
    let worst = central
        .records
        .iter()
        .zip(&hier.records)
        .map(|(a, b)| a.u.distance(&b.u))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "max deviation {worst}");
    assert!(central.last().unwrap().max_violation > 0.0 || central.converged());
    assert_eq!(log.count(0, Round::RcToCc), 2);
}

#[test]
fn wide_limits_reach_a_stationary_point() {
    let net = scale_to_min_voltage(&random_network(5, 10), 0.95);
    // The projected-gradient residual is bounded by step / sigma_u at the
    // stop, so sigma_u must be large enough for delta to bound it tightly.
    let mut prob = problem(
        &net,
        OpfParams {
            sigma_u: 0.1,
            delta: 1e-10,
            max_iter: 20000,
            ..OpfParams::default()
        },
    );
    prob.v_min.iter_mut().for_each(|v| *v = 0.25);
    prob.v_max.iter_mut().for_each(|v| *v = 4.0);
    let start = InjectionVector {
        p: prob.bounds.p_max.clone(),
        q: prob.bounds.q_max.clone(),
    };
    let traj = run_centralized(&prob, SensitivityMode::Improved, &start).unwrap();
    assert!(traj.converged(), "{:?}", traj.termination);
    let u = &traj.last().unwrap().u;
    let (_, gp, gq) = radial_opf::opf::objective_and_gradient(&prob, u);
    let moved = project_box(
        &InjectionVector {
            p: u.p.iter().zip(&gp).map(|(a, g)| a - g).collect(),
            q: u.q.iter().zip(&gq).map(|(a, g)| a - g).collect(),
        },
        &prob.bounds,
    );
    assert!(moved.distance(u) <= 1e-8);
}

#[test]
fn violation_shrinks_over_a_run() {
    let net = scale_loads(&feeder("ieee37_style.json"), 6.0).unwrap();
    let prob = problem(&net, OpfParams { max_iter: 2000, ..OpfParams::default() });
    for mode in [SensitivityMode::Linear, SensitivityMode::Improved] {
        let traj = run_centralized(&prob, mode, &prob.targets).unwrap();
        let n = traj.records.len();
        let tenth = (n / 10).max(1);
        let avg = |rs: &[radial_opf::opf::IterationRecord]| {
            rs.iter().map(|r| r.max_violation).sum::<f64>() / rs.len() as f64
        };
        assert!(avg(&traj.records[n - tenth..]) <= avg(&traj.records[..tenth]));
    }
}

#[test]
fn heavy_chain_is_lifted_to_the_limit_by_both_modes() {
    // Larger steps than the feeder defaults so the 3-node instance settles
    // within the iteration budget.
    let net = stiff_chain3();
    let params = OpfParams {
        sigma_u: 0.05,
        sigma_mu: 5.0,
        max_iter: 20000,
        ..OpfParams::default()
    };
    let prob = problem(&net, params);
    let v_nom = solve_nonlinear(&net, &prob.targets, &SolverOptions::default()).unwrap();
    assert!(v_nom.v[2] < prob.v_min[1]);
    let run = |mode| {
        let t = run_centralized(&prob, mode, &prob.targets).unwrap();
        assert!(t.converged());
        t.last().unwrap().v[2]
    };
    let imp = run(SensitivityMode::Improved);
    let lin = run(SensitivityMode::Linear);
    assert!(imp >= prob.v_min[1] - 1e-4);
    assert!(lin >= prob.v_min[1] - 1e-4);
    // Under voltage feedback both modes settle at the regularized limit; the
    // smaller loss-corrected sensitivities need a larger multiplier and so
    // end marginally lower.
    assert!(imp < lin);
    assert!(lin - imp < 1e-5);
}

#[test]
fn finite_difference_mode_matches_direct_solution() {
    let net = heavy_chain3();
    let params = OpfParams {
        sigma_u: 0.05,
        sigma_mu: 5.0,
        epsilon: 1e-6,
        delta: 1e-8,
        max_iter: 50000,
        ..OpfParams::default()
    };
    let prob = problem(&net, params);
    let traj = run_centralized(&prob, SensitivityMode::FiniteDifference, &prob.targets).unwrap();
    assert!(traj.converged());
    let u = &traj.last().unwrap().u;
    let opt = chain3_oracle(&net, prob.v_min[1], &prob.bounds);
    assert!((u.p[1] - opt.p).abs() <= 1e-3);
    assert!((u.q[1] - opt.q).abs() <= 1e-3);
}
