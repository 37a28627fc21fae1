//! Graph properties checked against brute-force oracles on random graphs.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepeff::graph::random::{strategy_centered, treatment_centered, RandomGraphConfig};
use sepeff::graph::{
    build_swig, check_dcc, check_dcc_treatment_centered, check_partial_isolation, convert_to_strategy_centered, d_separated, path_is_open,
    simulation_graph, Adj, AsGraph, Component, Dag, DccPartition, NodeLabel, Role,
};
use sepeff::Block;

/// Every simple path between `x` and `y` in the skeleton, checked one by one.
fn brute_separated(adj: &Adj, x: &[usize], y: &[usize], z: &[usize]) -> bool {
    let n = adj.len();
    let zs: BTreeSet<usize> = z.iter().copied().collect();
    let mut desc_in_z = vec![false; n];
    for v in 0..n {
        let mut stack = vec![v];
        let mut seen = vec![false; n];
        while let Some(u) = stack.pop() {
            if seen[u] {
                continue;
            }
            seen[u] = true;
            if zs.contains(&u) {
                desc_in_z[v] = true;
                break;
            }
            stack.extend(adj.children[u].iter().copied());
        }
    }
    let open = |p: &[usize]| {
        (1..p.len().saturating_sub(1)).all(|i| {
            let (a, v, b) = (p[i - 1], p[i], p[i + 1]);
            let collider = adj.children[a].contains(&v) && adj.children[b].contains(&v);
            if collider {
                desc_in_z[v]
            } else {
                !zs.contains(&v)
            }
        })
    };
    fn walk(adj: &Adj, path: &mut Vec<usize>, y: &BTreeSet<usize>, open: &dyn Fn(&[usize]) -> bool) -> bool {
        let last = *path.last().unwrap();
        if path.len() > 1 && y.contains(&last) {
            return open(path);
        }
        let nbrs: Vec<usize> = adj.children[last].iter().chain(adj.parents[last].iter()).copied().collect();
        for v in nbrs {
            if path.contains(&v) || adj.fixed[v] {
                continue;
            }
            path.push(v);
            if walk(adj, path, y, open) {
                return true;
            }
            path.pop();
        }
        false
    }
    let ys: BTreeSet<usize> = y.iter().copied().collect();
    !x.iter().any(|&s| walk(adj, &mut vec![s], &ys, &open))
}

fn small_cfg() -> RandomGraphConfig {
    RandomGraphConfig { k: 1, n_l: 1, edge_p: 0.35, treat_p: 0.35, n_u: 1, ly_p: 0.5 }
}

fn pick(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    use rand::seq::index::sample;
    sample(rng, n, k.min(n)).into_vec()
}

#[test]
fn d_separation_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let g = if i % 2 == 0 { treatment_centered(&mut rng, &small_cfg()) } else { strategy_centered(&mut rng, &small_cfg()) };
        let n = g.nodes.len();
        for _ in 0..10 {
            let all = pick(&mut rng, n, 5);
            let (x, y, z) = (&all[..1], &all[1..2], &all[2..]);
            let fast = d_separated(&g, x, y, z).unwrap();
            assert_eq!(fast, brute_separated(&g.adj(), x, y, z), "{:?} {:?} {:?} on {}", x, y, z, g.to_json());
            assert_eq!(fast, d_separated(&g, y, x, z).unwrap());
        }
    }
}

#[test]
fn swig_equals_edge_deleted_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..60 {
        let g = strategy_centered(&mut rng, &small_cfg());
        let iv: Vec<(usize, u8)> = g.nodes_where(|n| matches!(n.role, Role::R | Role::C)).into_iter().map(|i| (i, 1)).collect();
        let swig = build_swig(&g, &iv).unwrap();
        let cut: BTreeSet<usize> = iv.iter().map(|&(v, _)| v).collect();
        let surgical = Dag::new(g.nodes.clone(), g.edges.iter().copied().filter(|[a, _]| !cut.contains(a)).collect(), vec![], g.k).unwrap();
        for _ in 0..10 {
            let all = pick(&mut rng, g.nodes.len(), 5);
            let (x, y, z) = (&all[..1], &all[1..2], &all[2..]);
            assert_eq!(d_separated(&swig, x, y, z).unwrap(), d_separated(&surgical, x, y, z).unwrap());
            assert_eq!(d_separated(&swig, x, y, z).unwrap(), brute_separated(&Adj::of_swig(&swig), x, y, z));
        }
    }
}

#[test]
fn empty_intervention_is_the_graph() {
    let g = simulation_graph();
    let s = build_swig(&g, &[]).unwrap();
    let (a, b) = (Adj::of_swig(&s), Adj::of_dag(&g));
    assert_eq!(a.children, b.children);
    assert!(a.fixed.iter().all(|f| !f));
    assert!(build_swig(&g, &[(g.nodes.len(), 1)]).is_err());
}

/// Edge set the conversion should produce, derived from the loop description
/// directly on node names.
fn expected_conversion(g: &Dag) -> BTreeSet<(String, String)> {
    let gamma = |i: usize| {
        let n = &g.nodes[i];
        match n.role {
            Role::AY | Role::AD => NodeLabel::at(Role::R, n.t.unwrap()).to_string(),
            _ => n.to_string(),
        }
    };
    let is_a = |i: usize| matches!(g.nodes[i].role, Role::AY | Role::AD);
    let mut out = BTreeSet::new();
    for &[a, b] in &g.edges {
        if !is_a(a) && !is_a(b) {
            out.insert((g.nodes[a].to_string(), g.nodes[b].to_string()));
        }
    }
    for (i, n) in g.nodes.iter().enumerate() {
        let zw = match n.role {
            Role::AY => "Z_Y",
            Role::AD => "Z_D",
            _ => continue,
        };
        let rk = gamma(i);
        out.insert((zw.to_string(), rk.clone()));
        for &[a, b] in &g.edges {
            if a == i {
                out.insert((zw.to_string(), gamma(b)));
                if gamma(b) != rk {
                    out.insert((rk.clone(), gamma(b)));
                }
            }
            if b == i && gamma(a) != rk {
                out.insert((gamma(a), rk.clone()));
            }
        }
    }
    out
}

#[test]
fn conversion_matches_the_loop_description() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..100 {
        let cfg = RandomGraphConfig { k: 1 + i % 3, n_l: 1 + i % 2, ..small_cfg() };
        let g = treatment_centered(&mut rng, &cfg);
        let h = convert_to_strategy_centered(&g).unwrap();
        assert!(h.topological_order().is_some());
        assert_eq!(h.edge_names(), expected_conversion(&g));
        assert_eq!(h.edges.len(), h.edge_names().len(), "duplicate edges");
        assert!(h.nodes.iter().all(|n| !matches!(n.role, Role::AY | Role::AD)));
        for k in 1..=cfg.k + 1 {
            assert!(h.find(Role::R, Some(k)).is_some());
        }
    }
}

/// Treatment-centered and strategy-centered readings of the four conditions
/// agree on graphs without latent nodes.
#[test]
fn treatment_centered_conditions_match_converted_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut both = [0usize; 2];
    for i in 0..50 {
        let cfg = RandomGraphConfig { k: 1 + i % 2, n_l: 1, edge_p: 0.3, treat_p: 0.25, n_u: 0, ly_p: 0.5 };
        let g = treatment_centered(&mut rng, &cfg);
        let h = convert_to_strategy_centered(&g).unwrap();
        let tc = check_dcc_treatment_centered(&g, &DccPartition::from_roles(&g, Block::D)).unwrap();
        let sc = check_dcc(&h, &DccPartition::from_roles(&h, Block::D)).unwrap();
        assert_eq!(tc.checks.len(), sc.checks.len());
        for (a, b) in tc.checks.iter().zip(&sc.checks) {
            assert_eq!((a.k, a.condition), (b.k, b.condition));
            assert_eq!(a.holds, b.holds, "k {} condition {} on {}", a.k, a.condition, g.to_json());
        }
        both[sc.all_hold() as usize] += 1;
    }
    assert!(both[0] > 0 && both[1] > 0, "{:?}", both);
}

#[test]
fn dcc_without_outcome_block_implies_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut passing = 0;
    for i in 0..50 {
        let cfg = RandomGraphConfig { k: 1 + i % 2, n_l: 1, edge_p: 0.25, treat_p: 0.15, n_u: i % 2, ly_p: 0.0 };
        let g = strategy_centered(&mut rng, &cfg);
        let report = check_dcc(&g, &DccPartition::from_roles(&g, Block::D)).unwrap();
        if report.all_hold() {
            passing += 1;
            let iso = check_partial_isolation(&g, Component::ZY).unwrap();
            assert!(iso.holds, "{:?} on {}", iso.witness, g.to_json());
        }
    }
    assert!(passing >= 5, "only {} graphs passed", passing);
}

/// Conditioning set of statement (k, condition), rebuilt from node roles.
fn conditioning(g: &Dag, k: usize, condition: u8) -> Vec<usize> {
    let zy = g.find(Role::ZY, None).unwrap();
    let zd = g.find(Role::ZD, None).unwrap();
    let upto = |role: Role, t: usize| g.nodes_where(|n| n.role == role && n.t.unwrap() <= t);
    let covs = |f: &dyn Fn(&NodeLabel) -> bool| g.nodes_where(|n| n.role.is_covariate() && f(n));
    let before = |n: &NodeLabel| n.t.unwrap() < k;
    let (root, d_upto, ls) = match condition {
        1 => (zy, k + 1, covs(&|n| n.t.unwrap() <= k)),
        2 => (zd, k, covs(&|n| n.t.unwrap() <= k)),
        3 => (zy, k, covs(&|n| before(n) || (n.t == Some(k) && n.role == Role::LD))),
        _ => (zd, k, covs(&before)),
    };
    [vec![root], upto(Role::D, d_upto), upto(Role::Y, k), ls].concat()
}

#[test]
fn failing_checks_carry_open_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut failures = 0;
    for _ in 0..50 {
        let g = strategy_centered(&mut rng, &small_cfg());
        let report = check_dcc(&g, &DccPartition::from_roles(&g, Block::D)).unwrap();
        let iv: Vec<(usize, u8)> = g
            .nodes_where(|n| matches!(n.role, Role::R | Role::C))
            .into_iter()
            .map(|i| (i, (g.nodes[i].role == Role::R) as u8))
            .collect();
        let swig = build_swig(&g, &iv).unwrap();
        let adj = Adj::of_swig(&swig);
        for c in report.failures() {
            failures += 1;
            let path = c.path_idx.as_ref().expect("failure without a path");
            assert!(path.len() >= 2 && path.iter().all(|&v| !adj.fixed[v]));
            assert!(path.windows(2).all(|w| adj.children[w[0]].contains(&w[1]) || adj.children[w[1]].contains(&w[0])));
            assert!(path_is_open(&swig, path, &conditioning(&g, c.k, c.condition)), "{} via {:?}", c.statement, c.path);
        }
    }
    assert!(failures > 0);
}

#[test]
fn simulation_graph_passes_with_all_covariates_in_d_block() {
    let g = simulation_graph();
    assert!(check_dcc(&g, &DccPartition::from_roles(&g, Block::D)).unwrap().all_hold());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separation_is_symmetric_and_monotone(seed in any::<u64>(), strategy in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = if strategy { strategy_centered(&mut rng, &small_cfg()) } else { treatment_centered(&mut rng, &small_cfg()) };
        let all = pick(&mut rng, g.nodes.len(), 6);
        let (x, y, z) = (&all[..2], &all[2..3], &all[3..]);
        let sep = d_separated(&g, x, y, z).unwrap();
        prop_assert_eq!(sep, d_separated(&g, y, x, z).unwrap());
        if sep {
            prop_assert!(d_separated(&g, &x[..1], y, z).unwrap());
        }
    }
}
