//! Data-generating processes, exact truths and coverage bookkeeping.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepeff::estimators::evaluate_g_formula;
use sepeff::models::fit_nuisance_set;
use sepeff::sim::{
    two_period_dgp, correct_specs, exact_truth, misspecified_specs, random_k1_dgp, run_coverage_experiment, sample_trial, Dgp, DgpLaws, DgpSpec, Law, Rule,
    SampleMode, TableEntry,
};
use sepeff::{ArmPair, EstimatorKind, ModelRole, Scenario};

/// Binomial proportion within `z` standard errors of `p`.
fn near(hits: f64, n: f64, p: f64, z: f64) -> bool {
    (hits / n - p).abs() <= z * (p * (1.0 - p) / n).sqrt()
}

#[test]
fn two_period_truths() {
    let start = Instant::now();
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let want = [((1, 1), 0.72), ((1, 0), 0.74), ((0, 1), 0.62), ((0, 0), 0.66)];
    for ((zy, zd), v) in want {
        let t = exact_truth(&dgp, ArmPair::new(zy, zd)).unwrap();
        assert!((t.terminal() - v).abs() <= 0.005, "({}, {}) {}", zy, zd, t.terminal());
        assert!(t.values[0] <= t.values[1]);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn truth_matches_g_formula_on_the_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut specs = vec![two_period_dgp()];
    specs.extend((0..10).map(|_| random_k1_dgp(&mut rng)));
    for spec in specs {
        let dgp = Dgp::new(spec).unwrap();
        for a in ArmPair::all() {
            let t = exact_truth(&dgp, a).unwrap().values;
            let g = evaluate_g_formula(&DgpLaws { dgp: &dgp }, a).unwrap().values;
            assert!(t.iter().zip(&g).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}

#[test]
fn sampler_frequencies_match_the_process() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let n = 100_000;
    let ds = sample_trial(&dgp, n, 41, SampleMode::TwoArm).unwrap();
    let first: Vec<_> = ds.individuals.iter().map(|r| &r.history[0]).collect();
    let c1 = first.iter().filter(|iv| iv.c == Some(1)).count() as f64;
    assert!(near(c1, n as f64, 1.0 / 50.0, 4.0), "{}", c1 / n as f64);
    let unc: Vec<_> = first.iter().filter(|iv| iv.c == Some(0)).collect();
    let r1 = unc.iter().filter(|iv| iv.r == Some(1)).count() as f64;
    assert!(near(r1, unc.len() as f64, 0.8, 4.0), "{}", r1 / unc.len() as f64);
    let z1 = ds.individuals.iter().filter(|r| r.z == 1).count() as f64;
    assert!(near(z1, n as f64, 0.5, 4.0));
    // D_1 given the branch I(Z = R_1) and L_0.
    for eq in [0u8, 1] {
        for l0 in [0.0, 1.0] {
            let cell: Vec<_> = ds
                .individuals
                .iter()
                .filter(|r| r.baseline[0] == l0 && r.history[0].c == Some(0) && ((r.z == r.history[0].r.unwrap()) as u8) == eq)
                .collect();
            let d = cell.iter().filter(|r| r.history[0].d == Some(1)).count() as f64;
            let p = if eq == 1 { (1.0 + l0) / 20.0 } else { (1.0 + l0) / 30.0 };
            assert!(near(d, cell.len() as f64, p, 4.0), "eq {} l0 {}: {}", eq, l0, d / cell.len() as f64);
        }
    }
}

#[test]
fn four_arm_sampling_draws_components_independently() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let n = 40_000;
    let ds = sample_trial(&dgp, n, 42, SampleMode::FourArm).unwrap();
    for a in ArmPair::all() {
        let k = ds.individuals.iter().filter(|r| r.arm == Some(a)).count() as f64;
        assert!(near(k, n as f64, 0.25, 4.0));
    }
    assert!(ds.individuals.iter().all(|r| r.z == r.arm.unwrap().z_y));
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let a = sample_trial(&dgp, 500, 7, SampleMode::TwoArm).unwrap();
    assert_eq!(a, sample_trial(&dgp, 500, 7, SampleMode::TwoArm).unwrap());
    assert_ne!(a, sample_trial(&dgp, 500, 8, SampleMode::TwoArm).unwrap());
}

#[test]
fn spec_json_round_trip() {
    let spec = two_period_dgp();
    let s = serde_json::to_string_pretty(&spec).unwrap();
    let back: DgpSpec = serde_json::from_str(&s).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut no_y = two_period_dgp();
    no_y.rules.retain(|r| r.var != "Y");
    assert!(Dgp::new(no_y).is_err());
    let mut bad_p = two_period_dgp();
    bad_p.rules.push(Rule::new("D", None, Law::Table { features: vec![], entries: vec![TableEntry { key: vec![], p: Some(1.5), probs: None }] }));
    assert!(Dgp::new(bad_p).is_err());
    let mut bad_feature = two_period_dgp();
    bad_feature.rules.push(Rule::new("D", None, Law::Table { features: vec!["nope".into()], entries: vec![] }));
    assert!(Dgp::new(bad_feature).is_err());
}

#[test]
fn zero_hazard_process_has_zero_truth() {
    let mut spec = two_period_dgp();
    spec.rules.push(Rule::new("Y", None, Law::Table { features: vec![], entries: vec![TableEntry { key: vec![], p: Some(0.0), probs: None }] }));
    let dgp = Dgp::new(spec).unwrap();
    assert!(ArmPair::all().iter().all(|&a| exact_truth(&dgp, a).unwrap().terminal() == 0.0));
}

#[test]
fn misspecified_covariate_law_has_one_cell() {
    let data = sample_trial(&Dgp::new(two_period_dgp()).unwrap(), 3_000, 43, SampleMode::TwoArm).unwrap();
    let nuis = fit_nuisance_set(&data, &misspecified_specs(&correct_specs()), &EstimatorKind::all()).unwrap();
    let pos = 0;
    let m = nuis.model(ModelRole::LD, pos, 1).unwrap();
    assert_eq!(m.table(0).unwrap().keys.len(), 1);
    assert_eq!(m.fits.len(), 1);
    // The baseline law keeps its correct fit.
    assert!(nuis.model(ModelRole::LD, 0, 0).unwrap().table(0).is_some());
}

fn small_scenario(seed: u64) -> Scenario {
    Scenario {
        dgp: two_period_dgp(),
        specs: correct_specs(),
        estimators: vec![EstimatorKind::PlugIn, EstimatorKind::WeightedY],
        n: 1000,
        replications: 4,
        bootstraps: 20,
        level: 0.9,
        seed,
        arms: ArmPair::all().to_vec(),
    }
}

#[test]
fn coverage_runs_are_reproducible() {
    let a = run_coverage_experiment(&small_scenario(9)).unwrap();
    let b = run_coverage_experiment(&small_scenario(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.failures, 0, "{:?}", a.failure_reasons);
    assert_eq!(a.cells.len(), 8);
    assert!(a.cells.iter().all(|c| (0.0..=1.0).contains(&c.fraction) && c.valid + a.failures == 4));
    let c = run_coverage_experiment(&small_scenario(10)).unwrap();
    assert_ne!(a.runs, c.runs);
    let csv = a.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap().starts_with("estimator,n,"));
}

#[test]
fn scenario_validation() {
    let mut s = small_scenario(0);
    s.replications = 0;
    assert!(run_coverage_experiment(&s).is_err());
    let mut s = small_scenario(0);
    s.level = 1.0;
    assert!(s.validate().is_err());
    let j = serde_json::to_string(&small_scenario(3)).unwrap();
    let back: Scenario = serde_json::from_str(&j).unwrap();
    assert_eq!(back, small_scenario(3));
}
