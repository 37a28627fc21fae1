//! Law-level identities between the g-formula, the weighted estimators and
//! the one-step estimator, on exact enumerated laws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepeff::data::{HistView, Interval, IndividualRecord, Schema, Trajectory, TrialDataset};
use sepeff::estimators::{
    evaluate_g_formula, influence_contribution, one_step_curve, weight_trajectories, weighted_d_curve, weighted_y_curve, IfWorkspace, Route,
};
use sepeff::laws::LawSet;
use sepeff::models::{fit_nuisance_set, Family, ModelRole, ModelSpec, Strata};
use sepeff::sim::{
    two_period_dgp, correct_specs, exact_truth, misspecified_specs, observed_law_dataset, random_k1_dgp, random_k1_dgp_with, Dgp, DgpLaws, DgpSpec, Law, Rule,
    TableEntry,
};
use sepeff::{ArmPair, Block, Covariate, EstimatorKind, EstimatorOptions};

mod common;

use common::flat_oracle;

const TOL: f64 = 1e-10;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn twenty_random_laws_agree_across_routes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let o = EstimatorOptions::default();
    for _ in 0..20 {
        let dgp = Dgp::new(random_k1_dgp_with(&mut rng, 1)).unwrap();
        let laws = DgpLaws { dgp: &dgp };
        let data = observed_law_dataset(&dgp).unwrap();
        assert!((data.total_weight() - 1.0).abs() < 1e-12);
        for a in ArmPair::all() {
            let (n0, n1) = flat_oracle(&laws, a);
            let flat = [n0, n0 + n1];
            let g = evaluate_g_formula(&laws, a).unwrap().values;
            let t = exact_truth(&dgp, a).unwrap().values;
            let wy = weighted_y_curve(&data, &laws, a, &o).unwrap().0;
            let wd = weighted_d_curve(&data, &laws, a, &o).unwrap().0;
            let (os, corr) = one_step_curve(&data, &laws, a, &o).unwrap();
            for (name, v) in [("g", &g), ("truth", &t), ("weighted_y", &wy), ("weighted_d", &wd), ("one_step", &os)] {
                assert!(close(v, &flat, TOL), "{} {:?} vs flat {:?} at {}", name, v, flat, a);
            }
            assert!(corr.iter().all(|c| c.abs() <= TOL), "{:?}", corr);
        }
    }
}

#[test]
fn ice_recursion_matches_flat_sum_per_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let dgp = Dgp::new(random_k1_dgp_with(&mut rng, 1)).unwrap();
        let laws = DgpLaws { dgp: &dgp };
        for a in ArmPair::all() {
            let ws = IfWorkspace::new(&laws, a, &EstimatorOptions::default()).unwrap();
            let (n0, n1) = flat_oracle(&laws, a);
            assert!((ws.nu(0).unwrap() - n0).abs() < 1e-12);
            assert!((ws.nu(1).unwrap() - n1).abs() < 1e-12);
        }
    }
}

#[test]
fn two_time_varying_covariates_keep_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let o = EstimatorOptions::default();
    for _ in 0..10 {
        let dgp = Dgp::new(random_k1_dgp_with(&mut rng, 2)).unwrap();
        let laws = DgpLaws { dgp: &dgp };
        let data = observed_law_dataset(&dgp).unwrap();
        for a in ArmPair::all() {
            let t = exact_truth(&dgp, a).unwrap().values;
            let g = evaluate_g_formula(&laws, a).unwrap().values;
            let wy = weighted_y_curve(&data, &laws, a, &o).unwrap().0;
            let wd = weighted_d_curve(&data, &laws, a, &o).unwrap().0;
            let (os, _) = one_step_curve(&data, &laws, a, &o).unwrap();
            for v in [&g, &wy, &wd, &os] {
                assert!(close(v, &t, TOL), "{:?} vs {:?}", v, t);
            }
        }
    }
}

fn zero_y(mut spec: DgpSpec) -> DgpSpec {
    spec.rules.push(Rule::new("Y", None, Law::Table { features: vec![], entries: vec![TableEntry { key: vec![], p: Some(0.0), probs: None }] }));
    spec
}

#[test]
fn no_events_means_zero_risk_and_zero_tables() {
    let dgp = Dgp::new(zero_y(two_period_dgp())).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    for a in ArmPair::all() {
        assert!(evaluate_g_formula(&laws, a).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(exact_truth(&dgp, a).unwrap().values.iter().all(|&v| v == 0.0));
        let ws = IfWorkspace::new(&laws, a, &EstimatorOptions::default()).unwrap();
        for s in 0..2 {
            assert_eq!(ws.nu(s).unwrap(), 0.0);
            for j in 1..=s + 1 {
                assert_eq!(ws.a(s, j, &vec![0; j]).unwrap(), 0.0);
                assert_eq!(ws.t(s, j, &vec![0; j - 1]).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn single_interval_recursion_base() {
    let mut spec = two_period_dgp();
    spec.horizon = 1;
    spec.rules.retain(|r| !r.var.starts_with("L:"));
    spec.schema = Schema::new(vec![Covariate::binary("L0", true, Block::D), Covariate::binary("L", false, Block::D)]);
    let dgp = Dgp::new(spec).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    for a in ArmPair::all() {
        let ws = IfWorkspace::new(&laws, a, &EstimatorOptions::default()).unwrap();
        let mut want = 0.0;
        for l0 in [0.0, 1.0] {
            let b = [l0];
            let h = HistView::new(&b, &[], 0);
            let p = laws.l_prob(0, a.z_d, HistView::EMPTY, Block::D, &b).unwrap();
            want += p * (1.0 - laws.d_hazard(1, a.z_d, h).unwrap()) * laws.y_hazard(1, a.z_y, h).unwrap();
        }
        assert!((ws.nu(0).unwrap() - want).abs() < 1e-15);
    }
}

#[test]
fn saturated_fit_on_exact_law_reproduces_truth() {
    let o = EstimatorOptions::default();
    let mut specs = vec![two_period_dgp()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    specs.extend((0..4).map(|_| random_k1_dgp(&mut rng)));
    for spec in specs {
        let dgp = Dgp::new(spec).unwrap();
        let data = observed_law_dataset(&dgp).unwrap();
        let nuis = fit_nuisance_set(&data, &correct_specs(), &EstimatorKind::all()).unwrap();
        for a in ArmPair::all() {
            let t = exact_truth(&dgp, a).unwrap().values;
            let plug = evaluate_g_formula(&nuis, a).unwrap().values;
            let (os, corr) = one_step_curve(&data, &nuis, a, &o).unwrap();
            assert!(close(&plug, &t, TOL));
            assert!(close(&os, &t, TOL));
            assert!(corr.iter().all(|c| c.abs() <= TOL));
        }
    }
}

#[test]
fn one_step_survives_a_wrong_covariate_law() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let data = observed_law_dataset(&dgp).unwrap();
    let nuis = fit_nuisance_set(&data, &misspecified_specs(&correct_specs()), &EstimatorKind::all()).unwrap();
    let correct = fit_nuisance_set(&data, &correct_specs(), &EstimatorKind::all()).unwrap();
    let o = EstimatorOptions::default();
    let mut worst: f64 = 0.0;
    for a in ArmPair::all() {
        let t = exact_truth(&dgp, a).unwrap().terminal();
        let plug = evaluate_g_formula(&nuis, a).unwrap().terminal();
        let os = *one_step_curve(&data, &nuis, a, &o).unwrap().0.last().unwrap();
        let wy = weighted_y_curve(&data, &nuis, a, &o).unwrap().0;
        let wy_correct = weighted_y_curve(&data, &correct, a, &o).unwrap().0;
        assert!((os - t).abs() < TOL, "{} one-step {} truth {}", a, os, t);
        assert_eq!(wy, wy_correct);
        worst = worst.max((plug - t).abs());
    }
    assert!(worst > 1e-3, "the marginal covariate law should bias the plug-in");
}

#[test]
fn one_step_survives_a_wrong_event_model() {
    // Correct D, L_D and (C, R); the Y hazard pooled over arms and histories.
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let data = observed_law_dataset(&dgp).unwrap();
    let mut specs = correct_specs();
    specs.push(ModelSpec { strata: Strata::Pooled, family: Family::Table, ..ModelSpec::new(ModelRole::Y, &["t"]) });
    let nuis = fit_nuisance_set(&data, &specs, &EstimatorKind::all()).unwrap();
    let o = EstimatorOptions::default();
    let mut worst: f64 = 0.0;
    for a in ArmPair::all() {
        let t = exact_truth(&dgp, a).unwrap().terminal();
        let os = *one_step_curve(&data, &nuis, a, &o).unwrap().0.last().unwrap();
        let wd = *weighted_d_curve(&data, &nuis, a, &o).unwrap().0.last().unwrap();
        assert!((os - t).abs() < TOL, "{} one-step {} truth {}", a, os, t);
        assert!((wd - t).abs() < TOL);
        worst = worst.max((evaluate_g_formula(&nuis, a).unwrap().terminal() - t).abs());
    }
    assert!(worst > 1e-2);
}

#[test]
fn equal_components_give_unit_ratio_weights() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    let data = observed_law_dataset(&dgp).unwrap();
    for z in [0u8, 1] {
        for route in [Route::Y, Route::D] {
            let wt = weight_trajectories(&data, &laws, ArmPair::new(z, z), route, &EstimatorOptions::default()).unwrap();
            for row in &wt.rows {
                for s in 0..row.w_cr.len() {
                    assert!((row.w_l[s] - 1.0).abs() < 1e-15);
                    if let Some(r) = row.w_ratio[s] {
                        // Route Y keeps the event-hazard factor, which is 1 too.
                        assert!((r - 1.0).abs() < 1e-15, "{}", r);
                    }
                }
            }
        }
    }
}

#[test]
fn non_adherence_zeroes_indicator_weights_from_then_on() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    let data = observed_law_dataset(&dgp).unwrap();
    let trajs = data.trajectories();
    let wt = weight_trajectories(&data, &laws, ArmPair::new(1, 0), Route::Y, &EstimatorOptions::default()).unwrap();
    let mut seen = 0;
    for row in &wt.rows {
        let tr = &trajs[row.record];
        for s in 0..row.w_cr.len() {
            let deviated = (1..=s + 1).any(|k| tr.r[k] == 0 || tr.c[k] == 1);
            assert_eq!(row.w_cr[s] == 0.0, deviated);
            if deviated {
                seen += 1;
            } else {
                assert!(row.w_cr[s] > 0.0 && row.w_l[s] > 0.0);
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn censored_at_first_interval_keeps_only_baseline_terms() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    let a = ArmPair::new(1, 1);
    let ws = IfWorkspace::new(&laws, a, &EstimatorOptions::default()).unwrap();
    let rec = IndividualRecord {
        id: "x".into(),
        z: 1,
        baseline: vec![1.0],
        history: vec![Interval { c: Some(1), ..Default::default() }, Interval::default()],
        weight: 1.0,
        arm: None,
    };
    let tr = Trajectory::from_record(&rec, 2);
    let got = influence_contribution(&tr, &ws).unwrap();
    // Only the j = 1 covariate-law deviations survive; L_0 = 1 is combo 1.
    let p_z = 0.5;
    let rr_ld = 1.0; // z_Y = z_D
    for s in 0..2 {
        let b = ws.b(s, 1, &[1]).unwrap();
        let c = ws.c(s, 1, &[], 1).unwrap();
        let t = ws.t(s, 1, &[]).unwrap();
        let want = rr_ld / p_z * (b - c) + 1.0 / p_z * (c - t);
        assert!((got[s] - want).abs() < 1e-14, "{} vs {}", got[s], want);
    }
}

#[test]
fn influence_function_has_mean_zero_under_the_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut dgps = vec![two_period_dgp()];
    dgps.extend((0..5).map(|_| random_k1_dgp(&mut rng)));
    for spec in dgps {
        let dgp = Dgp::new(spec).unwrap();
        let laws = DgpLaws { dgp: &dgp };
        let data = observed_law_dataset(&dgp).unwrap();
        for a in ArmPair::all() {
            let (_, corr) = one_step_curve(&data, &laws, a, &EstimatorOptions::default()).unwrap();
            assert!(corr.iter().all(|c| c.abs() < TOL), "{:?}", corr);
        }
    }
}

/// Arm (z, z), no covariates, everyone adherent and uncensored: every route
/// reduces to the empirical cumulative incidence of Y in arm z.
#[test]
fn collapsed_arm_is_cumulative_incidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let h = 3;
    let mut recs = Vec::new();
    for i in 0..400 {
        let z = (i % 2) as u8;
        let mut history = vec![Interval::default(); h];
        for k in 0..h {
            let d = rng.random_bool(0.1) as u8;
            let y = if d == 0 { rng.random_bool(0.15 + 0.1 * z as f64) as u8 } else { 0 };
            history[k] = Interval { c: Some(0), r: Some(1), d: Some(d), y: if d == 1 { None } else { Some(y) }, l: if k + 1 < h { Some(vec![]) } else { None } };
            if d == 1 || y == 1 {
                history[k].l = None;
                break;
            }
        }
        recs.push(IndividualRecord { id: format!("{:03}", i), z, baseline: vec![], history, weight: 1.0, arm: None });
    }
    let data = TrialDataset::new(Schema::new(vec![]), h, recs).unwrap();
    assert!(data.validate().is_empty());
    let specs = vec![
        ModelSpec::saturated(ModelRole::Y),
        ModelSpec::saturated(ModelRole::D),
        ModelSpec::saturated(ModelRole::C),
        ModelSpec::saturated(ModelRole::R),
    ];
    let nuis = fit_nuisance_set(&data, &specs, &EstimatorKind::all()).unwrap();
    let o = EstimatorOptions::default();
    for z in [0u8, 1] {
        let arm = ArmPair::new(z, z);
        let nz = data.individuals.iter().filter(|r| r.z == z).count() as f64;
        let mut want = vec![0.0; h];
        for r in data.individuals.iter().filter(|r| r.z == z) {
            if let Some(k) = r.history.iter().position(|iv| iv.y == Some(1)) {
                for w in want.iter_mut().skip(k) {
                    *w += 1.0 / nz;
                }
            }
        }
        let plug = evaluate_g_formula(&nuis, arm).unwrap().values;
        let wy = weighted_y_curve(&data, &nuis, arm, &o).unwrap().0;
        let wd = weighted_d_curve(&data, &nuis, arm, &o).unwrap().0;
        let (os, _) = one_step_curve(&data, &nuis, arm, &o).unwrap();
        for v in [&plug, &wy, &wd, &os] {
            assert!(close(v, &want, 1e-12), "{:?} vs {:?}", v, want);
        }
    }
}

#[test]
fn positivity_floor_raises_or_truncates() {
    let mut spec = two_period_dgp();
    // Adherence at interval 2 is possible but below the floor.
    spec.rules.push(Rule::new("R", Some(vec![2]), Law::Table { features: vec![], entries: vec![TableEntry { key: vec![], p: Some(1e-13), probs: None }] }));
    let dgp = Dgp::new(spec).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    let data = observed_law_dataset(&dgp).unwrap();
    let a = ArmPair::new(1, 1);
    let err = one_step_curve(&data, &laws, a, &EstimatorOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    let o = EstimatorOptions { truncate: true, ..Default::default() };
    assert!(one_step_curve(&data, &laws, a, &o).is_ok());
}
