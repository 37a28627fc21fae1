//! Finite-sample behaviour of the estimators on simulated trials.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepeff::data::{decode_treatment_centered, encode_strategy_centered, read_treatment_centered_csv, write_treatment_centered_csv};
use sepeff::estimators::{estimate_many, influence_contribution, weight_trajectories, IfWorkspace, Route};
use sepeff::models::fit_nuisance_set;
use sepeff::sim::{two_period_dgp, correct_specs, exact_truth, misspecified_specs, observed_law_dataset, random_k1_dgp, sample_trial, Dgp, DgpLaws, SampleMode};
use sepeff::{ArmPair, EstimatorKind, EstimatorOptions, LawSet, TrialDataset};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Terminal ν¹ per individual (summed over times).
fn terminal_if(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair) -> Vec<f64> {
    let ws = IfWorkspace::new(laws, arm, &EstimatorOptions::default()).unwrap();
    data.trajectories().iter().map(|tr| influence_contribution(tr, &ws).unwrap().iter().sum()).collect()
}

/// Standard error of a weighted estimator from its per-individual terms.
fn weighted_se(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair, route: Route) -> f64 {
    let wt = weight_trajectories(data, laws, arm, route, &EstimatorOptions::default()).unwrap();
    let x: Vec<f64> = wt.rows.iter().map(|r| (0..wt.horizon).map(|s| r.contribution(s)).sum()).collect();
    mean_sd(&x).1 / (x.len() as f64).sqrt()
}

#[test]
fn large_samples_land_near_the_truth() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let data = sample_trial(&dgp, 200_000, 101, SampleMode::TwoArm).unwrap();
    let nuis = fit_nuisance_set(&data, &correct_specs(), &EstimatorKind::all()).unwrap();
    let reports = estimate_many(&data, &correct_specs(), &ArmPair::all(), &EstimatorKind::all(), &EstimatorOptions::default()).unwrap();
    for arm in ArmPair::all() {
        let truth = exact_truth(&dgp, arm).unwrap().terminal();
        let if_se = mean_sd(&terminal_if(&data, &nuis, arm)).1 / (data.len() as f64).sqrt();
        let se_y = weighted_se(&data, &nuis, arm, Route::Y);
        let se_d = weighted_se(&data, &nuis, arm, Route::D);
        let get = |k| reports.iter().find(|r| r.arm == arm && r.estimator == k).unwrap().terminal;
        for (k, se) in [(EstimatorKind::PlugIn, if_se), (EstimatorKind::OneStep, if_se), (EstimatorKind::WeightedY, se_y), (EstimatorKind::WeightedD, se_d)] {
            assert!((get(k) - truth).abs() <= 3.0 * se, "{} {}: {} vs {} (se {})", arm, k, get(k), truth, se);
        }
        let (y, d) = (get(EstimatorKind::WeightedY), get(EstimatorKind::WeightedD));
        assert!((y - d).abs() <= 3.0 * (se_y * se_y + se_d * se_d).sqrt(), "{}: {} vs {}", arm, y, d);
    }
}

#[test]
fn influence_function_sample_mean_is_near_zero() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let data = sample_trial(&dgp, 200_000, 102, SampleMode::TwoArm).unwrap();
    let laws = DgpLaws { dgp: &dgp };
    for arm in ArmPair::all() {
        let v = terminal_if(&data, &laws, arm);
        let (m, sd) = mean_sd(&v);
        let se = sd / (v.len() as f64).sqrt();
        assert!(m.abs() <= 4.0 * se, "{}: mean {} se {}", arm, m, se);
    }
}

#[test]
fn saturated_fit_solves_its_own_score_equation() {
    let data = sample_trial(&Dgp::new(two_period_dgp()).unwrap(), 20_000, 103, SampleMode::TwoArm).unwrap();
    let reports = estimate_many(&data, &correct_specs(), &ArmPair::all(), &[EstimatorKind::PlugIn, EstimatorKind::OneStep], &EstimatorOptions::default()).unwrap();
    for pair in reports.chunks(2) {
        let corr = pair[1].diagnostics.correction.as_ref().unwrap();
        assert!(corr.iter().all(|c| c.abs() < 1e-10), "{:?}", corr);
        assert!((pair[0].terminal - pair[1].terminal).abs() < 1e-10);
    }
}

#[test]
fn misspecified_covariate_law_biases_only_the_plug_in() {
    let dgp = Dgp::new(two_period_dgp()).unwrap();
    let mis = misspecified_specs(&correct_specs());
    let kinds = [EstimatorKind::PlugIn, EstimatorKind::OneStep];
    // Population limits first: the bias is a property of the model, not of noise.
    let pop = observed_law_dataset(&dgp).unwrap();
    let limits = estimate_many(&pop, &mis, &ArmPair::all(), &kinds, &EstimatorOptions::default()).unwrap();
    for pair in limits.chunks(2) {
        let truth = exact_truth(&dgp, pair[0].arm).unwrap().terminal();
        assert!((pair[0].terminal - truth).abs() > 3e-3, "{}", pair[0].arm);
        assert!((pair[1].terminal - truth).abs() < 1e-10);
    }
    let reps = 400;
    let mut est = vec![vec![Vec::new(); 4]; 2];
    for r in 0..reps {
        let data = sample_trial(&dgp, 10_000, 1_000 + r, SampleMode::TwoArm).unwrap();
        let out = estimate_many(&data, &mis, &ArmPair::all(), &kinds, &EstimatorOptions::default()).unwrap();
        for (i, rep) in out.iter().enumerate() {
            est[i % 2][i / 2].push(rep.terminal);
        }
    }
    for (a, arm) in ArmPair::all().iter().enumerate() {
        let truth = exact_truth(&dgp, *arm).unwrap().terminal();
        let (m, sd) = mean_sd(&est[0][a]);
        let se = sd / (reps as f64).sqrt();
        assert!((m - truth).abs() > 5.0 * se, "plug-in {}: {} vs {} (se {})", arm, m, truth, se);
        let (m, sd) = mean_sd(&est[1][a]);
        let se = sd / (reps as f64).sqrt();
        assert!((m - truth).abs() <= 3.0 * se, "one-step {}: {} vs {} (se {})", arm, m, truth, se);
    }
}

#[test]
fn weighted_y_does_not_see_the_covariate_law() {
    let data = sample_trial(&Dgp::new(two_period_dgp()).unwrap(), 5_000, 104, SampleMode::TwoArm).unwrap();
    let opts = EstimatorOptions::default();
    let kinds = [EstimatorKind::WeightedY];
    let good = estimate_many(&data, &correct_specs(), &ArmPair::all(), &kinds, &opts).unwrap();
    let bad = estimate_many(&data, &misspecified_specs(&correct_specs()), &ArmPair::all(), &kinds, &opts).unwrap();
    for (g, b) in good.iter().zip(&bad) {
        assert_eq!(g.curve, b.curve);
    }
}

#[test]
fn both_encodings_give_identical_estimates() {
    let data = sample_trial(&Dgp::new(two_period_dgp()).unwrap(), 3_000, 105, SampleMode::TwoArm).unwrap();
    let mut buf = Vec::new();
    write_treatment_centered_csv(&decode_treatment_centered(&data), &data.schema, &mut buf).unwrap();
    let (h, tc) = read_treatment_centered_csv(buf.as_slice(), &data.schema).unwrap();
    let encoded = encode_strategy_centered(&tc, &data.schema, h).unwrap();
    let opts = EstimatorOptions::default();
    let a = estimate_many(&data, &correct_specs(), &ArmPair::all(), &EstimatorKind::all(), &opts).unwrap();
    let b = estimate_many(&encoded, &correct_specs(), &ArmPair::all(), &EstimatorKind::all(), &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.curve.iter().zip(&y.curve).all(|(p, q)| (p - q).abs() <= 1e-12), "{} {}", x.arm, x.estimator);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn risk_curves_are_monotone_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dgp = Dgp::new(random_k1_dgp(&mut rng)).unwrap();
        let data = sample_trial(&dgp, 4_000, seed, SampleMode::TwoArm).unwrap();
        let kinds = [EstimatorKind::PlugIn, EstimatorKind::WeightedY, EstimatorKind::WeightedD];
        // Sparse samples can leave a conditioning cell empty; that is a
        // positivity error, not a curve.
        if let Ok(reports) = estimate_many(&data, &correct_specs(), &ArmPair::all(), &kinds, &EstimatorOptions::default()) {
            for r in reports {
                prop_assert!(r.curve[0] >= 0.0);
                prop_assert!(r.curve.windows(2).all(|w| w[1] >= w[0]));
                if r.estimator == EstimatorKind::PlugIn {
                    prop_assert!(*r.curve.last().unwrap() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn collapsed_arms_have_unit_ratio_weights(seed in any::<u64>(), z in 0u8..2) {
        let dgp = Dgp::new(two_period_dgp()).unwrap();
        let data = sample_trial(&dgp, 1_000, seed, SampleMode::TwoArm).unwrap();
        let nuis = fit_nuisance_set(&data, &correct_specs(), &EstimatorKind::all()).unwrap();
        for route in [Route::Y, Route::D] {
            let wt = weight_trajectories(&data, &nuis, ArmPair::new(z, z), route, &EstimatorOptions::default()).unwrap();
            for row in &wt.rows {
                prop_assert!(row.w_ratio.iter().flatten().all(|w| (w - 1.0).abs() < 1e-12));
                prop_assert!(row.w_l.iter().all(|w| (w - 1.0).abs() < 1e-12));
            }
        }
    }
}
