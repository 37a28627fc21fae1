use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sepeff::estimators::{estimate_with, evaluate_g_formula, influence_contribution, weight_trajectories, IfWorkspace, Route};
use sepeff::inference::bootstrap_ci;
use sepeff::models::fit_nuisance_set;
use sepeff::sim::{exact_truth, long_follow_up_dgp, Dgp};
use sepeff::{ArmPair, BootstrapConfig, EstimatorKind, EstimatorOptions, TrialDataset};
use sepeff_bench::{long_follow_up, two_period};

const ARM: ArmPair = ArmPair::new(1, 0);

fn fitting(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    for (name, fx) in [("two_period", two_period(20_000)), ("long_follow_up", long_follow_up(5_000))] {
        g.bench_function(name, |b| b.iter(|| fit_nuisance_set(&fx.data, &fx.specs, &fx.kinds).unwrap()));
    }
    g.finish();
}

fn estimators(c: &mut Criterion) {
    let opts = EstimatorOptions::default();
    let fx = long_follow_up(5_000);
    let mut g = c.benchmark_group("estimate_long_follow_up");
    g.sample_size(10);
    for kind in fx.kinds.clone() {
        g.bench_with_input(BenchmarkId::from_parameter(kind), &kind, |b, &k| b.iter(|| estimate_with(&fx.data, &fx.nuisance, ARM, k, "", &opts).unwrap()));
    }
    g.finish();

    let fx = two_period(20_000);
    let mut g = c.benchmark_group("pieces_two_period");
    g.bench_function("g_formula", |b| b.iter(|| evaluate_g_formula(&fx.nuisance, ARM).unwrap()));
    g.bench_function("weights_route_y", |b| b.iter(|| weight_trajectories(&fx.data, &fx.nuisance, ARM, Route::Y, &opts).unwrap()));
    let trajectories = fx.data.trajectories();
    g.bench_function("influence_function", |b| {
        b.iter(|| {
            let ws = IfWorkspace::new(&fx.nuisance, ARM, &opts).unwrap();
            trajectories.iter().map(|t| influence_contribution(t, &ws).unwrap().iter().sum::<f64>()).sum::<f64>()
        })
    });
    g.finish();
}

fn truth_and_bootstrap(c: &mut Criterion) {
    let dgp = Dgp::new(long_follow_up_dgp()).unwrap();
    c.bench_function("exact_truth_long_follow_up", |b| b.iter(|| exact_truth(&dgp, ARM).unwrap()));
    let fx = two_period(2_000);
    let cfg = BootstrapConfig { draws: 50, level: 0.95, seed: 0 };
    let opts = EstimatorOptions::default();
    let stat = |ds: &TrialDataset| -> sepeff::Result<Vec<f64>> {
        let nuis = fit_nuisance_set(ds, &fx.specs, &[EstimatorKind::WeightedY])?;
        Ok(estimate_with(ds, &nuis, ARM, EstimatorKind::WeightedY, "", &opts)?.curve)
    };
    let mut g = c.benchmark_group("bootstrap");
    g.sample_size(10);
    g.bench_function("weighted_y_50_draws", |b| b.iter(|| bootstrap_ci(&fx.data, &stat, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, fitting, estimators, truth_and_bootstrap);
criterion_main!(benches);
