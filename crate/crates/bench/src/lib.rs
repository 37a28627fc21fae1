//! Fixtures shared by the benchmarks: simulated trials and fitted nuisance
//! sets on the two built-in processes.

use sepeff::models::fit_nuisance_set;
use sepeff::sim::{correct_specs, long_follow_up_dgp, long_follow_up_specs, sample_trial, two_period_dgp, Dgp, SampleMode};
use sepeff::{EstimatorKind, ModelSpec, NuisanceSet, TrialDataset};

pub struct Fixture {
    pub data: TrialDataset,
    pub specs: Vec<ModelSpec>,
    pub kinds: Vec<EstimatorKind>,
    pub nuisance: NuisanceSet,
}

fn build(dgp: sepeff::DgpSpec, specs: Vec<ModelSpec>, kinds: &[EstimatorKind], n: usize) -> Fixture {
    let dgp = Dgp::new(dgp).expect("built-in process is valid");
    let data = sample_trial(&dgp, n, 1, SampleMode::TwoArm).expect("sampling succeeds");
    let nuisance = fit_nuisance_set(&data, &specs, kinds).expect("fit succeeds");
    Fixture { data, specs, kinds: kinds.to_vec(), nuisance }
}

/// Two follow-up intervals, saturated models.
pub fn two_period(n: usize) -> Fixture {
    build(two_period_dgp(), correct_specs(), &EstimatorKind::all(), n)
}

/// Thirty intervals, pooled logistic models. The specs carry no covariate
/// laws, so only the weighted-Y estimator applies.
pub fn long_follow_up(n: usize) -> Fixture {
    build(long_follow_up_dgp(), long_follow_up_specs(), &[EstimatorKind::WeightedY], n)
}
