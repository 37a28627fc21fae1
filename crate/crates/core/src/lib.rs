//! Sustained separable effects in discrete-time data with competing events,
//! censoring and treatment adherence.

pub mod data;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod inference;
pub mod laws;
pub mod models;
pub mod rng;
pub mod sim;

pub use data::{ArmPair, Block, CovKind, Covariate, IndividualRecord, Interval, Schema, TrialDataset};
pub use error::{Error, Result, Violation};
pub use estimators::{EstimateReport, EstimatorKind, EstimatorOptions, RiskCurve};
pub use laws::LawSet;
pub use models::{ModelRole, ModelSpec, NuisanceSet};
pub use inference::{BootstrapConfig, ContrastReport, EffectKind};
pub use sim::{Dgp, DgpSpec, Scenario};
