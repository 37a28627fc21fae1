//! Nonparametric bootstrap over individuals and separable-effect contrasts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ArmPair, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, EstimatorKind, EstimatorOptions, estimate_with, spec_fingerprint};
use crate::models::{ModelSpec, fit_nuisance_set};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { draws: 200, level: 0.95, seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::Config("bootstrap needs at least 2 draws".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Statistic on the original data.
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Draws where the statistic failed; excluded from the intervals.
    pub failures: usize,
    /// Coordinates whose interval excludes the point estimate.
    pub excluded: Vec<usize>,
    #[serde(skip)]
    pub replicates: Vec<Vec<f64>>,
}

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Multiplicity-weighted copy of `data` for bootstrap draw `b`. Identical
/// records are collapsed first, so the result carries one row per distinct
/// pattern drawn.
pub fn resample(collapsed: &TrialDataset, map: &[usize], unit_weights: &[f64], seed: u64, b: usize) -> TrialDataset {
    let mut rng = stream(seed, &[b as u64]);
    let n = map.len();
    let mut w = vec![0.0; collapsed.individuals.len()];
    for _ in 0..n {
        let i = rng.random_range(0..n);
        w[map[i]] += unit_weights[i];
    }
    collapsed.reweighted(&w)
}

/// Percentile intervals for a vector-valued statistic, resampling whole
/// individuals. More than 20% failed draws is an error.
pub fn bootstrap_ci<F>(data: &TrialDataset, stat: &F, cfg: &BootstrapConfig) -> Result<BootstrapResult>
where
    F: Fn(&TrialDataset) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let estimate = stat(data)?;
    let (collapsed, map) = data.collapse();
    let unit: Vec<f64> = data.individuals.iter().map(|r| r.weight).collect();
    let draws: Vec<Option<Vec<f64>>> = (0..cfg.draws)
        .into_par_iter()
        .map(|b| {
            let ds = resample(&collapsed, &map, &unit, cfg.seed, b);
            stat(&ds).ok().filter(|v| v.len() == estimate.len() && v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let replicates: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failures = cfg.draws - replicates.len();
    if failures as f64 > 0.2 * cfg.draws as f64 {
        return Err(Error::Positivity(format!("{} of {} bootstrap draws failed", failures, cfg.draws)));
    }
    let alpha = (1.0 - cfg.level) / 2.0;
    let mut lower = Vec::with_capacity(estimate.len());
    let mut upper = Vec::with_capacity(estimate.len());
    let mut excluded = Vec::new();
    for i in 0..estimate.len() {
        let mut col: Vec<f64> = replicates.iter().map(|v| v[i]).collect();
        col.sort_by(|a, b| a.total_cmp(b));
        let lo = quantile_type7(&col, alpha);
        let hi = quantile_type7(&col, 1.0 - alpha);
        if estimate[i] < lo || estimate[i] > hi {
            excluded.push(i);
        }
        lower.push(lo);
        upper.push(hi);
    }
    Ok(BootstrapResult { estimate, lower, upper, failures, excluded, replicates })
}

// ---------------------------------------------------------------- contrasts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum EffectKind {
    /// Z_Y set to 1 versus 0 with Z_D held at `z_d`.
    ZY { z_d: u8 },
    /// Z_D set to 1 versus 0 with Z_Y held at `z_y`.
    ZD { z_y: u8 },
}

impl EffectKind {
    /// The (treated, reference) arms of the contrast.
    pub fn arms(self) -> (ArmPair, ArmPair) {
        match self {
            EffectKind::ZY { z_d } => (ArmPair::new(1, z_d), ArmPair::new(0, z_d)),
            EffectKind::ZD { z_y } => (ArmPair::new(z_y, 1), ArmPair::new(z_y, 0)),
        }
    }

    pub fn label(self) -> String {
        match self {
            EffectKind::ZY { z_d } => format!("Z_Y effect at z_D = {}", z_d),
            EffectKind::ZD { z_y } => format!("Z_D effect at z_Y = {}", z_y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub effect: EffectKind,
    pub scale: String,
    pub estimator: EstimatorKind,
    pub estimate: f64,
    pub curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub treated: EstimateReport,
    pub reference: EstimateReport,
}

/// Additive contrast of two arm reports, `a` minus `b`.
pub fn separable_effect_contrast(a: &EstimateReport, b: &EstimateReport, kind: EffectKind) -> Result<ContrastReport> {
    let (ta, tb) = kind.arms();
    if a.arm != ta || b.arm != tb {
        return Err(Error::Config(format!("{} needs arms {} and {}, got {} and {}", kind.label(), ta, tb, a.arm, b.arm)));
    }
    if a.estimator != b.estimator || a.curve.len() != b.curve.len() {
        return Err(Error::Config("contrasted reports differ in estimator or horizon".into()));
    }
    let curve: Vec<f64> = a.curve.iter().zip(&b.curve).map(|(x, y)| x - y).collect();
    Ok(ContrastReport {
        effect: kind,
        scale: "risk difference".into(),
        estimator: a.estimator,
        estimate: a.terminal - b.terminal,
        curve,
        lower: None,
        upper: None,
        warnings: vec![],
        treated: a.clone(),
        reference: b.clone(),
    })
}

/// Every arm report plus the contrast, with percentile intervals from the
/// same resamples for all of them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointAnalysis {
    pub reports: Vec<EstimateReport>,
    pub contrast: ContrastReport,
    pub failures: usize,
}

/// Estimate all four arms with one estimator and contrast two of them.
/// Arm curves and the contrast share bootstrap draws.
pub fn analyze_with_bootstrap(data: &TrialDataset, specs: &[ModelSpec], estimator: EstimatorKind, kind: EffectKind, cfg: &BootstrapConfig) -> Result<JointAnalysis> {
    let arms = ArmPair::all();
    let opts = EstimatorOptions::default();
    let fp = spec_fingerprint(specs);
    let h = data.horizon;
    let stat = |ds: &TrialDataset| -> Result<Vec<f64>> {
        let nuis = fit_nuisance_set(ds, specs, &[estimator])?;
        let mut out = Vec::with_capacity(4 * h + 1);
        let mut term = [0.0; 4];
        for (i, &a) in arms.iter().enumerate() {
            let r = estimate_with(ds, &nuis, a, estimator, &fp, &opts)?;
            term[i] = r.terminal;
            out.extend(r.curve);
        }
        let (ta, tb) = kind.arms();
        let ia = arms.iter().position(|&x| x == ta).unwrap();
        let ib = arms.iter().position(|&x| x == tb).unwrap();
        out.push(term[ia] - term[ib]);
        Ok(out)
    };
    let boot = bootstrap_ci(data, &stat, cfg)?;
    let nuis = fit_nuisance_set(data, specs, &[estimator])?;
    let mut reports = Vec::new();
    for (i, &a) in arms.iter().enumerate() {
        let mut r = estimate_with(data, &nuis, a, estimator, &fp, &opts)?;
        r.lower = Some(boot.lower[i * h..(i + 1) * h].to_vec());
        r.upper = Some(boot.upper[i * h..(i + 1) * h].to_vec());
        if boot.failures > 0 {
            r.diagnostics.warnings.push(format!("{} bootstrap draws failed", boot.failures));
        }
        reports.push(r);
    }
    let (ta, tb) = kind.arms();
    let ra = reports.iter().find(|r| r.arm == ta).unwrap();
    let rb = reports.iter().find(|r| r.arm == tb).unwrap();
    let mut contrast = separable_effect_contrast(ra, rb, kind)?;
    contrast.lower = Some(boot.lower[4 * h]);
    contrast.upper = Some(boot.upper[4 * h]);
    if boot.excluded.contains(&(4 * h)) {
        contrast.warnings.push("percentile interval excludes the point estimate".into());
    }
    Ok(JointAnalysis { reports, contrast, failures: boot.failures })
}

fn arm_label(a: ArmPair) -> String {
    format!("(z_Y, z_D) = ({}, {})", a.z_y, a.z_d)
}

/// Four arm rows and a final causal-effect row: label, estimate, lower, upper.
pub fn summary_csv(reports: &[EstimateReport], contrast: &ContrastReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["row", "estimate", "lower", "upper"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_default();
    for r in reports {
        let lo = r.lower.as_ref().and_then(|v| v.last().copied());
        let hi = r.upper.as_ref().and_then(|v| v.last().copied());
        w.write_record([arm_label(r.arm), fmt(Some(r.terminal)), fmt(lo), fmt(hi)])?;
    }
    w.write_record(["Causal effect".to_string(), fmt(Some(contrast.estimate)), fmt(contrast.lower), fmt(contrast.upper)])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Tidy risk-by-time rows: arm, k, risk, lower, upper.
pub fn curves_csv(reports: &[EstimateReport]) -> Result<String> {
    if let Some(first) = reports.first() {
        if reports.iter().any(|r| r.curve.len() != first.curve.len()) {
            return Err(Error::Config("reports differ in horizon".into()));
        }
    }
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["arm", "estimator", "k", "risk", "lower", "upper"])?;
    for r in reports {
        for (i, v) in r.curve.iter().enumerate() {
            let lo = r.lower.as_ref().map(|x| format!("{:.10}", x[i])).unwrap_or_default();
            let hi = r.upper.as_ref().map(|x| format!("{:.10}", x[i])).unwrap_or_default();
            w.write_record([r.arm.to_string(), r.estimator.to_string(), (i + 1).to_string(), format!("{:.10}", v), lo, hi])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
