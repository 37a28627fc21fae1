//! Rule-based data-generating processes: sampling, exact observed-data
//! laws, ground truth by enumeration, and the coverage experiment.
//!
//! A [`DgpSpec`] lists one probability rule per variable. Each rule is a
//! lookup table or a logistic formula over named features of the realized
//! history:
//!
//! | feature | value |
//! |---|---|
//! | `z_y`, `z_d` | component assignment (both equal Z in a two-arm trial) |
//! | `z` | Z (Z_Y in a four-arm trial) |
//! | `r` | current R_k for D, Y, L; previous R_{k-1} for C, R (R_0 = 1) |
//! | `z_y_eq_r`, `z_d_eq_r` | I(Z_Y = R), I(Z_D = R) |
//! | `t` | time index of the variable |
//! | `l0`, `l0:<name>` | a baseline covariate |
//! | `l_prev`, `l_prev:<name>` | most recent covariate vector (L_0 before any follow-up) |
//! | `cur:<name>` | an earlier covariate of the vector being drawn |
//!
//! When several rules match a variable and time, the last one wins.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ArmPair, Block, Covariate, HistView, IndividualRecord, Interval, Schema, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorOptions, RiskCurve, estimate_with, spec_fingerprint};
use crate::inference::{BootstrapConfig, bootstrap_ci};
use crate::laws::LawSet;
use crate::models::{Family, ModelRole, ModelSpec, RiskSetKind, Strata, fit_nuisance_set, saturated_specs};
use crate::rng::{derive_seed, stream};

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    #[default]
    TwoArm,
    FourArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub key: Vec<f64>,
    /// P(X = 1) for binary targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Level probabilities for categorical targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    Table { features: Vec<String>, entries: Vec<TableEntry> },
    Logit { intercept: f64, #[serde(default)] coefs: BTreeMap<String, f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// `C`, `R`, `D`, `Y`, `L:<name>` (time-varying) or `L0:<name>` (baseline).
    pub var: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<usize>>,
    pub law: Law,
}

impl Rule {
    pub fn new(var: &str, times: Option<Vec<usize>>, law: Law) -> Self {
        Rule { var: var.to_string(), times, law }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Number of follow-up intervals, K + 1.
    pub horizon: usize,
    pub schema: Schema,
    /// P(Z = 1) in two-arm sampling.
    #[serde(default = "half")]
    pub p_z: f64,
    #[serde(default = "half")]
    pub p_zy: f64,
    #[serde(default = "half")]
    pub p_zd: f64,
    pub rules: Vec<Rule>,
}

// ---------------------------------------------------------------- compilation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    C,
    R,
    D,
    Y,
    /// Position in the time-varying vector.
    L(usize),
    /// Position in the baseline vector.
    L0(usize),
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Zy,
    Zd,
    Z,
    R,
    ZyEqR,
    ZdEqR,
    T,
    Base(usize),
    /// (time-varying position, baseline position used before follow-up).
    Prev(Option<usize>, Option<usize>),
    Cur(usize),
}

#[derive(Debug, Clone)]
enum CLaw {
    Table { features: Vec<Feature>, entries: Vec<(Vec<f64>, Vec<f64>)> },
    Logit { intercept: f64, coefs: Vec<(Feature, f64)> },
}

#[derive(Debug, Clone)]
struct CRule {
    target: Target,
    times: Option<Vec<usize>>,
    law: CLaw,
    levels: usize,
}

/// Validated spec with parsed features.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    rules: Vec<CRule>,
}

struct Ctx<'a> {
    z_y: u8,
    z_d: u8,
    z: u8,
    r: u8,
    t: usize,
    base: &'a [f64],
    hist: HistView<'a>,
    cur: &'a [f64],
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Dgp> {
        let schema = &spec.schema;
        if spec.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        for p in [spec.p_z, spec.p_zy, spec.p_zd] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("arm probability {} outside [0, 1]", p)));
            }
        }
        let base = schema.base_idx();
        let tv = schema.tv_idx();
        let mut rules = Vec::new();
        for rule in &spec.rules {
            let target = match rule.var.as_str() {
                "C" => Target::C,
                "R" => Target::R,
                "D" => Target::D,
                "Y" => Target::Y,
                v => {
                    let (kind, name) = v.split_once(':').ok_or_else(|| Error::Config(format!("unknown rule variable `{}`", v)))?;
                    let (list, time_varying) = match kind {
                        "L" => (&tv, true),
                        "L0" => (&base, false),
                        _ => return Err(Error::Config(format!("unknown rule variable `{}`", v))),
                    };
                    let pos = list
                        .iter()
                        .position(|&i| schema.covariates[i].name == name)
                        .ok_or_else(|| Error::Config(format!("rule variable `{}` names no such covariate", v)))?;
                    if time_varying {
                        Target::L(pos)
                    } else {
                        Target::L0(pos)
                    }
                }
            };
            let levels = match target {
                Target::L(p) => level_count(&schema.covariates[tv[p]])?,
                Target::L0(p) => level_count(&schema.covariates[base[p]])?,
                _ => 2,
            };
            let law = match &rule.law {
                Law::Table { features, entries } => {
                    let features = features.iter().map(|f| parse_feature(f, schema, target)).collect::<Result<Vec<_>>>()?;
                    let mut out = Vec::new();
                    for e in entries {
                        if e.key.len() != features.len() {
                            return Err(Error::Config(format!("rule {}: key {:?} has the wrong length", rule.var, e.key)));
                        }
                        let probs = match (&e.p, &e.probs) {
                            (Some(p), None) if levels == 2 => vec![1.0 - p, *p],
                            (None, Some(ps)) if ps.len() == levels => ps.clone(),
                            _ => return Err(Error::Config(format!("rule {}: entry {:?} needs `p` (binary) or {} `probs`", rule.var, e.key, levels))),
                        };
                        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                            return Err(Error::Config(format!("rule {}: entry {:?} is not a distribution", rule.var, e.key)));
                        }
                        out.push((e.key.clone(), probs));
                    }
                    CLaw::Table { features, entries: out }
                }
                Law::Logit { intercept, coefs } => {
                    if levels != 2 {
                        return Err(Error::Config(format!("rule {}: logistic rules need a binary target", rule.var)));
                    }
                    let coefs = coefs.iter().map(|(f, b)| Ok((parse_feature(f, schema, target)?, *b))).collect::<Result<Vec<_>>>()?;
                    CLaw::Logit { intercept: *intercept, coefs }
                }
            };
            rules.push(CRule { target, times: rule.times.clone(), law, levels });
        }
        let dgp = Dgp { spec, rules };
        // Every required variable has a rule at every time.
        let h = dgp.spec.horizon;
        for k in 1..=h {
            for tg in [Target::D, Target::Y] {
                dgp.rule(tg, k)?;
            }
            if k < h {
                for p in 0..tv.len() {
                    dgp.rule(Target::L(p), k)?;
                }
            }
        }
        for p in 0..base.len() {
            dgp.rule(Target::L0(p), 0)?;
        }
        Ok(dgp)
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn schema(&self) -> &Schema {
        &self.spec.schema
    }

    fn rule(&self, target: Target, t: usize) -> Result<&CRule> {
        self.find(target, t).ok_or_else(|| Error::Config(format!("no rule for {:?} at time {}", target, t)))
    }

    fn find(&self, target: Target, t: usize) -> Option<&CRule> {
        self.rules.iter().rev().find(|r| r.target == target && r.times.as_ref().is_none_or(|ts| ts.contains(&t)))
    }

    fn feature(&self, f: Feature, c: &Ctx) -> Result<f64> {
        let eq = |a: u8| if a == c.r { 1.0 } else { 0.0 };
        Ok(match f {
            Feature::Zy => c.z_y as f64,
            Feature::Zd => c.z_d as f64,
            Feature::Z => c.z as f64,
            Feature::R => c.r as f64,
            Feature::ZyEqR => eq(c.z_y),
            Feature::ZdEqR => eq(c.z_d),
            Feature::T => c.t as f64,
            Feature::Base(p) => *c.base.get(p).ok_or_else(|| Error::Config("baseline feature used before the baseline is drawn".into()))?,
            Feature::Prev(tvp, bp) => {
                if c.hist.len == 0 {
                    match bp {
                        Some(p) => *c.base.get(p).ok_or_else(|| Error::Config("l_prev used before the baseline is drawn".into()))?,
                        None => 0.0,
                    }
                } else {
                    c.hist.last()[tvp.unwrap_or(0)]
                }
            }
            Feature::Cur(p) => *c.cur.get(p).ok_or_else(|| Error::Config("cur feature beyond the vector".into()))?,
        })
    }

    /// Distribution over the target's levels.
    fn dist(&self, target: Target, c: &Ctx) -> Result<Vec<f64>> {
        let rule = match self.find(target, c.t) {
            Some(r) => r,
            None => {
                return match target {
                    Target::C => Ok(vec![1.0, 0.0]),
                    Target::R => Ok(vec![0.0, 1.0]),
                    _ => Err(Error::Config(format!("no rule for {:?} at time {}", target, c.t))),
                };
            }
        };
        match &rule.law {
            CLaw::Table { features, entries } => {
                let key = features.iter().map(|&f| self.feature(f, c)).collect::<Result<Vec<_>>>()?;
                entries
                    .iter()
                    .rev()
                    .find(|(k, _)| *k == key)
                    .map(|(_, p)| p.clone())
                    .ok_or_else(|| Error::Config(format!("rule for {:?} at time {} has no entry for key {:?}", target, c.t, key)))
            }
            CLaw::Logit { intercept, coefs } => {
                let mut eta = *intercept;
                for &(f, b) in coefs {
                    eta += b * self.feature(f, c)?;
                }
                let p = 1.0 / (1.0 + (-eta).exp());
                debug_assert_eq!(rule.levels, 2);
                Ok(vec![1.0 - p, p])
            }
        }
    }

    fn p1(&self, target: Target, c: &Ctx) -> Result<f64> {
        Ok(self.dist(target, c)?[1])
    }
}

fn level_count(c: &Covariate) -> Result<usize> {
    c.n_levels().map(|n| n as usize).ok_or_else(|| Error::Unsupported(format!("continuous covariate {} in a generating process", c.name)))
}

fn parse_feature(f: &str, schema: &Schema, target: Target) -> Result<Feature> {
    let base = schema.base_idx();
    let tv = schema.tv_idx();
    let bpos = |name: &str| base.iter().position(|&i| schema.covariates[i].name == name);
    let tpos = |name: &str| tv.iter().position(|&i| schema.covariates[i].name == name);
    let (head, name) = match f.split_once(':') {
        Some((h, n)) => (h, Some(n)),
        None => (f, None),
    };
    let bad = || Error::Config(format!("unknown feature `{}`", f));
    Ok(match (head, name) {
        ("z_y", None) => Feature::Zy,
        ("z_d", None) => Feature::Zd,
        ("z", None) => Feature::Z,
        ("r", None) => Feature::R,
        ("z_y_eq_r", None) => Feature::ZyEqR,
        ("z_d_eq_r", None) => Feature::ZdEqR,
        ("t", None) => Feature::T,
        ("l0", None) => {
            if base.is_empty() {
                return Err(bad());
            }
            Feature::Base(0)
        }
        ("l0", Some(n)) => Feature::Base(bpos(n).ok_or_else(bad)?),
        ("l_prev", None) => Feature::Prev(Some(0), if base.is_empty() { None } else { Some(0) }),
        ("l_prev", Some(n)) => {
            let t = tpos(n);
            let b = bpos(n);
            if t.is_none() && b.is_none() {
                return Err(bad());
            }
            Feature::Prev(t, b)
        }
        ("cur", Some(n)) => {
            let p = match target {
                Target::L(_) => tpos(n),
                Target::L0(_) => bpos(n),
                _ => None,
            };
            Feature::Cur(p.ok_or_else(bad)?)
        }
        _ => return Err(bad()),
    })
}

// ---------------------------------------------------------------- sampling

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_vector(dgp: &Dgp, rng: &mut ChaCha8Rng, t: usize, ctx: impl Fn(&[f64]) -> (u8, u8, u8, u8), hist: HistView, base: &[f64]) -> Result<Vec<f64>> {
    let schema = dgp.schema();
    let n = schema.covs_at(t).len();
    let mut cur = vec![0.0; n];
    for pos in schema.order_at(t) {
        let (z_y, z_d, z, r) = ctx(&cur);
        let target = if t == 0 { Target::L0(pos) } else { Target::L(pos) };
        let c = Ctx { z_y, z_d, z, r, t, base: if t == 0 { &cur } else { base }, hist, cur: &cur };
        let probs = dgp.dist(target, &c)?;
        cur[pos] = draw(rng, &probs) as f64;
    }
    Ok(cur)
}

fn sample_one(dgp: &Dgp, rng: &mut ChaCha8Rng, id: String, mode: SampleMode) -> Result<IndividualRecord> {
    let sp = &dgp.spec;
    let h = sp.horizon;
    let (z_y, z_d, z) = match mode {
        SampleMode::TwoArm => {
            let z = rng.random_bool(sp.p_z) as u8;
            (z, z, z)
        }
        SampleMode::FourArm => {
            let zy = rng.random_bool(sp.p_zy) as u8;
            let zd = rng.random_bool(sp.p_zd) as u8;
            (zy, zd, zy)
        }
    };
    let baseline = draw_vector(dgp, rng, 0, |_| (z_y, z_d, z, 1), HistView::EMPTY, &[])?;
    let mut tv: Vec<f64> = Vec::new();
    let mut history = vec![Interval::default(); h];
    let mut r_prev = 1u8;
    for k in 1..=h {
        let len = k - 1;
        let hist = HistView::new(&baseline, &tv, len);
        let ctx = |r: u8| Ctx { z_y, z_d, z, r, t: k, base: &baseline, hist, cur: &[] };
        let iv = &mut history[k - 1];
        let c = rng.random_bool(dgp.p1(Target::C, &ctx(r_prev))?) as u8;
        iv.c = Some(c);
        if c == 1 {
            break;
        }
        let r = rng.random_bool(dgp.p1(Target::R, &ctx(r_prev))?) as u8;
        iv.r = Some(r);
        let d = rng.random_bool(dgp.p1(Target::D, &ctx(r))?) as u8;
        iv.d = Some(d);
        if d == 1 {
            break;
        }
        let y = rng.random_bool(dgp.p1(Target::Y, &ctx(r))?) as u8;
        iv.y = Some(y);
        if y == 1 {
            break;
        }
        if k < h {
            let l = draw_vector(dgp, rng, k, |_| (z_y, z_d, z, r), hist, &baseline)?;
            tv.extend_from_slice(&l);
            history[k - 1].l = Some(l);
        }
        r_prev = r;
    }
    let arm = match mode {
        SampleMode::TwoArm => None,
        SampleMode::FourArm => Some(ArmPair::new(z_y, z_d)),
    };
    Ok(IndividualRecord { id, z, baseline, history, weight: 1.0, arm })
}

/// Draw n independent individuals in temporal order.
pub fn sample_trial(dgp: &Dgp, n: usize, seed: u64, mode: SampleMode) -> Result<TrialDataset> {
    let mut rng = stream(seed, &[]);
    let width = n.max(1).to_string().len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(sample_one(dgp, &mut rng, format!("{:0w$}", i, w = width), mode)?);
    }
    TrialDataset::new(dgp.schema().clone(), dgp.horizon(), out)
}

// ---------------------------------------------------------------- exact laws

/// All values of the vector at time t with their probabilities, drawn in
/// temporal order.
fn enumerate_vector(dgp: &Dgp, t: usize, zs: (u8, u8, u8, u8), hist: HistView, base: &[f64]) -> Result<Vec<(Vec<f64>, f64)>> {
    let schema = dgp.schema();
    let n = schema.covs_at(t).len();
    let mut out = vec![(vec![0.0; n], 1.0)];
    for pos in schema.order_at(t) {
        let mut next = Vec::new();
        for (cur, p) in out {
            let target = if t == 0 { Target::L0(pos) } else { Target::L(pos) };
            let c = Ctx { z_y: zs.0, z_d: zs.1, z: zs.2, r: zs.3, t, base: if t == 0 { &cur } else { base }, hist, cur: &cur };
            let probs = dgp.dist(target, &c)?;
            for (lv, q) in probs.iter().enumerate() {
                if *q > 0.0 {
                    let mut v = cur.clone();
                    v[pos] = lv as f64;
                    next.push((v, p * q));
                }
            }
        }
        out = next;
    }
    Ok(out)
}

/// Every observable two-arm trajectory with its probability as case weight.
pub fn observed_law_dataset(dgp: &Dgp) -> Result<TrialDataset> {
    let sp = &dgp.spec;
    let h = sp.horizon;
    let mut out: Vec<IndividualRecord> = Vec::new();
    #[allow(clippy::too_many_arguments)]
    fn rec(dgp: &Dgp, z: u8, base: &[f64], tv: &mut Vec<f64>, hist_iv: &mut Vec<Interval>, k: usize, r_prev: u8, w: f64, out: &mut Vec<IndividualRecord>) -> Result<()> {
        let h = dgp.horizon();
        let finish = |hist_iv: &Vec<Interval>, out: &mut Vec<IndividualRecord>| {
            let mut history = hist_iv.clone();
            history.resize(h, Interval::default());
            out.push(IndividualRecord { id: String::new(), z, baseline: base.to_vec(), history, weight: w, arm: None });
        };
        if k > h {
            finish(hist_iv, out);
            return Ok(());
        }
        let len = k - 1;
        let tv_snapshot = tv.clone();
        let hist = HistView::new(base, &tv_snapshot, len);
        let ctx = |r: u8| Ctx { z_y: z, z_d: z, z, r, t: k, base, hist, cur: &[] };
        let pc = dgp.p1(Target::C, &ctx(r_prev))?;
        if pc > 0.0 {
            hist_iv.push(Interval { c: Some(1), ..Default::default() });
            let w2 = w * pc;
            let mut history = hist_iv.clone();
            history.resize(h, Interval::default());
            out.push(IndividualRecord { id: String::new(), z, baseline: base.to_vec(), history, weight: w2, arm: None });
            hist_iv.pop();
        }
        let pr = dgp.p1(Target::R, &ctx(r_prev))?;
        for r in [0u8, 1] {
            let wr = w * (1.0 - pc) * if r == 1 { pr } else { 1.0 - pr };
            if wr == 0.0 {
                continue;
            }
            let pd = dgp.p1(Target::D, &ctx(r))?;
            let py = dgp.p1(Target::Y, &ctx(r))?;
            let mut iv = Interval { c: Some(0), r: Some(r), d: Some(1), y: None, l: None };
            if pd > 0.0 {
                hist_iv.push(iv.clone());
                finish(hist_iv, out);
                out.last_mut().unwrap().weight = wr * pd;
                hist_iv.pop();
            }
            iv.d = Some(0);
            if py > 0.0 && pd < 1.0 {
                iv.y = Some(1);
                hist_iv.push(iv.clone());
                finish(hist_iv, out);
                out.last_mut().unwrap().weight = wr * (1.0 - pd) * py;
                hist_iv.pop();
            }
            iv.y = Some(0);
            let ws = wr * (1.0 - pd) * (1.0 - py);
            if ws == 0.0 {
                continue;
            }
            if k == h {
                hist_iv.push(iv.clone());
                finish(hist_iv, out);
                out.last_mut().unwrap().weight = ws;
                hist_iv.pop();
                continue;
            }
            for (l, pl) in enumerate_vector(dgp, k, (z, z, z, r), hist, base)? {
                let mut iv2 = iv.clone();
                iv2.l = Some(l.clone());
                hist_iv.push(iv2);
                tv.extend_from_slice(&l);
                rec(dgp, z, base, tv, hist_iv, k + 1, r, ws * pl, out)?;
                tv.truncate(tv.len() - l.len());
                hist_iv.pop();
            }
        }
        Ok(())
    }
    for z in [0u8, 1] {
        let pz = if z == 1 { sp.p_z } else { 1.0 - sp.p_z };
        if pz == 0.0 {
            continue;
        }
        for (base, pb) in enumerate_vector(dgp, 0, (z, z, z, 1), HistView::EMPTY, &[])? {
            let mut tv = Vec::new();
            let mut hist_iv = Vec::new();
            rec(dgp, z, &base, &mut tv, &mut hist_iv, 1, 1, pz * pb, &mut out)?;
        }
    }
    let width = out.len().max(1).to_string().len();
    for (i, r) in out.iter_mut().enumerate() {
        r.id = format!("p{:0w$}", i, w = width);
    }
    TrialDataset::new(sp.schema.clone(), h, out)
}

/// The observed-data conditionals of the two-arm trial implied by the
/// generating process: rules evaluated with Z_Y = Z_D = Z and R = 1.
pub struct DgpLaws<'a> {
    pub dgp: &'a Dgp,
}

impl DgpLaws<'_> {
    fn ctx<'b>(&self, z: u8, t: usize, h: HistView<'b>, cur: &'b [f64]) -> Ctx<'b> {
        Ctx { z_y: z, z_d: z, z, r: 1, t, base: if t == 0 { cur } else { h.base }, hist: h, cur }
    }
}

impl LawSet for DgpLaws<'_> {
    fn schema(&self) -> &Schema {
        self.dgp.schema()
    }

    fn horizon(&self) -> usize {
        self.dgp.horizon()
    }

    fn p_arm(&self, z: u8) -> f64 {
        if z == 1 {
            self.dgp.spec.p_z
        } else {
            1.0 - self.dgp.spec.p_z
        }
    }

    fn y_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        self.dgp.p1(Target::Y, &self.ctx(z, k, h, &[]))
    }

    fn d_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        self.dgp.p1(Target::D, &self.ctx(z, k, h, &[]))
    }

    fn cr_prob(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        let c = self.ctx(z, k, h, &[]);
        Ok((1.0 - self.dgp.p1(Target::C, &c)?) * self.dgp.p1(Target::R, &c)?)
    }

    fn l_prob(&self, t: usize, z: u8, h: HistView, block: Block, cur: &[f64]) -> Result<f64> {
        let mut p = 1.0;
        for pos in self.dgp.schema().block_positions(t, block) {
            let target = if t == 0 { Target::L0(pos) } else { Target::L(pos) };
            let probs = self.dgp.dist(target, &self.ctx(z, t, h, cur))?;
            p *= probs.get(cur[pos] as usize).copied().unwrap_or(0.0);
        }
        Ok(p)
    }
}

/// Risk under the four-arm intervention (Z_Y, Z_D) = arm, c̄ = 0, r̄ = 1, by
/// direct enumeration of the generating process.
///
/// Rules only see the baseline and the previous covariate vector, so paths
/// agreeing on both are merged and the frontier stays small.
pub fn exact_truth(dgp: &Dgp, arm: ArmPair) -> Result<RiskCurve> {
    type Key = (Vec<u64>, Vec<u64>);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let unbits = |v: &[u64]| v.iter().map(|&x| f64::from_bits(x)).collect::<Vec<_>>();
    let h = dgp.horizon();
    let zs = |r: u8| (arm.z_y, arm.z_d, arm.z_y, r);
    let mut risk = vec![0.0; h];
    let mut frontier: BTreeMap<Key, f64> = BTreeMap::new();
    for (b, p) in enumerate_vector(dgp, 0, zs(1), HistView::EMPTY, &[])? {
        *frontier.entry((bits(&b), vec![])).or_insert(0.0) += p;
    }
    for k in 1..=h {
        let mut next: BTreeMap<Key, f64> = BTreeMap::new();
        for ((bk, lk), w) in &frontier {
            let (base, last) = (unbits(bk), unbits(lk));
            let hist = HistView::new(&base, &last, (k - 1).min(1));
            let c = Ctx { z_y: arm.z_y, z_d: arm.z_d, z: arm.z_y, r: 1, t: k, base: &base, hist, cur: &[] };
            let d = dgp.p1(Target::D, &c)?;
            let y = dgp.p1(Target::Y, &c)?;
            risk[k - 1] += w * (1.0 - d) * y;
            let surv = w * (1.0 - d) * (1.0 - y);
            if k < h && surv > 0.0 {
                for (l, pl) in enumerate_vector(dgp, k, zs(1), hist, &base)? {
                    *next.entry((bk.clone(), bits(&l))).or_insert(0.0) += surv * pl;
                }
            }
        }
        frontier = next;
    }
    let values = risk
        .iter()
        .scan(0.0, |a, v| {
            *a += v;
            Some(*a)
        })
        .collect();
    Ok(RiskCurve { arm, values })
}

// ---------------------------------------------------------------- named processes

fn table(features: &[&str], entries: Vec<(Vec<f64>, f64)>) -> Law {
    Law::Table {
        features: features.iter().map(|s| s.to_string()).collect(),
        entries: entries.into_iter().map(|(key, p)| TableEntry { key, p: Some(p), probs: None }).collect(),
    }
}

/// The two-period four-arm process with baseline `L0` and one covariate `L`
/// affected by the D component.
pub fn two_period_dgp() -> DgpSpec {
    let schema = Schema::new(vec![Covariate::binary("L0", true, Block::D), Covariate::binary("L", false, Block::D)]);
    let by = |f: &dyn Fn(f64, f64) -> f64| {
        let mut e = Vec::new();
        for eq in [0.0, 1.0] {
            for l in [0.0, 1.0] {
                e.push((vec![eq, l], f(eq, l)));
            }
        }
        e
    };
    let rules = vec![
        Rule::new("L0:L0", None, table(&[], vec![(vec![], 0.5)])),
        Rule::new("C", Some(vec![1]), table(&[], vec![(vec![], 1.0 / 50.0)])),
        Rule::new("C", Some(vec![2]), table(&["l_prev"], vec![(vec![0.0], 1.0 / 20.0), (vec![1.0], 2.0 / 20.0)])),
        Rule::new("R", Some(vec![1]), table(&[], vec![(vec![], 4.0 / 5.0)])),
        Rule::new("R", Some(vec![2]), table(&["l_prev"], vec![(vec![0.0], 3.0 / 5.0), (vec![1.0], 4.0 / 5.0)])),
        Rule::new("D", None, table(&["z_d_eq_r", "l_prev"], by(&|eq, l| if eq == 1.0 { (1.0 + l) / 20.0 } else { (1.0 + l) / 30.0 }))),
        Rule::new(
            "Y",
            None,
            table(&["z_y_eq_r", "l_prev"], by(&|eq, l| if eq == 1.0 { (10.0 + 2.0 * l) / 20.0 } else { (10.0 - 2.0 * l) / 20.0 })),
        ),
        Rule::new("L:L", Some(vec![1]), table(&["z_d_eq_r", "l_prev"], by(&|eq, l| if eq == 1.0 { (2.0 + l) / 4.0 } else { (1.0 + l) / 4.0 }))),
    ];
    DgpSpec { horizon: 2, schema, p_z: 0.5, p_zy: 0.5, p_zd: 0.5, rules }
}

fn logit(intercept: f64, coefs: &[(&str, f64)]) -> Law {
    Law::Logit { intercept, coefs: coefs.iter().map(|&(k, v)| (k.to_string(), v)).collect() }
}

/// A 30-interval trial with an elevated-blood-pressure indicator `BP`
/// measured after every interval, its baseline value `BP0` and an age
/// indicator `AGE`. All covariates sit in the D block. Hazards are logistic
/// in time, age and the last blood-pressure value; Y depends on z_Y, D and
/// `BP` on z_D.
pub fn long_follow_up_dgp() -> DgpSpec {
    let schema = Schema::new(vec![
        Covariate::binary("BP0", true, Block::D),
        Covariate::binary("AGE", true, Block::D),
        Covariate::binary("BP", false, Block::D),
    ]);
    // Each law is written twice: against BP0 before follow-up and against the
    // previous BP afterwards.
    let both = |var: &str, intercept: f64, bp: f64, rest: &[(&str, f64)]| {
        let mut early = rest.to_vec();
        early.push(("l0:BP0", bp));
        let mut late = rest.to_vec();
        late.push(("l_prev:BP", bp));
        [Rule::new(var, None, logit(intercept, &late)), Rule::new(var, Some(vec![1]), logit(intercept, &early))]
    };
    let mut rules = vec![Rule::new("L0:BP0", None, logit(0.0, &[])), Rule::new("L0:AGE", None, logit(-0.85, &[]))];
    rules.extend(both("C", -5.0, 0.3, &[("t", 0.02)]));
    rules.extend(both("R", 3.5, -0.8, &[("l0:AGE", -0.3)]));
    rules.extend(both("D", -6.0, 0.4, &[("t", 0.03), ("l0:AGE", 1.0), ("z_d", -0.3)]));
    rules.extend(both("Y", -5.0, 0.8, &[("t", 0.02), ("l0:AGE", 0.5), ("z_y", -0.4)]));
    rules.extend(both("L:BP", -1.5, 2.5, &[("l0:AGE", 0.3), ("z_d", -0.6)]));
    DgpSpec { horizon: 30, schema, p_z: 0.5, p_zy: 0.5, p_zd: 0.5, rules }
}

/// Pooled-logistic models for [`long_follow_up_dgp`]: cubic time, baseline
/// age and the most recent blood pressure, separately by arm.
pub fn long_follow_up_specs() -> Vec<ModelSpec> {
    let first = vec![crate::models::TermOverride { term: "l_last".into(), times: vec![1], with: "l0:BP0".into() }];
    let with_first = |role, terms: &[&str]| ModelSpec { overrides: first.clone(), ..ModelSpec::new(role, terms) };
    vec![
        with_first(ModelRole::Y, &["t", "t2", "t3", "l0:AGE", "l_last"]),
        with_first(ModelRole::D, &["t", "t2", "t3", "l0:AGE", "l_last"]),
        with_first(ModelRole::C, &["t", "l_last"]),
        with_first(ModelRole::R, &["l0:AGE", "l_last"]),
    ]
}

/// A random two-period process with binary L_0 and one or two binary
/// time-varying covariates in random blocks. D and L_D depend on z_D only,
/// Y and L_Y on z_Y only; every probability lies in [0.05, 0.95].
pub fn random_k1_dgp(rng: &mut impl Rng) -> DgpSpec {
    let n_tv = rng.random_range(1..=2usize);
    random_k1_dgp_with(rng, n_tv)
}

/// [`random_k1_dgp`] with a fixed number of time-varying covariates.
pub fn random_k1_dgp_with(rng: &mut impl Rng, n_tv: usize) -> DgpSpec {
    let block = |rng: &mut dyn rand::RngCore| if rng.random_bool(0.5) { Block::D } else { Block::Y };
    let mut covs = vec![Covariate::binary("L0", true, block(rng))];
    for i in 0..n_tv {
        covs.push(Covariate::binary(&format!("L{}", i + 1), false, block(rng)));
    }
    let schema = Schema::new(covs);
    let tv_names: Vec<String> = (1..=n_tv).map(|i| format!("L{}", i)).collect();
    let mut p = || rng.random_range(0.05..0.95);
    let mut full = |features: Vec<String>| -> Law {
        let n = features.len();
        let entries = (0..1usize << n)
            .map(|m| (((0..n).map(|b| ((m >> (n - 1 - b)) & 1) as f64).collect()), 0.0))
            .map(|(k, _): (Vec<f64>, f64)| {
                let v = if features.iter().any(|f| f == "t") {
                    // Times are 1 and 2; shift the binary code of `t`.
                    let ti = features.iter().position(|f| f == "t").unwrap();
                    let mut k2 = k.clone();
                    k2[ti] += 1.0;
                    k2
                } else {
                    k
                };
                TableEntry { key: v, p: Some(p()), probs: None }
            })
            .collect();
        Law::Table { features, entries }
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let prev: Vec<String> = tv_names.iter().map(|n| format!("l_prev:{}", n)).collect();
    let mut rules = vec![Rule::new("L0:L0", None, full(vec![]))];
    let ev = |z: &str| {
        let mut f = s(&[z, "t", "l0"]);
        f.append(&mut prev.clone());
        f
    };
    let c_f = ev("z");
    let d_f = ev("z_d");
    let y_f = ev("z_y");
    rules.push(Rule::new("C", None, full(c_f.clone())));
    rules.push(Rule::new("R", None, full(c_f)));
    rules.push(Rule::new("D", None, full(d_f)));
    rules.push(Rule::new("Y", None, full(y_f)));
    let tv = schema.tv_idx();
    let d_names: Vec<String> = tv.iter().filter(|&&i| schema.covariates[i].block == Block::D).map(|&i| schema.covariates[i].name.clone()).collect();
    let mut y_seen: Vec<String> = Vec::new();
    let mut d_seen: Vec<String> = Vec::new();
    for &i in &tv {
        let c = &schema.covariates[i];
        let mut f = vec![if c.block == Block::D { "z_d".to_string() } else { "z_y".to_string() }, "l0".to_string()];
        let earlier = if c.block == Block::D { d_seen.clone() } else { d_names.iter().cloned().chain(y_seen.clone()).collect() };
        f.extend(earlier.iter().map(|n| format!("cur:{}", n)));
        rules.push(Rule::new(&format!("L:{}", c.name), Some(vec![1]), full(f)));
        if c.block == Block::D {
            d_seen.push(c.name.clone());
        } else {
            y_seen.push(c.name.clone());
        }
    }
    DgpSpec { horizon: 2, schema, p_z: 0.5, p_zy: 0.5, p_zd: 0.5, rules }
}

// ---------------------------------------------------------------- specs

/// Correctly specified nuisance models for any discrete process: saturated
/// tables.
pub fn correct_specs() -> Vec<ModelSpec> {
    saturated_specs()
}

/// `base` with the L_1 law replaced by its marginal among those uncensored
/// and event-free at interval 1, ignoring L_0, Z and adherence.
pub fn misspecified_specs(base: &[ModelSpec]) -> Vec<ModelSpec> {
    let mut out = base.to_vec();
    for role in [ModelRole::LD, ModelRole::LY] {
        out.push(ModelSpec {
            strata: Strata::Pooled,
            family: Family::Table,
            times: Some(vec![1]),
            risk_set: RiskSetKind::IgnoreAdherence,
            ..ModelSpec::new(role, &[])
        });
    }
    out
}

// ---------------------------------------------------------------- coverage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dgp: DgpSpec,
    pub specs: Vec<ModelSpec>,
    pub estimators: Vec<EstimatorKind>,
    pub n: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_reps")]
    pub bootstraps: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_arms")]
    pub arms: Vec<ArmPair>,
}

fn default_reps() -> usize {
    200
}

fn default_level() -> f64 {
    0.95
}

fn all_arms() -> Vec<ArmPair> {
    ArmPair::all().to_vec()
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level {} outside (0, 1)", self.level)));
        }
        if self.bootstraps < 2 {
            return Err(Error::Config("at least 2 bootstrap draws are needed".into()));
        }
        if self.n == 0 || self.estimators.is_empty() || self.arms.is_empty() {
            return Err(Error::Config("scenario needs n > 0, an estimator and an arm".into()));
        }
        Ok(())
    }
}

/// Point estimate and interval for every (estimator, arm) of one replication,
/// in estimator-major order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub failed_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCell {
    pub estimator: EstimatorKind,
    pub arm: ArmPair,
    pub n: usize,
    pub truth: f64,
    pub covered: usize,
    pub valid: usize,
    pub fraction: f64,
    pub mc_se: f64,
    /// Mean point estimate over valid replications.
    pub mean_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageTable {
    pub cells: Vec<CoverageCell>,
    pub replications: usize,
    pub failures: usize,
    pub fingerprint: String,
    pub seed: u64,
    /// Distinct error messages of failed replications with their counts.
    pub failure_reasons: BTreeMap<String, usize>,
    /// Per-replication outcomes in replication order; `None` where the
    /// replication failed.
    #[serde(skip)]
    pub runs: Vec<Option<Replication>>,
}

impl CoverageTable {
    pub fn cell(&self, estimator: EstimatorKind, arm: ArmPair) -> Option<&CoverageCell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.arm == arm)
    }

    /// One row per estimator: n, coverage for each arm, its MC standard error.
    pub fn to_csv(&self) -> Result<String> {
        let mut arms: Vec<ArmPair> = Vec::new();
        let mut kinds: Vec<EstimatorKind> = Vec::new();
        for c in &self.cells {
            if !arms.contains(&c.arm) {
                arms.push(c.arm);
            }
            if !kinds.contains(&c.estimator) {
                kinds.push(c.estimator);
            }
        }
        let mut w = csv::Writer::from_writer(vec![]);
        let mut header = vec!["estimator".to_string(), "n".to_string()];
        header.extend(arms.iter().map(|a| a.to_string()));
        header.extend(arms.iter().map(|a| format!("se {}", a)));
        header.extend(["replications".into(), "failures".into(), "seed".into(), "fingerprint".into()]);
        w.write_record(&header)?;
        for k in &kinds {
            let mut row = vec![k.to_string(), self.cells.first().map(|c| c.n).unwrap_or(0).to_string()];
            for a in &arms {
                row.push(self.cell(*k, *a).map(|c| format!("{:.3}", c.fraction)).unwrap_or_default());
            }
            for a in &arms {
                row.push(self.cell(*k, *a).map(|c| format!("{:.4}", c.mc_se)).unwrap_or_default());
            }
            row.extend([self.replications.to_string(), self.failures.to_string(), self.seed.to_string(), self.fingerprint.clone()]);
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Sample, estimate and bootstrap one replication.
pub fn run_replication(sc: &Scenario, dgp: &Dgp, r: usize) -> Result<Replication> {
    let data = sample_trial(dgp, sc.n, derive_seed(sc.seed, &[r as u64]), SampleMode::TwoArm)?;
    let opts = EstimatorOptions::default();
    let fp = spec_fingerprint(&sc.specs);
    let stat = |ds: &TrialDataset| -> Result<Vec<f64>> {
        let nuis = fit_nuisance_set(ds, &sc.specs, &sc.estimators)?;
        let mut out = Vec::new();
        for &k in &sc.estimators {
            for &a in &sc.arms {
                out.push(estimate_with(ds, &nuis, a, k, &fp, &opts)?.terminal);
            }
        }
        Ok(out)
    };
    let cfg = BootstrapConfig { draws: sc.bootstraps, level: sc.level, seed: derive_seed(sc.seed, &[r as u64]) };
    let ci = bootstrap_ci(&data, &stat, &cfg)?;
    Ok(Replication { estimate: ci.estimate, lower: ci.lower, upper: ci.upper, failed_draws: ci.failures })
}

/// Coverage of the exact truth by percentile intervals over replications.
pub fn run_coverage_experiment(sc: &Scenario) -> Result<CoverageTable> {
    sc.validate()?;
    let dgp = Dgp::new(sc.dgp.clone())?;
    let truths: Vec<f64> = sc.arms.iter().map(|&a| exact_truth(&dgp, a).map(|c| c.terminal())).collect::<Result<_>>()?;
    let results: Vec<Result<Replication>> = (0..sc.replications).into_par_iter().map(|r| run_replication(sc, &dgp, r)).collect();
    let mut failure_reasons = BTreeMap::new();
    let runs: Vec<Option<Replication>> = results
        .into_iter()
        .map(|r| r.map_err(|e| *failure_reasons.entry(e.to_string()).or_insert(0) += 1).ok())
        .collect();
    let failures = runs.iter().filter(|r| r.is_none()).count();
    let mut cells = Vec::new();
    let na = sc.arms.len();
    for (ki, &k) in sc.estimators.iter().enumerate() {
        for (ai, &a) in sc.arms.iter().enumerate() {
            let idx = ki * na + ai;
            let truth = truths[ai];
            let mut covered = 0;
            let mut valid = 0;
            let mut sum = 0.0;
            for run in runs.iter().flatten() {
                valid += 1;
                sum += run.estimate[idx];
                if run.lower[idx] <= truth && truth <= run.upper[idx] {
                    covered += 1;
                }
            }
            let fraction = if valid > 0 { covered as f64 / valid as f64 } else { 0.0 };
            let mc_se = if valid > 0 { (fraction * (1.0 - fraction) / valid as f64).sqrt() } else { 0.0 };
            let mean_estimate = (valid > 0).then(|| sum / valid as f64);
            cells.push(CoverageCell { estimator: k, arm: a, n: sc.n, truth, covered, valid, fraction, mc_se, mean_estimate });
        }
    }
    let fingerprint = crate::estimators::sha256_hex(serde_json::to_string(sc)?.as_bytes());
    Ok(CoverageTable { cells, replications: sc.replications, failures, fingerprint, seed: sc.seed, failure_reasons, runs })
}
