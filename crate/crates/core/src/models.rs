//! Nuisance models: pooled logistic hazards and propensities, conditional
//! probability tables, and the fitted set that serves as a [`LawSet`].

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Block, CovKind, HistView, Schema, Trajectory, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::laws::LawSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelRole {
    Y,
    D,
    C,
    R,
    CR,
    #[serde(rename = "L_D")]
    LD,
    #[serde(rename = "L_Y")]
    LY,
}

impl ModelRole {
    pub fn is_law(self) -> bool {
        matches!(self, ModelRole::LD | ModelRole::LY)
    }

    pub fn block(self) -> Option<Block> {
        match self {
            ModelRole::LD => Some(Block::D),
            ModelRole::LY => Some(Block::Y),
            _ => None,
        }
    }

    pub fn of_block(b: Block) -> ModelRole {
        match b {
            Block::D => ModelRole::LD,
            Block::Y => ModelRole::LY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strata {
    #[default]
    ByZ,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Logistic,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskSetKind {
    /// The conditioning events of the identification formula.
    #[default]
    Standard,
    /// Drop the adherence requirement R̄ = 1 (censoring and survival kept).
    IgnoreAdherence,
}

/// Replace `term` by `with` at the listed modeled times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermOverride {
    pub term: String,
    pub times: Vec<usize>,
    pub with: String,
}

/// Model formula for one role. Modeled time is the interval k for event
/// roles and the measurement time t for covariate laws; the `t` term is the
/// index of the last covariate vector in the history for event roles (k - 1)
/// and t for covariate laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: ModelRole,
    /// Covariate name for L roles; every covariate of the block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<String>,
    #[serde(default)]
    pub strata: Strata,
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<TermOverride>,
    #[serde(default)]
    pub risk_set: RiskSetKind,
    /// Laplace smoothing for tables; unseen cells are an error without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
}

impl ModelSpec {
    pub fn new(role: ModelRole, terms: &[&str]) -> Self {
        ModelSpec {
            role,
            var: None,
            strata: Strata::ByZ,
            terms: terms.iter().map(|s| s.to_string()).collect(),
            family: Family::Logistic,
            times: None,
            overrides: vec![],
            risk_set: RiskSetKind::Standard,
            smoothing: None,
        }
    }

    pub fn table(role: ModelRole, terms: &[&str]) -> Self {
        ModelSpec { family: Family::Table, ..ModelSpec::new(role, terms) }
    }

    /// Saturated conditional table: per arm, per time, per full history.
    pub fn saturated(role: ModelRole) -> Self {
        if role.is_law() {
            ModelSpec::table(role, &["t", "hist", "l_cur"])
        } else {
            ModelSpec::table(role, &["t", "hist"])
        }
    }
}

/// Saturated specs for Y, D, C, R, L_D and L_Y.
pub fn saturated_specs() -> Vec<ModelSpec> {
    [ModelRole::Y, ModelRole::D, ModelRole::C, ModelRole::R, ModelRole::LD, ModelRole::LY]
        .into_iter()
        .map(ModelSpec::saturated)
        .collect()
}

// ---------------------------------------------------------------- terms

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Time(u32),
    Z,
    /// Baseline positions.
    Base(Vec<usize>),
    /// Positions in the last vector of the history, with the baseline
    /// position of a same-named covariate used when the history is L_0 only.
    Last(Vec<(usize, Option<usize>)>),
    Cur,
    Hist,
    Product(Vec<Term>),
}

fn parse_term(s: &str, schema: &Schema) -> Result<Term> {
    let s = s.trim();
    if s.contains('*') && s != "l0_*" {
        let parts: Result<Vec<Term>> = split_product(s).iter().map(|p| parse_term(p, schema)).collect();
        return Ok(Term::Product(parts?));
    }
    let base = schema.base_idx();
    let tv = schema.tv_idx();
    let base_pos = |name: &str| base.iter().position(|&i| schema.covariates[i].name == name);
    let tv_pos = |name: &str| tv.iter().position(|&i| schema.covariates[i].name == name);
    let last_of = |p: usize| (p, base_pos(&schema.covariates[tv[p]].name));
    Ok(match s {
        "t" => Term::Time(1),
        "t2" => Term::Time(2),
        "t3" => Term::Time(3),
        "z" => Term::Z,
        "l0_*" => Term::Base((0..base.len()).collect()),
        "l_last" => Term::Last((0..tv.len()).map(last_of).collect()),
        "l_cur" => Term::Cur,
        "hist" => Term::Hist,
        _ => {
            if let Some(n) = s.strip_prefix("l0:").or_else(|| s.strip_prefix("l0_")) {
                Term::Base(vec![base_pos(n).ok_or_else(|| Error::Config(format!("term `{}`: no baseline covariate {}", s, n)))?])
            } else if let Some(n) = s.strip_prefix("l_last:") {
                Term::Last(vec![last_of(tv_pos(n).ok_or_else(|| Error::Config(format!("term `{}`: no time-varying covariate {}", s, n)))?)])
            } else {
                return Err(Error::Config(format!("unknown model term `{}`", s)));
            }
        }
    })
}

fn split_product(s: &str) -> Vec<String> {
    // `l0_*` contains a star itself; protect it before splitting.
    let guarded = s.replace("l0_*", "\u{1}");
    guarded.split('*').map(|p| p.replace('\u{1}', "l0_*")).collect()
}

fn cov_levels(schema: &Schema, ci: usize) -> u32 {
    let c = &schema.covariates[ci];
    match c.kind {
        CovKind::Continuous => 0,
        _ => c.n_levels().unwrap_or(0),
    }
}

/// Term atoms: (value, level count; 0 for numeric).
struct Eval<'a> {
    schema: &'a Schema,
    law: bool,
    time: usize,
    z: u8,
    h: HistView<'a>,
    cur: &'a [f64],
    earlier: &'a [usize],
}

impl Eval<'_> {
    fn atoms(&self, term: &Term, out: &mut Vec<(f64, u32)>) -> Result<()> {
        let base = self.schema.base_idx();
        let tv = self.schema.tv_idx();
        match term {
            Term::Time(p) => {
                let t = if self.law { self.time } else { self.time - 1 } as f64;
                out.push((t.powi(*p as i32), 0));
            }
            Term::Z => out.push((self.z as f64, 2)),
            Term::Base(ps) => {
                for &p in ps {
                    let v = self.h.base.get(p).ok_or_else(|| Error::Config("baseline term used in the baseline covariate law".into()))?;
                    out.push((*v, cov_levels(self.schema, base[p])));
                }
            }
            Term::Last(ps) => {
                for &(p, fallback) in ps {
                    if self.h.len > 0 {
                        out.push((self.h.last()[p], cov_levels(self.schema, tv[p])));
                    } else {
                        match fallback.and_then(|b| self.h.base.get(b).map(|v| (b, *v))) {
                            Some((b, v)) => out.push((v, cov_levels(self.schema, base[b]))),
                            None => {
                                return Err(Error::Config(format!(
                                    "term l_last:{} has no value when only L_0 is observed; add an override",
                                    self.schema.covariates[tv[p]].name
                                )))
                            }
                        }
                    }
                }
            }
            Term::Cur => {
                let covs = self.schema.covs_at(self.time);
                for &p in self.earlier {
                    out.push((self.cur[p], cov_levels(self.schema, covs[p])));
                }
            }
            Term::Hist => {
                for (p, v) in self.h.base.iter().enumerate() {
                    out.push((*v, cov_levels(self.schema, base[p])));
                }
                for t in 1..=self.h.len {
                    for (p, v) in self.h.at(t).iter().enumerate() {
                        out.push((*v, cov_levels(self.schema, tv[p])));
                    }
                }
            }
            Term::Product(parts) => {
                let mut prod = 1.0;
                for part in parts {
                    let mut tmp = Vec::new();
                    self.atoms(part, &mut tmp)?;
                    if tmp.len() != 1 || tmp[0].1 > 2 {
                        return Err(Error::Config("interaction factors must be single numeric or binary terms".into()));
                    }
                    prod *= tmp[0].0;
                }
                out.push((prod, 0));
            }
        }
        Ok(())
    }
}

fn term_names(term: &Term, label: &str, schema: &Schema, law: bool, time: usize, earlier: &[usize], hist_len: usize) -> Vec<(String, u32)> {
    let base = schema.base_idx();
    let tv = schema.tv_idx();
    let named = |ci: usize| (format!("{}[{}]", label, schema.covariates[ci].name), cov_levels(schema, ci));
    match term {
        Term::Time(_) | Term::Product(_) => vec![(label.to_string(), 0)],
        Term::Z => vec![(label.to_string(), 2)],
        Term::Base(ps) => ps.iter().map(|&p| named(base[p])).collect(),
        Term::Last(ps) => ps.iter().map(|&(p, _)| named(tv[p])).collect(),
        Term::Cur => {
            let covs = schema.covs_at(time);
            earlier.iter().map(|&p| named(covs[p])).collect()
        }
        Term::Hist => {
            let mut v: Vec<(String, u32)> = if law && time == 0 { vec![] } else { base.iter().map(|&ci| named(ci)).collect() };
            for t in 1..=hist_len {
                v.extend(tv.iter().map(|&ci| {
                    let (n, l) = named(ci);
                    (format!("{}@{}", n, t), l)
                }));
            }
            v
        }
    }
}

// ---------------------------------------------------------------- fits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledLogisticModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log_lik: f64,
    /// Log-likelihood after each accepted step.
    pub ll_trace: Vec<f64>,
    pub n_rows: usize,
}

impl PooledLogisticModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let eta: f64 = self.coef.iter().zip(x).map(|(b, v)| b * v).sum();
        sigmoid(eta)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub const SEPARATION_BOUND: f64 = 20.0;

/// Weighted logistic regression by IRLS with step-halving.
pub fn irls(x: &DMatrix<f64>, y: &[f64], w: &[f64], names: &[String]) -> Result<PooledLogisticModel> {
    let (n, p) = x.shape();
    let sw: f64 = w.iter().sum();
    if n == 0 || sw <= 0.0 {
        return Err(Error::Positivity("empty risk set".into()));
    }
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = x * beta;
        (0..n).map(|i| w[i] * (y[i] * eta[i] - log1pexp(eta[i]))).sum()
    };
    let mut beta = DVector::zeros(p);
    let mut ll = loglik(&beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    for iter in 0..100 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let mut grad = DVector::zeros(p);
        info.fill(0.0);
        for i in 0..n {
            let r = w[i] * (y[i] - mu[i]);
            let v = w[i] * mu[i] * (1.0 - mu[i]);
            let row = x.row(i);
            for a in 0..p {
                grad[a] += r * row[a];
                if v > 0.0 {
                    for b in 0..=a {
                        info[(a, b)] += v * row[a] * row[b];
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        iterations = iter;
        if grad.amax() / sw < 1e-10 {
            converged = true;
            break;
        }
        let step = solve_spd(&info, &grad).ok_or_else(|| Error::Fit("singular information matrix".into()))?;
        let mut s = 1.0;
        let mut accepted = false;
        while s > 1e-12 {
            let cand = &beta + &step * s;
            let cll = loglik(&cand);
            if cll >= ll - 1e-12 * (1.0 + ll.abs()) {
                beta = cand;
                ll = cll.max(ll);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        trace.push(ll);
        if !accepted {
            break;
        }
    }
    if let Some(j) = (0..p).find(|&j| beta[j].abs() > SEPARATION_BOUND) {
        return Err(Error::Separation { term: names[j].clone(), detail: format!("coefficient {:.1} diverging", beta[j]) });
    }
    if !converged {
        return Err(Error::Fit(format!("IRLS did not converge in {} iterations", iterations + 1)));
    }
    let se = match solve_spd(&info, &DVector::zeros(p)).and(info.clone().cholesky()) {
        Some(ch) => {
            let inv = ch.inverse();
            (0..p).map(|j| inv[(j, j)].sqrt()).collect()
        }
        None => vec![f64::NAN; p],
    };
    Ok(PooledLogisticModel {
        names: names.to_vec(),
        coef: beta.iter().copied().collect(),
        se,
        iterations: iterations + 1,
        converged,
        log_lik: ll,
        ll_trace: trace,
        n_rows: n,
    })
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let scale = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(1.0_f64, f64::max);
    let mut jitter = 1e-8 * scale;
    for _ in 0..6 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Some(ch.solve(b));
        }
        jitter *= 100.0;
    }
    None
}

/// Conditional probability table: one row of level counts per key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConditionalModel {
    pub levels: usize,
    pub keys: Vec<Vec<f64>>,
    pub counts: Vec<Vec<f64>>,
    pub smoothing: Option<f64>,
    #[serde(skip)]
    index: HashMap<Vec<u64>, usize>,
}

impl DiscreteConditionalModel {
    pub fn new(levels: usize, smoothing: Option<f64>) -> Self {
        DiscreteConditionalModel { levels, keys: vec![], counts: vec![], smoothing, index: HashMap::new() }
    }

    pub fn add(&mut self, key: &[f64], level: usize, w: f64) {
        let bits: Vec<u64> = key.iter().map(|v| v.to_bits()).collect();
        let i = match self.index.get(&bits) {
            Some(&i) => i,
            None => {
                self.keys.push(key.to_vec());
                self.counts.push(vec![0.0; self.levels]);
                self.index.insert(bits, self.keys.len() - 1);
                self.keys.len() - 1
            }
        };
        self.counts[i][level] += w;
    }

    /// Probability row for a key, or `None` for an unseen key.
    pub fn row(&self, key: &[f64]) -> Option<Vec<f64>> {
        let bits: Vec<u64> = key.iter().map(|v| v.to_bits()).collect();
        let alpha = self.smoothing.unwrap_or(0.0);
        match self.index.get(&bits) {
            Some(&i) => {
                let tot: f64 = self.counts[i].iter().sum::<f64>() + alpha * self.levels as f64;
                Some(self.counts[i].iter().map(|c| (c + alpha) / tot).collect())
            }
            None if self.smoothing.is_some() => Some(vec![1.0 / self.levels as f64; self.levels]),
            None => None,
        }
    }

    pub fn prob(&self, key: &[f64], level: usize) -> Result<f64> {
        match self.row(key) {
            Some(r) => r.get(level).copied().ok_or_else(|| Error::Fit(format!("level {} outside table", level))),
            None => Err(Error::Positivity(format!("unseen conditioning cell {:?}", key))),
        }
    }

    /// Cells with a zero count in some level.
    pub fn zero_cells(&self) -> usize {
        self.counts.iter().filter(|c| c.iter().any(|&x| x == 0.0)).count()
    }

    fn rebuild_index(&mut self) {
        self.index = self.keys.iter().enumerate().map(|(i, k)| (k.iter().map(|v| v.to_bits()).collect(), i)).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Fit {
    Logistic(PooledLogisticModel),
    Table(DiscreteConditionalModel),
}

/// One fitted model: a spec applied to one outcome variable over a set of
/// times, with one fit per arm (or a single pooled fit).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    /// Outcome covariate name for L roles.
    pub var: Option<String>,
    /// Position of the outcome within the covariate vector.
    pub pos: usize,
    pub times: Vec<usize>,
    /// Index 0 and 1 for z = 0 and z = 1 under `by_z`; a single entry when pooled.
    pub fits: Vec<Fit>,
    #[serde(skip)]
    compiled: BTreeMap<usize, Compiled>,
    #[serde(skip)]
    schema: Schema,
}

#[derive(Debug, Clone, Default)]
struct Compiled {
    terms: Vec<Term>,
    earlier: Vec<usize>,
}

impl FittedModel {
    fn compile(spec: &ModelSpec, schema: &Schema, pos: usize, times: &[usize]) -> Result<BTreeMap<usize, Compiled>> {
        let mut out = BTreeMap::new();
        for &t in times {
            let mut terms = Vec::new();
            for name in &spec.terms {
                let replaced = spec.overrides.iter().find(|o| o.term == *name && o.times.contains(&t)).map(|o| o.with.as_str());
                terms.push(parse_term(replaced.unwrap_or(name), schema)?);
            }
            let earlier = if spec.role.is_law() {
                let order = schema.order_at(t);
                order.iter().take_while(|&&p| p != pos).copied().collect()
            } else {
                vec![]
            };
            out.insert(t, Compiled { terms, earlier });
        }
        Ok(out)
    }

    fn atoms(&self, time: usize, z: u8, h: HistView, cur: &[f64]) -> Result<Vec<(f64, u32)>> {
        let c = self
            .compiled
            .get(&time)
            .ok_or_else(|| Error::Coverage(format!("{:?} at time {}", self.spec.role, time)))?;
        let ev = Eval { schema: &self.schema, law: self.spec.role.is_law(), time, z, h, cur, earlier: &c.earlier };
        let mut out = Vec::new();
        for t in &c.terms {
            ev.atoms(t, &mut out)?;
        }
        Ok(out)
    }

    fn fit_for(&self, z: u8) -> &Fit {
        match self.spec.strata {
            Strata::ByZ => &self.fits[z as usize],
            Strata::Pooled => &self.fits[0],
        }
    }

    /// Probability that the outcome equals `level` (1 for the event of a
    /// binary role) given the context.
    pub fn predict(&self, time: usize, z: u8, h: HistView, cur: &[f64], level: f64) -> Result<f64> {
        let atoms = self.atoms(time, z, h, cur)?;
        match self.fit_for(z) {
            Fit::Logistic(m) => {
                let p1 = m.predict_row(&design_row(&atoms));
                Ok(if level == 1.0 { p1 } else { 1.0 - p1 })
            }
            Fit::Table(t) => {
                let key: Vec<f64> = atoms.iter().map(|a| a.0).collect();
                t.prob(&key, level as usize)
            }
        }
    }

    pub fn logistic(&self, z: u8) -> Option<&PooledLogisticModel> {
        match self.fit_for(z) {
            Fit::Logistic(m) => Some(m),
            _ => None,
        }
    }

    pub fn table(&self, z: u8) -> Option<&DiscreteConditionalModel> {
        match self.fit_for(z) {
            Fit::Table(t) => Some(t),
            _ => None,
        }
    }

    pub fn converged(&self) -> bool {
        self.fits.iter().all(|f| match f {
            Fit::Logistic(m) => m.converged,
            Fit::Table(_) => true,
        })
    }
}

fn design_row(atoms: &[(f64, u32)]) -> Vec<f64> {
    let mut x = vec![1.0];
    for &(v, l) in atoms {
        if l > 2 {
            for lev in 1..l {
                x.push((v == lev as f64) as u8 as f64);
            }
        } else {
            x.push(v);
        }
    }
    x
}

fn design_names(atoms: &[(String, u32)]) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    for (n, l) in atoms {
        if *l > 2 {
            names.extend((1..*l).map(|lev| format!("{}={}", n, lev)));
        } else {
            names.push(n.clone());
        }
    }
    names
}

/// One person-time row of a role's risk set.
struct Row<'a> {
    time: usize,
    z: u8,
    h: HistView<'a>,
    cur: &'a [f64],
    outcome: f64,
    w: f64,
}

fn risk_rows<'a>(trajs: &'a [Trajectory], spec: &ModelSpec, pos: usize, times: &[usize], stratum: Option<u8>) -> Vec<Row<'a>> {
    let mut rows = Vec::new();
    let ignore_r = spec.risk_set == RiskSetKind::IgnoreAdherence;
    for tr in trajs {
        if tr.w <= 0.0 || stratum.is_some_and(|z| tr.z != z) {
            continue;
        }
        let phi = |k: usize| if ignore_r { k <= tr.unc } else { k <= tr.adh };
        for &k in times {
            let row = match spec.role {
                ModelRole::Y => (k >= 1 && phi(k) && tr.alive(k - 1) && tr.d[k] == 0 && tr.y[k] <= 1).then(|| (tr.y[k] as f64, k - 1)),
                ModelRole::D => (k >= 1 && phi(k) && tr.alive(k - 1) && tr.d[k] <= 1).then(|| (tr.d[k] as f64, k - 1)),
                ModelRole::C => (k >= 1 && phi(k - 1) && tr.alive(k - 1) && tr.c[k] <= 1).then(|| (tr.c[k] as f64, k - 1)),
                ModelRole::R => {
                    (k >= 1 && phi(k - 1) && tr.alive(k - 1) && tr.c[k] == 0 && tr.r[k] <= 1).then(|| (tr.r[k] as f64, k - 1))
                }
                ModelRole::CR => (k >= 1 && phi(k - 1) && tr.alive(k - 1) && tr.c[k] <= 1)
                    .then(|| ((tr.c[k] == 0 && tr.r[k] == 1) as u8 as f64, k - 1)),
                ModelRole::LD | ModelRole::LY => {
                    if k == 0 {
                        Some((tr.base[pos], 0))
                    } else if phi(k) && tr.alive(k) && tr.n_l >= k {
                        Some((tr.l_at(k)[pos], k - 1))
                    } else {
                        None
                    }
                }
            };
            if let Some((outcome, hlen)) = row {
                let law = spec.role.is_law();
                let (h, cur) = if law && k == 0 {
                    (HistView::new(&[], &[], 0), tr.base.as_slice())
                } else if law {
                    (tr.hist(hlen), tr.l_at(k))
                } else {
                    (tr.hist(hlen), &[][..])
                };
                rows.push(Row { time: k, z: tr.z, h, cur, outcome, w: tr.w });
            }
        }
    }
    rows
}

fn default_times(role: ModelRole, schema: &Schema, horizon: usize, pos_is_base: Option<bool>) -> Vec<usize> {
    match (role.is_law(), pos_is_base) {
        (false, _) => (1..=horizon).collect(),
        (true, Some(true)) => vec![0],
        (true, _) => (1..horizon).filter(|_| schema.n_tv() > 0).collect(),
    }
}

/// Outcome variables a spec applies to: (name, position, is baseline).
fn spec_targets(spec: &ModelSpec, schema: &Schema) -> Result<Vec<(Option<String>, usize, bool)>> {
    let Some(block) = spec.role.block() else {
        return Ok(vec![(None, 0, false)]);
    };
    let mut out = Vec::new();
    for (group, baseline) in [(schema.base_idx(), true), (schema.tv_idx(), false)] {
        for (p, &ci) in group.iter().enumerate() {
            let c = &schema.covariates[ci];
            let wanted = match &spec.var {
                Some(v) => *v == c.name,
                None => c.block == block,
            };
            if wanted {
                if c.block != block {
                    return Err(Error::Config(format!("covariate {} is not in the {:?} block", c.name, block)));
                }
                out.push((Some(c.name.clone()), p, baseline));
            }
        }
    }
    if out.is_empty() {
        if let Some(v) = &spec.var {
            return Err(Error::Config(format!("no covariate named {}", v)));
        }
    }
    Ok(out)
}

fn fit_target(data: &TrialDataset, trajs: &[Trajectory], spec: &ModelSpec, var: Option<String>, pos: usize, times: Vec<usize>) -> Result<FittedModel> {
    let schema = &data.schema;
    let compiled = FittedModel::compile(spec, schema, pos, &times)?;
    let levels = if spec.role.is_law() {
        let t0 = times.first().copied().unwrap_or(0);
        let ci = schema.covs_at(t0)[pos];
        match schema.covariates[ci].n_levels() {
            Some(n) => n as usize,
            None => return Err(Error::Unsupported(format!("continuous covariate {} in a covariate-law role", schema.covariates[ci].name))),
        }
    } else {
        2
    };
    if spec.family == Family::Logistic && levels > 2 {
        return Err(Error::Config(format!("categorical covariate {} needs the table family", var.unwrap_or_default())));
    }
    let strata: Vec<Option<u8>> = match spec.strata {
        Strata::ByZ => vec![Some(0), Some(1)],
        Strata::Pooled => vec![None],
    };
    let mut model = FittedModel { spec: spec.clone(), var, pos, times: times.clone(), fits: vec![], compiled, schema: schema.clone() };
    let role_name = match &model.var {
        Some(v) => format!("{:?}[{}]", spec.role, v),
        None => format!("{:?}", spec.role),
    };
    for stratum in strata {
        let rows = risk_rows(trajs, spec, pos, &times, stratum);
        if rows.is_empty() {
            return Err(Error::Positivity(format!(
                "empty risk set for {} (z = {:?}); positivity under the intervention fails",
                role_name, stratum
            )));
        }
        let fit = match spec.family {
            Family::Table => {
                let mut tab = DiscreteConditionalModel::new(levels, spec.smoothing);
                for r in &rows {
                    let atoms = model.atoms(r.time, r.z, r.h, r.cur)?;
                    let key: Vec<f64> = atoms.iter().map(|a| a.0).collect();
                    tab.add(&key, r.outcome as usize, r.w);
                }
                Fit::Table(tab)
            }
            Family::Logistic => {
                // Aggregate identical design rows before fitting.
                let mut agg: HashMap<Vec<u64>, usize> = HashMap::new();
                let mut xs: Vec<Vec<f64>> = Vec::new();
                let mut ys = Vec::new();
                let mut ws = Vec::new();
                let mut width = None;
                let mut names = None;
                for r in &rows {
                    let atoms = model.atoms(r.time, r.z, r.h, r.cur)?;
                    let x = design_row(&atoms);
                    match width {
                        None => {
                            width = Some(x.len());
                            let c = &model.compiled[&r.time];
                            let labeled: Vec<(String, u32)> = c
                                .terms
                                .iter()
                                .zip(&spec.terms)
                                .flat_map(|(t, lab)| term_names(t, lab, schema, spec.role.is_law(), r.time, &c.earlier, r.h.len))
                                .collect();
                            names = Some(design_names(&labeled));
                        }
                        Some(wd) if wd != x.len() => {
                            return Err(Error::Config(format!("{}: design width changes across times; restrict `times`", role_name)))
                        }
                        _ => {}
                    }
                    let mut key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
                    key.push(r.outcome.to_bits());
                    match agg.get(&key) {
                        Some(&i) => ws[i] += r.w,
                        None => {
                            agg.insert(key, xs.len());
                            xs.push(x);
                            ys.push(r.outcome);
                            ws.push(r.w);
                        }
                    }
                }
                let p = width.unwrap();
                let mut names = names.unwrap();
                names.resize(p, "term".into());
                let xm = DMatrix::from_fn(xs.len(), p, |i, j| xs[i][j]);
                let fit = irls(&xm, &ys, &ws, &names).map_err(|e| match e {
                    Error::Separation { term, detail } => Error::Separation { term: format!("{}: {}", role_name, term), detail },
                    Error::Positivity(m) => Error::Positivity(format!("{}: {}", role_name, m)),
                    Error::Fit(m) => Error::Fit(format!("{}: {}", role_name, m)),
                    other => other,
                })?;
                Fit::Logistic(fit)
            }
        };
        model.fits.push(fit);
    }
    Ok(model)
}

/// Fit one spec (every outcome variable it covers) on a dataset.
pub fn fit_spec(data: &TrialDataset, spec: &ModelSpec) -> Result<Vec<FittedModel>> {
    let trajs = data.trajectories();
    let mut out = Vec::new();
    for (var, pos, baseline) in spec_targets(spec, &data.schema)? {
        let mut times = default_times(spec.role, &data.schema, data.horizon, Some(baseline));
        if let Some(t) = &spec.times {
            times.retain(|x| t.contains(x));
        }
        if !times.is_empty() {
            out.push(fit_target(data, &trajs, spec, var, pos, times)?);
        }
    }
    Ok(out)
}

/// Pooled logistic model for an event role or a binary covariate law.
pub fn fit_pooled_logistic(data: &TrialDataset, spec: &ModelSpec) -> Result<FittedModel> {
    let spec = ModelSpec { family: Family::Logistic, ..spec.clone() };
    fit_spec(data, &spec)?.into_iter().next().ok_or_else(|| Error::Config("spec matches no outcome".into()))
}

/// Conditional probability table for one covariate law at one time.
pub fn fit_discrete_conditional(data: &TrialDataset, spec: &ModelSpec, time: usize) -> Result<FittedModel> {
    if !spec.role.is_law() {
        return Err(Error::Config("fit_discrete_conditional needs an L_D or L_Y role".into()));
    }
    let spec = ModelSpec { family: Family::Table, times: Some(vec![time]), ..spec.clone() };
    fit_spec(data, &spec)?.into_iter().next().ok_or_else(|| Error::Config(format!("no covariate of the block at time {}", time)))
}

// ---------------------------------------------------------------- nuisance set

#[derive(Debug, Clone, Serialize)]
pub struct NuisanceSet {
    #[serde(skip)]
    pub schema: Schema,
    pub horizon: usize,
    pub p_z: [f64; 2],
    pub models: Vec<FittedModel>,
    /// Covariate-law roles with no covariates at all.
    pub degenerate: Vec<ModelRole>,
    #[serde(skip)]
    index: HashMap<(ModelRole, usize, usize), usize>,
}

fn required_roles(kinds: &[EstimatorKind]) -> Vec<ModelRole> {
    use ModelRole::*;
    let mut roles = Vec::new();
    for k in kinds {
        let need: &[ModelRole] = match k {
            EstimatorKind::WeightedY => &[Y, LY, CR],
            EstimatorKind::WeightedD => &[D, LD, CR],
            EstimatorKind::PlugIn | EstimatorKind::OneStep => &[Y, D, CR, LD, LY],
        };
        for r in need {
            if !roles.contains(r) {
                roles.push(*r);
            }
        }
    }
    roles
}

/// Fit every spec and check that the roles needed by `kinds` are covered.
/// Later specs take precedence over earlier ones where they overlap.
pub fn fit_nuisance_set(data: &TrialDataset, specs: &[ModelSpec], kinds: &[EstimatorKind]) -> Result<NuisanceSet> {
    if data.is_empty() || data.total_weight() <= 0.0 {
        return Err(Error::Input(vec!["empty dataset".into()]));
    }
    let schema = &data.schema;
    // Resolve precedence before fitting so overridden pieces are never fit.
    let mut claimed: HashMap<(ModelRole, usize, usize), usize> = HashMap::new();
    let mut plans: Vec<Vec<(Option<String>, usize, Vec<usize>)>> = vec![vec![]; specs.len()];
    for (i, spec) in specs.iter().enumerate().rev() {
        for (var, pos, baseline) in spec_targets(spec, schema)? {
            let mut times = default_times(spec.role, schema, data.horizon, Some(baseline));
            if let Some(t) = &spec.times {
                times.retain(|x| t.contains(x));
            }
            let key_pos = |_t: usize| if spec.role.is_law() { pos } else { 0 };
            times.retain(|&t| !claimed.contains_key(&(spec.role, key_pos(t), t)));
            for &t in &times {
                claimed.insert((spec.role, key_pos(t), t), i);
            }
            if !times.is_empty() {
                plans[i].push((var, pos, times));
            }
        }
    }
    let trajs = data.trajectories();
    let mut models = Vec::new();
    let mut index = HashMap::new();
    for (i, plan) in plans.into_iter().enumerate() {
        for (var, pos, times) in plan {
            let m = fit_target(data, &trajs, &specs[i], var, pos, times)?;
            for &t in &m.times {
                index.insert((m.spec.role, if m.spec.role.is_law() { m.pos } else { 0 }, t), models.len());
            }
            models.push(m);
        }
    }
    let tw = data.total_weight();
    let w1: f64 = data.individuals.iter().filter(|r| r.z == 1).map(|r| r.weight).sum();
    let mut degenerate = vec![];
    for b in [Block::D, Block::Y] {
        if schema.block_is_empty(b) {
            degenerate.push(ModelRole::of_block(b));
        }
    }
    let set = NuisanceSet { schema: schema.clone(), horizon: data.horizon, p_z: [(tw - w1) / tw, w1 / tw], models, degenerate, index };
    set.check_coverage(&required_roles(kinds))?;
    Ok(set)
}

impl NuisanceSet {
    fn check_coverage(&self, roles: &[ModelRole]) -> Result<()> {
        for &role in roles {
            match role {
                ModelRole::CR => {
                    for k in 1..=self.horizon {
                        let joint = self.index.contains_key(&(ModelRole::CR, 0, k));
                        let split = self.index.contains_key(&(ModelRole::C, 0, k)) && self.index.contains_key(&(ModelRole::R, 0, k));
                        if !(joint || split) {
                            return Err(Error::Coverage(format!("CR (censoring and adherence) at time {}", k)));
                        }
                    }
                }
                ModelRole::LD | ModelRole::LY => {
                    let block = role.block().unwrap();
                    for t in 0..self.horizon {
                        for p in self.schema.block_positions(t, block) {
                            if !self.index.contains_key(&(role, p, t)) {
                                let name = &self.schema.cov_at(t, p).name;
                                return Err(Error::Coverage(format!("{:?} for {} at time {}", role, name, t)));
                            }
                        }
                    }
                }
                _ => {
                    for k in 1..=self.horizon {
                        if !self.index.contains_key(&(role, 0, k)) {
                            return Err(Error::Coverage(format!("{:?} at time {}", role, k)));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model(&self, role: ModelRole, pos: usize, time: usize) -> Option<&FittedModel> {
        self.index.get(&(role, pos, time)).map(|&i| &self.models[i])
    }

    fn predict(&self, role: ModelRole, time: usize, z: u8, h: HistView, cur: &[f64], pos: usize, level: f64) -> Result<f64> {
        let m = self.model(role, pos, time).ok_or_else(|| Error::Coverage(format!("{:?} at time {}", role, time)))?;
        m.predict(time, z, h, cur, level)
    }

    pub fn all_converged(&self) -> bool {
        self.models.iter().all(|m| m.converged())
    }
}

impl LawSet for NuisanceSet {
    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn p_arm(&self, z: u8) -> f64 {
        self.p_z[z as usize]
    }

    fn y_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        self.predict(ModelRole::Y, k, z, h, &[], 0, 1.0)
    }

    fn d_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        self.predict(ModelRole::D, k, z, h, &[], 0, 1.0)
    }

    fn cr_prob(&self, k: usize, z: u8, h: HistView) -> Result<f64> {
        if self.index.contains_key(&(ModelRole::CR, 0, k)) {
            return self.predict(ModelRole::CR, k, z, h, &[], 0, 1.0);
        }
        let c = self.predict(ModelRole::C, k, z, h, &[], 0, 1.0)?;
        if c >= 1.0 {
            return Ok(0.0);
        }
        Ok((1.0 - c) * self.predict(ModelRole::R, k, z, h, &[], 0, 1.0)?)
    }

    fn l_prob(&self, t: usize, z: u8, h: HistView, block: Block, cur: &[f64]) -> Result<f64> {
        let role = ModelRole::of_block(block);
        let mut p = 1.0;
        for pos in self.schema.block_positions(t, block) {
            p *= self.predict(role, t, z, h, cur, pos, cur[pos])?;
            if p == 0.0 {
                break;
            }
        }
        Ok(p)
    }
}

/// Rebuild lookup structures after deserializing a fitted model dump.
pub fn restore(mut models: Vec<FittedModel>, schema: &Schema) -> Result<Vec<FittedModel>> {
    for m in &mut models {
        m.compiled = FittedModel::compile(&m.spec, schema, m.pos, &m.times)?;
        m.schema = schema.clone();
        for f in &mut m.fits {
            if let Fit::Table(t) = f {
                t.rebuild_index();
            }
        }
    }
    Ok(models)
}
