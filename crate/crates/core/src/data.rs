//! Observed longitudinal data: schema, records, validation, CSV and the two
//! adherence encodings.
//!
//! Interval `k` (1-based) is stored at `history[k - 1]`. Within an interval
//! the temporal order is C, R, D, Y, L. Values after absorption are stored as
//! absent and never carried forward.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct ArmPair {
    pub z_y: u8,
    pub z_d: u8,
}

impl ArmPair {
    pub const fn new(z_y: u8, z_d: u8) -> Self {
        ArmPair { z_y, z_d }
    }

    /// The four arms in the conventional table order (1,1), (1,0), (0,1), (0,0).
    pub fn all() -> [ArmPair; 4] {
        [ArmPair::new(1, 1), ArmPair::new(1, 0), ArmPair::new(0, 1), ArmPair::new(0, 0)]
    }
}

impl fmt::Display for ArmPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.z_y, self.z_d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Block {
    #[default]
    D,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovKind {
    Binary,
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovKind,
    /// Level count for categorical covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
    /// Optional labels for categorical levels; stored values are level codes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub block: Block,
}

impl Covariate {
    pub fn binary(name: &str, baseline: bool, block: Block) -> Self {
        Covariate { name: name.into(), kind: CovKind::Binary, levels: None, labels: vec![], baseline, block }
    }

    pub fn categorical(name: &str, levels: u32, baseline: bool, block: Block) -> Self {
        Covariate { name: name.into(), kind: CovKind::Categorical, levels: Some(levels), labels: vec![], baseline, block }
    }

    pub fn continuous(name: &str, baseline: bool, block: Block) -> Self {
        Covariate { name: name.into(), kind: CovKind::Continuous, levels: None, labels: vec![], baseline, block }
    }

    /// Number of levels, `None` for continuous covariates.
    pub fn n_levels(&self) -> Option<u32> {
        match self.kind {
            CovKind::Binary => Some(2),
            CovKind::Categorical => Some(self.levels.unwrap_or(self.labels.len() as u32)),
            CovKind::Continuous => None,
        }
    }

    fn admits(&self, v: f64) -> bool {
        match self.n_levels() {
            Some(n) => v >= 0.0 && v.fract() == 0.0 && (v as u32) < n,
            None => v.is_finite(),
        }
    }

    fn parse(&self, s: &str) -> std::result::Result<f64, String> {
        let s = s.trim();
        if self.kind == CovKind::Categorical {
            if let Some(i) = self.labels.iter().position(|l| l == s) {
                return Ok(i as f64);
            }
        }
        let v: f64 = s.parse().map_err(|_| format!("covariate {}: cannot parse `{}`", self.name, s))?;
        if !self.admits(v) {
            return Err(format!("covariate {}: value `{}` outside its levels", self.name, s));
        }
        Ok(v)
    }

    fn format(&self, v: f64) -> String {
        if self.kind == CovKind::Categorical && !self.labels.is_empty() {
            if let Some(l) = self.labels.get(v as usize) {
                return l.clone();
            }
        }
        format!("{}", v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Schema {
    pub covariates: Vec<Covariate>,
    /// CSV flag: baseline covariates come on a time-0 row instead of being
    /// repeated on every row.
    #[serde(default)]
    pub baseline_row: bool,
}

impl Schema {
    pub fn new(covariates: Vec<Covariate>) -> Self {
        Schema { covariates, baseline_row: false }
    }

    pub fn base_idx(&self) -> Vec<usize> {
        (0..self.covariates.len()).filter(|&i| self.covariates[i].baseline).collect()
    }

    pub fn tv_idx(&self) -> Vec<usize> {
        (0..self.covariates.len()).filter(|&i| !self.covariates[i].baseline).collect()
    }

    pub fn n_base(&self) -> usize {
        self.covariates.iter().filter(|c| c.baseline).count()
    }

    pub fn n_tv(&self) -> usize {
        self.covariates.len() - self.n_base()
    }

    /// Schema indices of the covariates measured at time `t` (baseline at 0).
    pub fn covs_at(&self, t: usize) -> Vec<usize> {
        if t == 0 {
            self.base_idx()
        } else {
            self.tv_idx()
        }
    }

    /// Vector positions at time `t` in temporal order: the D block first,
    /// then the Y block, each in schema order.
    pub fn order_at(&self, t: usize) -> Vec<usize> {
        let covs = self.covs_at(t);
        let mut out: Vec<usize> = (0..covs.len()).filter(|&p| self.covariates[covs[p]].block == Block::D).collect();
        out.extend((0..covs.len()).filter(|&p| self.covariates[covs[p]].block == Block::Y));
        out
    }

    pub fn block_positions(&self, t: usize, block: Block) -> Vec<usize> {
        let covs = self.covs_at(t);
        (0..covs.len()).filter(|&p| self.covariates[covs[p]].block == block).collect()
    }

    pub fn cov_at(&self, t: usize, pos: usize) -> &Covariate {
        &self.covariates[self.covs_at(t)[pos]]
    }

    pub fn is_discrete(&self) -> bool {
        self.covariates.iter().all(|c| c.kind != CovKind::Continuous)
    }

    pub fn block_is_empty(&self, block: Block) -> bool {
        !self.covariates.iter().any(|c| c.block == block)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Interval {
    pub c: Option<u8>,
    pub r: Option<u8>,
    pub d: Option<u8>,
    pub y: Option<u8>,
    pub l: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    pub z: u8,
    pub baseline: Vec<f64>,
    pub history: Vec<Interval>,
    /// Case weight, 1 for ordinary data.
    pub weight: f64,
    /// Component assignment in a four-arm trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<ArmPair>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TcInterval {
    pub c: Option<u8>,
    pub a: Option<u8>,
    pub d: Option<u8>,
    pub y: Option<u8>,
    pub l: Option<Vec<f64>>,
}

/// Record under the treatment-centered encoding: the treatment actually taken
/// at each interval instead of an adherence flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentCenteredRecord {
    pub id: String,
    /// Randomized assignment when recorded; otherwise the first treatment
    /// taken stands in for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned: Option<u8>,
    pub baseline: Vec<f64>,
    pub history: Vec<TcInterval>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub schema: Schema,
    /// Number of follow-up intervals, K + 1.
    pub horizon: usize,
    pub individuals: Vec<IndividualRecord>,
}

/// Borrowed covariate history: the baseline vector plus `len` time-varying
/// vectors (times 1..=len) stored back to back.
#[derive(Debug, Clone, Copy)]
pub struct HistView<'a> {
    pub base: &'a [f64],
    pub tv: &'a [f64],
    pub len: usize,
}

impl<'a> HistView<'a> {
    pub const EMPTY: HistView<'static> = HistView { base: &[], tv: &[], len: 0 };

    pub fn new(base: &'a [f64], tv: &'a [f64], len: usize) -> Self {
        HistView { base, tv, len }
    }

    /// Covariate vector at time `t` (0 is the baseline vector).
    pub fn at(&self, t: usize) -> &'a [f64] {
        if t == 0 {
            return self.base;
        }
        let n = self.tv.len() / self.len.max(1);
        &self.tv[(t - 1) * n..t * n]
    }

    /// The most recent vector in the history.
    pub fn last(&self) -> &'a [f64] {
        self.at(self.len)
    }
}

const ABSENT: u8 = 2;

/// Normalized view of one record used by fitting and estimation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub z: u8,
    pub w: f64,
    pub base: Vec<f64>,
    /// Observed time-varying vectors for times 1..=n_l, back to back.
    pub tv: Vec<f64>,
    pub n_l: usize,
    /// Flags indexed by interval 0..=horizon; 2 marks absent. Index 0 holds
    /// the implicit C_0 = D_0 = Y_0 = 0 and an empty R_0 stored as 1.
    pub c: Vec<u8>,
    pub r: Vec<u8>,
    pub d: Vec<u8>,
    pub y: Vec<u8>,
    /// Largest k with C_j = 0 and R_j = 1 for all j <= k.
    pub adh: usize,
    /// Largest k with C_j = 0 for all j <= k.
    pub unc: usize,
    /// Largest k with D_j = Y_j = 0 observed for all j <= k.
    pub surv: usize,
}

impl Trajectory {
    pub fn from_record(rec: &IndividualRecord, horizon: usize) -> Self {
        let h = horizon;
        let mut c = vec![ABSENT; h + 1];
        let mut r = vec![ABSENT; h + 1];
        let mut d = vec![ABSENT; h + 1];
        let mut y = vec![ABSENT; h + 1];
        c[0] = 0;
        r[0] = 1;
        d[0] = 0;
        y[0] = 0;
        for k in 1..=h {
            if let Some(iv) = rec.history.get(k - 1) {
                c[k] = iv.c.unwrap_or(ABSENT);
                r[k] = iv.r.unwrap_or(ABSENT);
                d[k] = iv.d.unwrap_or(ABSENT);
                y[k] = iv.y.unwrap_or(ABSENT);
            }
        }
        let mut tv = Vec::new();
        let mut n_l = 0;
        for iv in &rec.history {
            match &iv.l {
                Some(l) => {
                    tv.extend_from_slice(l);
                    n_l += 1;
                }
                None => break,
            }
        }
        let run = |f: &dyn Fn(usize) -> bool| (1..=h).take_while(|&k| f(k)).count();
        let adh = run(&|k| c[k] == 0 && r[k] == 1);
        let unc = run(&|k| c[k] == 0);
        let surv = run(&|k| d[k] == 0 && y[k] == 0);
        Trajectory { z: rec.z, w: rec.weight, base: rec.baseline.clone(), tv, n_l, c, r, d, y, adh, unc, surv }
    }

    /// φ_k(z) = {Z = z, C_k = 0, R̄_k = 1}.
    pub fn phi(&self, k: usize, z: u8) -> bool {
        self.z == z && k <= self.adh
    }

    /// D_j = Y_j = 0 for all j <= k.
    pub fn alive(&self, k: usize) -> bool {
        k <= self.surv
    }

    /// History L̄_t = (L_0, ..., L_t).
    pub fn hist(&self, t: usize) -> HistView<'_> {
        debug_assert!(t <= self.n_l);
        let n = if self.n_l == 0 { 0 } else { self.tv.len() / self.n_l };
        HistView { base: &self.base, tv: &self.tv[..t * n], len: t }
    }

    /// Covariate vector at time t (0 is baseline).
    pub fn l_at(&self, t: usize) -> &[f64] {
        if t == 0 {
            return &self.base;
        }
        let n = self.tv.len() / self.n_l.max(1);
        &self.tv[(t - 1) * n..t * n]
    }
}

impl TrialDataset {
    pub fn new(schema: Schema, horizon: usize, individuals: Vec<IndividualRecord>) -> Result<Self> {
        let ds = TrialDataset { schema, horizon, individuals };
        let mut problems = Vec::new();
        let (nb, nt) = (ds.schema.n_base(), ds.schema.n_tv());
        for rec in &ds.individuals {
            if rec.history.len() != horizon {
                problems.push(format!("id {}: history has {} intervals, horizon is {}", rec.id, rec.history.len(), horizon));
            }
            if rec.baseline.len() != nb {
                problems.push(format!("id {}: baseline has {} values, schema has {}", rec.id, rec.baseline.len(), nb));
            }
            for (k, iv) in rec.history.iter().enumerate() {
                if let Some(l) = &iv.l {
                    if l.len() != nt {
                        problems.push(format!("id {} time {}: covariate vector has {} values, schema has {}", rec.id, k + 1, l.len(), nt));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(ds)
        } else {
            Err(Error::Input(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.individuals.iter().map(|r| r.weight).sum()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.individuals.iter().map(|r| Trajectory::from_record(r, self.horizon)).collect()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_monotone(self)
    }

    /// Merge identical records into one weighted record each. Returns the
    /// collapsed dataset and, for every original record, its pattern index.
    pub fn collapse(&self) -> (TrialDataset, Vec<usize>) {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut out: Vec<IndividualRecord> = Vec::new();
        let mut map = Vec::with_capacity(self.individuals.len());
        for rec in &self.individuals {
            let key = pattern_key(rec);
            let p = *index.entry(key).or_insert_with(|| {
                let mut first = rec.clone();
                first.weight = 0.0;
                out.push(first);
                out.len() - 1
            });
            out[p].weight += rec.weight;
            map.push(p);
        }
        (TrialDataset { schema: self.schema.clone(), horizon: self.horizon, individuals: out }, map)
    }

    /// Same records with new case weights; records with weight 0 are dropped.
    pub fn reweighted(&self, weights: &[f64]) -> TrialDataset {
        let individuals = self
            .individuals
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(r, &w)| IndividualRecord { weight: w, ..r.clone() })
            .collect();
        TrialDataset { schema: self.schema.clone(), horizon: self.horizon, individuals }
    }
}

fn pattern_key(rec: &IndividualRecord) -> String {
    let mut s = format!("{}|{:?}|", rec.z, rec.arm);
    for v in &rec.baseline {
        s.push_str(&format!("{:x},", v.to_bits()));
    }
    for iv in &rec.history {
        s.push_str(&format!("|{:?}{:?}{:?}{:?}", iv.c, iv.r, iv.d, iv.y));
        if let Some(l) = &iv.l {
            for v in l {
                s.push_str(&format!("{:x},", v.to_bits()));
            }
        }
    }
    s
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    AtRisk,
    Censored,
    Competing,
    Event,
}

/// Check every record invariant; one entry per violation.
pub fn validate_monotone(ds: &TrialDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let schema = &ds.schema;
    let base_covs = schema.base_idx();
    let tv_covs = schema.tv_idx();
    for rec in &ds.individuals {
        let mut v = |time: usize, rule: &str| out.push(Violation { id: rec.id.clone(), time, rule: rule.to_string() });
        if rec.z > 1 {
            v(0, "z outside {0,1}");
        }
        if !(rec.weight.is_finite() && rec.weight >= 0.0) {
            v(0, "invalid weight");
        }
        if rec.baseline.len() != base_covs.len() {
            v(0, "baseline length does not match schema");
        } else {
            for (p, &ci) in base_covs.iter().enumerate() {
                if !schema.covariates[ci].admits(rec.baseline[p]) {
                    v(0, "baseline value outside covariate levels");
                }
            }
        }
        let mut state = State::AtRisk;
        for k in 1..=ds.horizon {
            let iv = match rec.history.get(k - 1) {
                Some(iv) => iv.clone(),
                None => Interval::default(),
            };
            for f in [iv.c, iv.r, iv.d, iv.y].into_iter().flatten() {
                if f > 1 {
                    v(k, "flag outside {0,1}");
                }
            }
            match state {
                State::Censored => {
                    if iv.r.is_some() || iv.d.is_some() || iv.y.is_some() || iv.l.is_some() || iv.c == Some(0) {
                        v(k, "value after censoring");
                    }
                }
                State::Competing => {
                    if iv.r.is_some() || iv.l.is_some() || iv.c == Some(1) || iv.d == Some(0) || iv.y == Some(1) {
                        v(k, "value after competing event");
                    }
                }
                State::Event => {
                    if iv.r.is_some() || iv.l.is_some() || iv.c == Some(1) || iv.d == Some(1) || iv.y == Some(0) {
                        v(k, "value after event of interest");
                    }
                }
                State::AtRisk => match iv.c {
                    None => v(k, "missing censoring flag while at risk"),
                    Some(1) => {
                        if iv.r.is_some() || iv.d.is_some() || iv.y.is_some() || iv.l.is_some() {
                            v(k, "value after censoring");
                        }
                        state = State::Censored;
                    }
                    Some(_) => {
                        if iv.r.is_none() {
                            v(k, "missing adherence flag while uncensored");
                        }
                        match iv.d {
                            None => v(k, "missing competing-event flag while uncensored"),
                            Some(1) => {
                                if iv.y == Some(1) {
                                    v(k, "event of interest recorded with competing event");
                                }
                                if iv.l.is_some() {
                                    v(k, "covariate after competing event");
                                }
                                state = State::Competing;
                            }
                            Some(_) => match iv.y {
                                None => v(k, "missing event flag while at risk"),
                                Some(1) => {
                                    if iv.l.is_some() {
                                        v(k, "covariate after event of interest");
                                    }
                                    state = State::Event;
                                }
                                Some(_) => match &iv.l {
                                    None if k < ds.horizon && !tv_covs.is_empty() => v(k, "missing covariate while at risk"),
                                    Some(l) if l.len() != tv_covs.len() => v(k, "covariate length does not match schema"),
                                    Some(l) => {
                                        for (p, &ci) in tv_covs.iter().enumerate() {
                                            if !schema.covariates[ci].admits(l[p]) {
                                                v(k, "covariate value outside levels");
                                            }
                                        }
                                    }
                                    None => {}
                                },
                            },
                        }
                    }
                },
            }
        }
    }
    out
}

// ---------------------------------------------------------------- CSV

struct Columns {
    id: usize,
    time: usize,
    z: Option<usize>,
    c: usize,
    r: Option<usize>,
    a: Option<usize>,
    d: usize,
    y: usize,
    weight: Option<usize>,
    z_y: Option<usize>,
    z_d: Option<usize>,
    base: Vec<usize>,
    tv: Vec<usize>,
}

fn columns(headers: &csv::StringRecord, schema: &Schema, treatment_centered: bool) -> std::result::Result<Columns, Vec<String>> {
    let mut errs = Vec::new();
    let find = |n: &str| headers.iter().position(|h| h.trim() == n);
    let need = |n: &str, errs: &mut Vec<String>| {
        find(n).unwrap_or_else(|| {
            errs.push(format!("missing column `{}`", n));
            0
        })
    };
    let id = need("id", &mut errs);
    let time = need("time", &mut errs);
    let c = need("c", &mut errs);
    let d = need("d", &mut errs);
    let y = need("y", &mut errs);
    let (z, r, a) = if treatment_centered {
        (find("z"), None, Some(need("a", &mut errs)))
    } else {
        (Some(need("z", &mut errs)), Some(need("r", &mut errs)), None)
    };
    let mut base = Vec::new();
    for ci in schema.base_idx() {
        base.push(need(&format!("l0_{}", schema.covariates[ci].name), &mut errs));
    }
    let mut tv = Vec::new();
    for ci in schema.tv_idx() {
        tv.push(need(&format!("l_{}", schema.covariates[ci].name), &mut errs));
    }
    for h in headers.iter() {
        let h = h.trim();
        let known = |name: &str, baseline: bool| schema.covariates.iter().any(|c| c.name == name && c.baseline == baseline);
        if let Some(n) = h.strip_prefix("l0_") {
            if !known(n, true) {
                errs.push(format!("schema mismatch: column `{}` is not a baseline covariate", h));
            }
        } else if let Some(n) = h.strip_prefix("l_") {
            if !known(n, false) {
                errs.push(format!("schema mismatch: column `{}` is not a time-varying covariate", h));
            }
        }
    }
    if errs.is_empty() {
        Ok(Columns { id, time, z, c, r, a, d, y, weight: find("weight"), z_y: find("z_y"), z_d: find("z_d"), base, tv })
    } else {
        Err(errs)
    }
}

fn flag(s: &str) -> std::result::Result<Option<u8>, ()> {
    match s.trim() {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        _ => Err(()),
    }
}

struct RawRow {
    time: usize,
    z: Option<u8>,
    c: Option<u8>,
    r: Option<u8>,
    d: Option<u8>,
    y: Option<u8>,
    weight: Option<f64>,
    arm: (Option<u8>, Option<u8>),
    base: Vec<Option<f64>>,
    tv: Vec<Option<f64>>,
}

struct RawPerson {
    id: String,
    rows: BTreeMap<usize, RawRow>,
}

/// Horizon declared on a `# ... horizon=N` comment line, if any.
fn declared_horizon(text: &str) -> Result<Option<usize>> {
    for line in text.lines().filter(|l| l.trim_start().starts_with('#')) {
        for tok in line.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("horizon=") {
                return v.parse().map(Some).map_err(|_| Error::Input(vec![format!("bad horizon declaration `{}`", tok)]));
            }
        }
    }
    Ok(None)
}

/// Rows grouped by person, plus the horizon the file declares. Without a
/// declaration the horizon is the largest time present.
fn read_rows<R: Read>(mut reader: R, schema: &Schema, tc: bool) -> Result<(Option<usize>, Vec<RawPerson>)> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let horizon = declared_horizon(&text)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let cols = columns(&headers, schema, tc).map_err(Error::Input)?;
    let base_covs: Vec<&Covariate> = schema.base_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let tv_covs: Vec<&Covariate> = schema.tv_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let mut errs = Vec::new();
    let mut people: Vec<RawPerson> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(line + 2, |p| p.line() as usize);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = get(cols.id).to_string();
        let time: usize = match get(cols.time).trim().parse() {
            Ok(t) => t,
            Err(_) => {
                errs.push(format!("line {}: time `{}` is not a non-negative integer", line, get(cols.time)));
                continue;
            }
        };
        let mut fl = |col: Option<usize>, name: &str| -> Option<u8> {
            let col = col?;
            match flag(get(col)) {
                Ok(v) => v,
                Err(()) => {
                    errs.push(format!("line {}: non-{{0,1}} flag `{}` in column {}", line, get(col), name));
                    None
                }
            }
        };
        let z = fl(cols.z, "z");
        let c = fl(Some(cols.c), "c");
        let r = if tc { fl(cols.a, "a") } else { fl(cols.r, "r") };
        let d = fl(Some(cols.d), "d");
        let y = fl(Some(cols.y), "y");
        let arm = (fl(cols.z_y, "z_y"), fl(cols.z_d, "z_d"));
        let weight = match cols.weight.map(get).map(str::trim) {
            None | Some("") => None,
            Some(s) => match s.parse::<f64>() {
                Ok(w) if w.is_finite() && w >= 0.0 => Some(w),
                _ => {
                    errs.push(format!("line {}: invalid weight `{}`", line, s));
                    None
                }
            },
        };
        let mut cells = |cols: &[usize], covs: &[&Covariate]| -> Vec<Option<f64>> {
            cols.iter()
                .zip(covs)
                .map(|(&col, cov)| {
                    let s = get(col).trim();
                    if s.is_empty() {
                        return None;
                    }
                    match cov.parse(s) {
                        Ok(v) => Some(v),
                        Err(e) => {
                            errs.push(format!("line {}: {}", line, e));
                            None
                        }
                    }
                })
                .collect()
        };
        let base = cells(&cols.base, &base_covs);
        let tv = cells(&cols.tv, &tv_covs);
        let p = *index.entry(id.clone()).or_insert_with(|| {
            people.push(RawPerson { id: id.clone(), rows: BTreeMap::new() });
            people.len() - 1
        });
        if people[p].rows.contains_key(&time) {
            errs.push(format!("line {}: duplicate (id, time) = ({}, {})", line, id, time));
            continue;
        }
        people[p].rows.insert(time, RawRow { time, z, c, r, d, y, weight, arm, base, tv });
    }
    if errs.is_empty() {
        Ok((horizon, people))
    } else {
        Err(Error::Input(errs))
    }
}

struct Assembled {
    id: String,
    z: Option<u8>,
    baseline: Vec<f64>,
    history: Vec<Interval>,
    weight: f64,
    arm: Option<ArmPair>,
}

fn assemble(people: Vec<RawPerson>, schema: &Schema, horizon: Option<usize>) -> Result<(usize, Vec<Assembled>)> {
    let max_t = people.iter().flat_map(|p| p.rows.keys().copied()).max().unwrap_or(0);
    let horizon = horizon.unwrap_or(max_t);
    let mut errs = Vec::new();
    let nb = schema.n_base();
    let nt = schema.n_tv();
    let mut out = Vec::new();
    for p in people {
        let mut z = None;
        let mut weight = None;
        let mut arm = None;
        let mut baseline: Vec<Option<f64>> = vec![None; nb];
        let mut history = vec![Interval::default(); horizon];
        for row in p.rows.values() {
            if row.time == 0 && !schema.baseline_row {
                errs.push(format!("id {}: time 0 row but baseline_row is false", p.id));
            }
            if row.time > horizon {
                errs.push(format!("id {}: time {} beyond horizon {}", p.id, row.time, horizon));
                continue;
            }
            let mut agree = |slot: &mut Option<u8>, v: Option<u8>, what: &str| {
                if let Some(v) = v {
                    match *slot {
                        Some(s) if s != v => errs.push(format!("id {}: {} changes across rows", p.id, what)),
                        _ => *slot = Some(v),
                    }
                }
            };
            agree(&mut z, row.z, "z");
            if let (Some(a), Some(b)) = row.arm {
                arm = Some(ArmPair::new(a, b));
            }
            if let Some(w) = row.weight {
                if weight.is_some_and(|x| x != w) {
                    errs.push(format!("id {}: weight changes across rows", p.id));
                }
                weight = Some(w);
            }
            let base_here = !schema.baseline_row || row.time == 0;
            for (i, v) in row.base.iter().enumerate() {
                match (v, base_here) {
                    (Some(v), true) => match baseline[i] {
                        Some(b) if b != *v => errs.push(format!("id {}: baseline covariate changes across rows", p.id)),
                        _ => baseline[i] = Some(*v),
                    },
                    (Some(_), false) => errs.push(format!("id {} time {}: baseline value outside the time-0 row", p.id, row.time)),
                    _ => {}
                }
            }
            if row.time == 0 {
                continue;
            }
            let iv = &mut history[row.time - 1];
            iv.c = row.c;
            iv.r = row.r;
            iv.d = row.d;
            iv.y = row.y;
            let present = row.tv.iter().filter(|v| v.is_some()).count();
            if present == nt && nt > 0 {
                iv.l = Some(row.tv.iter().map(|v| v.unwrap()).collect());
            } else if present > 0 {
                errs.push(format!("id {} time {}: partially missing covariate vector", p.id, row.time));
            }
        }
        if baseline.iter().any(|b| b.is_none()) {
            errs.push(format!("id {}: missing baseline covariate", p.id));
        }
        out.push(Assembled {
            id: p.id,
            z,
            baseline: baseline.into_iter().map(|b| b.unwrap_or(0.0)).collect(),
            history,
            weight: weight.unwrap_or(1.0),
            arm,
        });
    }
    if errs.is_empty() {
        Ok((horizon, out))
    } else {
        Err(Error::Input(errs))
    }
}

/// Read a long-format CSV under the strategy-centered encoding.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<TrialDataset> {
    let (declared, people) = read_rows(reader, schema, false)?;
    let (horizon, people) = assemble(people, schema, declared)?;
    let mut errs = Vec::new();
    let individuals: Vec<IndividualRecord> = people
        .into_iter()
        .map(|a| {
            if a.z.is_none() {
                errs.push(format!("id {}: missing z", a.id));
            }
            IndividualRecord { id: a.id, z: a.z.unwrap_or(0), baseline: a.baseline, history: a.history, weight: a.weight, arm: a.arm }
        })
        .collect();
    if !errs.is_empty() {
        return Err(Error::Input(errs));
    }
    let ds = TrialDataset::new(schema.clone(), horizon, individuals)?;
    let report = ds.validate();
    if !report.is_empty() {
        return Err(Error::Validation(report));
    }
    Ok(ds)
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<TrialDataset> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Read a long-format CSV with an `a` column (treatment actually taken).
pub fn read_treatment_centered_csv<R: Read>(reader: R, schema: &Schema) -> Result<(usize, Vec<TreatmentCenteredRecord>)> {
    let (declared, people) = read_rows(reader, schema, true)?;
    let (horizon, people) = assemble(people, schema, declared)?;
    let recs = people
        .into_iter()
        .map(|a| TreatmentCenteredRecord {
            id: a.id,
            assigned: a.z,
            baseline: a.baseline,
            history: a.history.into_iter().map(|iv| TcInterval { c: iv.c, a: iv.r, d: iv.d, y: iv.y, l: iv.l }).collect(),
            weight: a.weight,
        })
        .collect();
    Ok((horizon, recs))
}

/// Long-format CSV. A leading `# horizon=N` line keeps the follow-up length
/// when nobody is observed through the last interval.
pub fn write_csv<W: Write>(ds: &TrialDataset, mut writer: W) -> Result<()> {
    writeln!(writer, "# horizon={}", ds.horizon)?;
    let schema = &ds.schema;
    let with_weight = ds.individuals.iter().any(|r| r.weight != 1.0);
    let with_arm = ds.individuals.iter().any(|r| r.arm.is_some());
    let base_covs: Vec<&Covariate> = schema.base_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let tv_covs: Vec<&Covariate> = schema.tv_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "time", "z", "c", "r", "d", "y"].iter().map(|s| s.to_string()).collect();
    if with_weight {
        header.push("weight".into());
    }
    if with_arm {
        header.push("z_y".into());
        header.push("z_d".into());
    }
    header.extend(base_covs.iter().map(|c| format!("l0_{}", c.name)));
    header.extend(tv_covs.iter().map(|c| format!("l_{}", c.name)));
    w.write_record(&header)?;
    let f = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in &ds.individuals {
        let lead = |time: usize| {
            let mut row = vec![rec.id.clone(), time.to_string(), rec.z.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 4));
            if with_weight {
                row.push(format!("{}", rec.weight));
            }
            if with_arm {
                row.push(rec.arm.map(|a| a.z_y.to_string()).unwrap_or_default());
                row.push(rec.arm.map(|a| a.z_d.to_string()).unwrap_or_default());
            }
            row
        };
        let base_cells = || rec.baseline.iter().zip(&base_covs).map(|(v, c)| c.format(*v)).collect::<Vec<_>>();
        if schema.baseline_row {
            let mut row = lead(0);
            row.extend(base_cells());
            row.extend(std::iter::repeat_n(String::new(), tv_covs.len()));
            w.write_record(&row)?;
        }
        for (k, iv) in rec.history.iter().enumerate() {
            if iv.c.is_none() && iv.r.is_none() && iv.d.is_none() && iv.y.is_none() && iv.l.is_none() {
                continue;
            }
            let mut row = lead(k + 1);
            row[3] = f(iv.c);
            row[4] = f(iv.r);
            row[5] = f(iv.d);
            row[6] = f(iv.y);
            if schema.baseline_row {
                row.extend(std::iter::repeat_n(String::new(), base_covs.len()));
            } else {
                row.extend(base_cells());
            }
            match &iv.l {
                Some(l) => row.extend(l.iter().zip(&tv_covs).map(|(v, c)| c.format(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), tv_covs.len())),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write treatment-centered records in the long format read by
/// [`read_treatment_centered_csv`] (column `a` instead of `r`). Baseline
/// values are repeated on every row.
pub fn write_treatment_centered_csv<W: Write>(recs: &[TreatmentCenteredRecord], schema: &Schema, mut writer: W) -> Result<()> {
    if let Some(h) = recs.iter().map(|r| r.history.len()).max() {
        writeln!(writer, "# horizon={}", h)?;
    }
    let base_covs: Vec<&Covariate> = schema.base_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let tv_covs: Vec<&Covariate> = schema.tv_idx().into_iter().map(|i| &schema.covariates[i]).collect();
    let with_weight = recs.iter().any(|r| r.weight != 1.0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "time", "z", "c", "a", "d", "y"].iter().map(|s| s.to_string()).collect();
    if with_weight {
        header.push("weight".into());
    }
    header.extend(base_covs.iter().map(|c| format!("l0_{}", c.name)));
    header.extend(tv_covs.iter().map(|c| format!("l_{}", c.name)));
    w.write_record(&header)?;
    let f = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in recs {
        for (k, iv) in rec.history.iter().enumerate() {
            if iv.c.is_none() && iv.a.is_none() && iv.d.is_none() && iv.y.is_none() && iv.l.is_none() {
                continue;
            }
            let mut row = vec![rec.id.clone(), (k + 1).to_string(), f(rec.assigned), f(iv.c), f(iv.a), f(iv.d), f(iv.y)];
            if with_weight {
                row.push(format!("{}", rec.weight));
            }
            row.extend(rec.baseline.iter().zip(&base_covs).map(|(v, c)| c.format(*v)));
            match &iv.l {
                Some(l) => row.extend(l.iter().zip(&tv_covs).map(|(v, c)| c.format(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), tv_covs.len())),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(ds: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}

// ---------------------------------------------------------------- encodings

/// Strategy-centered encoding: z := the assignment (a_1 when unrecorded)
/// and r_k := I(a_k = z).
pub fn encode_strategy_centered(data: &[TreatmentCenteredRecord], schema: &Schema, horizon: usize) -> Result<TrialDataset> {
    let mut errs = Vec::new();
    let mut individuals = Vec::with_capacity(data.len());
    for rec in data {
        let z = match rec.assigned.or_else(|| rec.history.first().and_then(|iv| iv.a)) {
            Some(a) => a,
            None => {
                errs.push(format!("id {}: neither an assignment nor a_1 recorded", rec.id));
                continue;
            }
        };
        let history = rec
            .history
            .iter()
            .map(|iv| Interval { c: iv.c, r: iv.a.map(|a| (a == z) as u8), d: iv.d, y: iv.y, l: iv.l.clone() })
            .collect();
        individuals.push(IndividualRecord { id: rec.id.clone(), z, baseline: rec.baseline.clone(), history, weight: rec.weight, arm: None });
    }
    if !errs.is_empty() {
        return Err(Error::Input(errs));
    }
    let ds = TrialDataset::new(schema.clone(), horizon, individuals)?;
    let report = ds.validate();
    if !report.is_empty() {
        return Err(Error::Validation(report));
    }
    Ok(ds)
}

/// Inverse of [`encode_strategy_centered`] for a binary treatment:
/// a_k = z when r_k = 1 and 1 - z otherwise.
pub fn decode_treatment_centered(ds: &TrialDataset) -> Vec<TreatmentCenteredRecord> {
    ds.individuals
        .iter()
        .map(|rec| TreatmentCenteredRecord {
            id: rec.id.clone(),
            assigned: Some(rec.z),
            baseline: rec.baseline.clone(),
            history: rec
                .history
                .iter()
                .map(|iv| TcInterval { c: iv.c, a: iv.r.map(|r| if r == 1 { rec.z } else { 1 - rec.z }), d: iv.d, y: iv.y, l: iv.l.clone() })
                .collect(),
            weight: rec.weight,
        })
        .collect()
}

// ---------------------------------------------------------------- risk sets

/// φ_k(z) = {Z = z, C_k = 0, R̄_k = 1}; at k = 0 this is {Z = z}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskSetFilter {
    pub time: usize,
    pub z: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    C,
    R,
    D,
    Y,
}

/// Extra requirement that a flag takes a given value at a given time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagReq {
    pub flag: Flag,
    pub time: usize,
    pub value: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RiskEntry {
    pub record: usize,
    pub time: usize,
}

/// Individuals satisfying φ_k(z) and the extra flag constraints, ordered by id.
pub fn risk_set(ds: &TrialDataset, filter: RiskSetFilter, extra: &[FlagReq]) -> Result<Vec<RiskEntry>> {
    if filter.time > ds.horizon {
        return Err(Error::Config(format!("risk-set time {} beyond horizon {}", filter.time, ds.horizon)));
    }
    let mut order: Vec<usize> = (0..ds.individuals.len()).collect();
    order.sort_by(|&a, &b| ds.individuals[a].id.cmp(&ds.individuals[b].id));
    let mut out = Vec::new();
    for i in order {
        let t = Trajectory::from_record(&ds.individuals[i], ds.horizon);
        if !t.phi(filter.time, filter.z) {
            continue;
        }
        let ok = extra.iter().all(|req| {
            if req.time > ds.horizon {
                return false;
            }
            let v = match req.flag {
                Flag::C => t.c[req.time],
                Flag::R => t.r[req.time],
                Flag::D => t.d[req.time],
                Flag::Y => t.y[req.time],
            };
            v == req.value
        });
        if ok {
            out.push(RiskEntry { record: i, time: filter.time });
        }
    }
    Ok(out)
}
