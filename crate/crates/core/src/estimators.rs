//! Counterfactual risk under sustained adherence by four routes: the
//! g-formula (exact or plug-in), the two weighted estimators and the
//! one-step estimator built on the influence function.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ArmPair, Block, HistView, Trajectory, TrialDataset};
use crate::error::{Error, Result};
use crate::laws::{checked, l_joint, Combos, LawSet};
use crate::models::{fit_nuisance_set, ModelSpec, NuisanceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    PlugIn,
    WeightedY,
    WeightedD,
    OneStep,
}

impl EstimatorKind {
    pub fn all() -> [EstimatorKind; 4] {
        [EstimatorKind::PlugIn, EstimatorKind::WeightedY, EstimatorKind::WeightedD, EstimatorKind::OneStep]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::PlugIn => "plug_in",
            EstimatorKind::WeightedY => "weighted_y",
            EstimatorKind::WeightedD => "weighted_d",
            EstimatorKind::OneStep => "one_step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        EstimatorKind::all()
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{}`", s)))
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub arm: ArmPair,
    /// Risk at k = 1..=K+1.
    pub values: Vec<f64>,
}

impl RiskCurve {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Denominators below this raise a positivity error.
    pub floor: f64,
    /// Clamp small denominators to `floor` instead of failing.
    pub truncate: bool,
    /// Cap on enumerated covariate histories.
    pub max_histories: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { floor: 1e-12, truncate: false, max_histories: 50_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Effective sample size of the contributing weights per time.
    #[serde(default)]
    pub ess: Vec<f64>,
    #[serde(default)]
    pub max_weight: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// One-step correction (mean influence-function value) per time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<Vec<f64>>,
    #[serde(default)]
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub arm: ArmPair,
    pub estimator: EstimatorKind,
    pub curve: Vec<f64>,
    pub terminal: f64,
    pub fingerprint: String,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

impl EstimateReport {
    pub fn new(arm: ArmPair, estimator: EstimatorKind, curve: Vec<f64>, fingerprint: String, diagnostics: Diagnostics) -> Self {
        let terminal = *curve.last().unwrap_or(&0.0);
        EstimateReport { arm, estimator, curve, terminal, fingerprint, diagnostics, lower: None, upper: None }
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Fingerprint of a nuisance specification.
pub fn spec_fingerprint(specs: &[ModelSpec]) -> String {
    sha256_hex(serde_json::to_string(specs).expect("specs serialize").as_bytes())
}

struct Guard {
    floor: f64,
    truncate: bool,
    truncated: std::cell::Cell<usize>,
}

impl Guard {
    fn new(o: &EstimatorOptions) -> Self {
        Guard { floor: o.floor, truncate: o.truncate, truncated: std::cell::Cell::new(0) }
    }

    fn denom(&self, v: f64, what: &str) -> Result<f64> {
        if v >= self.floor {
            Ok(v)
        } else if self.truncate {
            self.truncated.set(self.truncated.get() + 1);
            Ok(self.floor)
        } else {
            Err(Error::Positivity(format!("{} = {:e} below the floor {:e}", what, v, self.floor)))
        }
    }
}

fn cumulative(nu: &[f64]) -> Vec<f64> {
    nu.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

// ---------------------------------------------------------------- g-formula

/// Probability of the event at each interval (ν_s for s = 0..=K) under the
/// arm, by forward enumeration of covariate histories.
pub fn g_formula_increments(laws: &dyn LawSet, arm: ArmPair, opts: &EstimatorOptions) -> Result<Vec<f64>> {
    let h = laws.horizon();
    let schema = laws.schema();
    let combos: Vec<Combos> = (0..h).map(|t| Combos::at(schema, t)).collect::<Result<_>>()?;
    let mut nu = vec![0.0; h];
    let mut visited = 0usize;
    struct Walk<'a> {
        laws: &'a dyn LawSet,
        arm: ArmPair,
        h: usize,
        combos: &'a [Combos],
        cap: usize,
    }
    fn step(w: &Walk, j: usize, base: &[f64], tv: &mut Vec<f64>, len: usize, weight: f64, nu: &mut [f64], visited: &mut usize) -> Result<()> {
        *visited += 1;
        if *visited > w.cap {
            return Err(Error::Unsupported(format!("more than {} covariate histories", w.cap)));
        }
        let hv = HistView::new(base, tv, len);
        let d = checked(w.laws.d_hazard(j, w.arm.z_d, hv)?, "D hazard")?;
        let y = checked(w.laws.y_hazard(j, w.arm.z_y, hv)?, "Y hazard")?;
        nu[j - 1] += weight * (1.0 - d) * y;
        if j >= w.h {
            return Ok(());
        }
        let surv = weight * (1.0 - d) * (1.0 - y);
        if surv == 0.0 {
            return Ok(());
        }
        for l in &w.combos[j].values {
            let hv = HistView::new(base, tv, len);
            let p = checked(l_joint(w.laws, j, w.arm.z_y, w.arm.z_d, hv, l)?, "covariate law")?;
            if p == 0.0 {
                continue;
            }
            tv.extend_from_slice(l);
            step(w, j + 1, base, tv, len + 1, surv * p, nu, visited)?;
            tv.truncate(tv.len() - l.len());
        }
        Ok(())
    }
    let walk = Walk { laws, arm, h, combos: &combos, cap: opts.max_histories };
    for l0 in &combos[0].values {
        let p0 = checked(l_joint(laws, 0, arm.z_y, arm.z_d, HistView::EMPTY, l0)?, "baseline law")?;
        if p0 == 0.0 {
            continue;
        }
        let mut tv = Vec::new();
        step(&walk, 1, l0, &mut tv, 0, p0, &mut nu, &mut visited)?;
    }
    Ok(nu)
}

pub fn evaluate_g_formula(laws: &dyn LawSet, arm: ArmPair) -> Result<RiskCurve> {
    let nu = g_formula_increments(laws, arm, &EstimatorOptions::default())?;
    Ok(RiskCurve { arm, values: cumulative(&nu) })
}

// ---------------------------------------------------------------- weights

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Y,
    D,
}

/// Weights of one individual, indexed by s = 0, 1, ... while defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordWeights {
    pub record: usize,
    pub case_weight: f64,
    /// I(C_{s+1} = 0, R̄_{s+1} = 1) / ∏_{j<=s+1} π_j.
    pub w_cr: Vec<f64>,
    /// W_{Y,s} (route Y) or W_{D,s} (route D); `None` where a denominator
    /// vanishes for an interval the individual does not contribute at.
    pub w_ratio: Vec<Option<f64>>,
    /// W_{L_Y,s} (route Y) or W_{L_D,s} (route D).
    pub w_l: Vec<f64>,
    /// s such that the event of interest occurs at s + 1 with D_{s+1} = 0.
    pub event_s: Option<usize>,
}

impl RecordWeights {
    /// Total weight of the contribution at s, zero when not contributing.
    pub fn contribution(&self, s: usize) -> f64 {
        if self.event_s != Some(s) {
            return 0.0;
        }
        match (self.w_cr.get(s), self.w_ratio.get(s), self.w_l.get(s)) {
            (Some(&c), Some(Some(r)), Some(&l)) => c * r * l,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTrajectory {
    pub route: Route,
    pub arm: ArmPair,
    pub horizon: usize,
    /// Total case weight of the conditioning arm.
    pub arm_weight: f64,
    pub rows: Vec<RecordWeights>,
}

fn event_s(tr: &Trajectory, h: usize) -> Option<usize> {
    (0..h).find(|&s| tr.alive(s) && tr.d[s + 1] == 0 && tr.y[s + 1] == 1)
}

/// Weights of the route's estimator for every individual in its arm
/// (Z = z_D for route Y, Z = z_Y for route D), accumulated in logs.
pub fn weight_trajectories(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair, route: Route, opts: &EstimatorOptions) -> Result<WeightTrajectory> {
    let guard = Guard::new(opts);
    let trajs = data.trajectories();
    weights_from(&trajs, laws, arm, route, &guard, data.horizon)
}

fn weights_from(trajs: &[Trajectory], laws: &dyn LawSet, arm: ArmPair, route: Route, g: &Guard, h: usize) -> Result<WeightTrajectory> {
    let (z_arm, z_other) = match route {
        Route::Y => (arm.z_d, arm.z_y),
        Route::D => (arm.z_y, arm.z_d),
    };
    let block = match route {
        Route::Y => Block::Y,
        Route::D => Block::D,
    };
    let mut rows = Vec::new();
    let mut arm_weight = 0.0;
    for (i, tr) in trajs.iter().enumerate() {
        if tr.z != z_arm || tr.w <= 0.0 {
            continue;
        }
        arm_weight += tr.w;
        let ev = event_s(tr, h);
        let mut rw = RecordWeights { record: i, case_weight: tr.w, w_cr: vec![], w_ratio: vec![], w_l: vec![], event_s: ev };
        let mut log_cr = 0.0;
        let mut log_surv = 0.0;
        let lratio = |t: usize, hv: HistView, cur: &[f64]| -> Result<f64> {
            let num = laws.l_prob(t, z_other, hv, block, cur)?;
            let den = g.denom(laws.l_prob(t, z_arm, hv, block, cur)?, "covariate-law denominator")?;
            Ok((num / den).ln())
        };
        let mut log_l = lratio(0, HistView::EMPTY, &tr.base)?;
        for s in 0..h {
            if !(tr.alive(s) && tr.n_l >= s && tr.unc >= s) {
                break;
            }
            if s >= 1 {
                log_l += lratio(s, tr.hist(s - 1), tr.l_at(s))?;
            }
            let hs = tr.hist(s);
            let contributes = ev == Some(s);
            // Artificial censoring: the indicator fails once C or R deviates,
            // and nothing later can contribute.
            if tr.adh <= s {
                rw.w_cr.push(0.0);
                rw.w_ratio.push(None);
                rw.w_l.push(log_l.exp());
                break;
            }
            log_cr -= g.denom(checked(laws.cr_prob(s + 1, z_arm, hs)?, "CR")?, "censoring/adherence propensity")?.ln();
            let w_cr = log_cr.exp();
            let ratio = match route {
                Route::Y => {
                    let num = checked(laws.y_hazard(s + 1, arm.z_y, hs)?, "Y hazard")?;
                    let den = checked(laws.y_hazard(s + 1, arm.z_d, hs)?, "Y hazard")?;
                    if den < g.floor && !contributes {
                        None
                    } else {
                        Some((log_surv + (num / g.denom(den, "Y hazard")?).ln()).exp())
                    }
                }
                Route::D => {
                    let num = 1.0 - checked(laws.d_hazard(s + 1, arm.z_d, hs)?, "D hazard")?;
                    let den = 1.0 - checked(laws.d_hazard(s + 1, arm.z_y, hs)?, "D hazard")?;
                    if den < g.floor && !contributes {
                        None
                    } else {
                        log_surv += (num / g.denom(den, "D survival")?).ln();
                        Some(log_surv.exp())
                    }
                }
            };
            rw.w_cr.push(w_cr);
            rw.w_ratio.push(ratio);
            rw.w_l.push(log_l.exp());
            if route == Route::Y && tr.alive(s + 1) {
                let num = 1.0 - checked(laws.y_hazard(s + 1, arm.z_y, hs)?, "Y hazard")?;
                let den = 1.0 - checked(laws.y_hazard(s + 1, arm.z_d, hs)?, "Y hazard")?;
                log_surv += (num / g.denom(den, "Y survival")?).ln();
            }
            if contributes {
                break;
            }
        }
        rows.push(rw);
    }
    Ok(WeightTrajectory { route, arm, horizon: h, arm_weight, rows })
}

fn weighted_curve(wt: &WeightTrajectory) -> Result<(Vec<f64>, Diagnostics)> {
    if wt.arm_weight <= 0.0 {
        let z = match wt.route {
            Route::Y => wt.arm.z_d,
            Route::D => wt.arm.z_y,
        };
        return Err(Error::Input(vec![format!("empty arm subsample Z = {}", z)]));
    }
    let h = wt.horizon;
    let mut nu = vec![0.0; h];
    let mut sums = vec![(0.0, 0.0); h];
    let mut max_weight: f64 = 0.0;
    for r in &wt.rows {
        for s in 0..r.w_cr.len() {
            if let Some(Some(ratio)) = r.w_ratio.get(s) {
                let w = r.w_cr[s] * ratio * r.w_l[s];
                if w > 0.0 {
                    sums[s].0 += r.case_weight * w;
                    sums[s].1 += r.case_weight * w * w;
                    max_weight = max_weight.max(w);
                }
            }
        }
        if let Some(s) = r.event_s {
            nu[s] += r.case_weight * r.contribution(s);
        }
    }
    for v in &mut nu {
        *v /= wt.arm_weight;
    }
    let ess = sums.iter().map(|&(a, b)| if b > 0.0 { a * a / b } else { 0.0 }).collect();
    Ok((cumulative(&nu), Diagnostics { ess, max_weight, ..Default::default() }))
}

pub fn weighted_y_curve(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair, opts: &EstimatorOptions) -> Result<(Vec<f64>, Diagnostics)> {
    let wt = weight_trajectories(data, laws, arm, Route::Y, opts)?;
    weighted_curve(&wt)
}

pub fn weighted_d_curve(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair, opts: &EstimatorOptions) -> Result<(Vec<f64>, Diagnostics)> {
    let wt = weight_trajectories(data, laws, arm, Route::D, opts)?;
    weighted_curve(&wt)
}

// ---------------------------------------------------------------- influence function

const K_A: u8 = 0;
const K_B: u8 = 1;
const K_C: u8 = 2;
const K_T: u8 = 3;

/// Backward recursion tables for one arm, filled lazily and memoized by
/// (table, s, j, interned history prefix).
pub struct IfWorkspace<'a> {
    laws: &'a dyn LawSet,
    pub arm: ArmPair,
    pub horizon: usize,
    combos: Vec<Combos>,
    radix: Vec<u64>,
    memo: RefCell<HashMap<(u8, usize, usize, u64), f64>>,
    guard: Guard,
}

impl<'a> IfWorkspace<'a> {
    pub fn new(laws: &'a dyn LawSet, arm: ArmPair, opts: &EstimatorOptions) -> Result<Self> {
        let h = laws.horizon();
        let combos: Vec<Combos> = (0..h).map(|t| Combos::at(laws.schema(), t)).collect::<Result<_>>()?;
        let mut radix = Vec::with_capacity(h);
        let mut total: u64 = 1;
        for c in &combos {
            radix.push(c.values.len() as u64);
            total = total
                .checked_mul(c.values.len() as u64 + 1)
                .ok_or_else(|| Error::Unsupported("history space too large to intern".into()))?;
        }
        Ok(IfWorkspace { laws, arm, horizon: h, combos, radix, memo: RefCell::new(HashMap::new()), guard: Guard::new(opts) })
    }

    /// Interned id of a prefix of combo indices (times 0..len-1); distinct
    /// lengths never collide because digits are offset by one.
    fn id(&self, p: &[u32]) -> u64 {
        p.iter().enumerate().fold(0u64, |acc, (t, &c)| acc * (self.radix[t] + 1) + c as u64 + 1)
    }

    fn hist(&self, p: &[u32]) -> (Vec<f64>, Vec<f64>, usize) {
        if p.is_empty() {
            return (vec![], vec![], 0);
        }
        let base = self.combos[0].values[p[0] as usize].clone();
        let mut tv = Vec::new();
        for t in 1..p.len() {
            tv.extend_from_slice(&self.combos[t].values[p[t] as usize]);
        }
        (base, tv, p.len() - 1)
    }

    fn memo<F: FnOnce() -> Result<f64>>(&self, key: (u8, usize, usize, u64), f: F) -> Result<f64> {
        if let Some(&v) = self.memo.borrow().get(&key) {
            return Ok(v);
        }
        let v = f()?;
        self.memo.borrow_mut().insert(key, v);
        Ok(v)
    }

    fn y(&self, j: usize, p: &[u32]) -> Result<f64> {
        let (b, tv, len) = self.hist(p);
        checked(self.laws.y_hazard(j, self.arm.z_y, HistView::new(&b, &tv, len))?, "Y hazard")
    }

    fn d(&self, j: usize, p: &[u32]) -> Result<f64> {
        let (b, tv, len) = self.hist(p);
        checked(self.laws.d_hazard(j, self.arm.z_d, HistView::new(&b, &tv, len))?, "D hazard")
    }

    fn l(&self, t: usize, q: &[u32], block: Block, z: u8, cur: &[f64]) -> Result<f64> {
        let (b, tv, len) = self.hist(q);
        let hv = if t == 0 { HistView::EMPTY } else { HistView::new(&b, &tv, len) };
        checked(self.laws.l_prob(t, z, hv, block, cur)?, "covariate law")
    }

    /// A_j on the history prefix p = l̄_{j-1}.
    pub fn a(&self, s: usize, j: usize, p: &[u32]) -> Result<f64> {
        self.memo((K_A, s, j, self.id(p)), || {
            if j == s + 1 {
                self.y(j, p)
            } else {
                let y = self.y(j, p)?;
                if y == 1.0 {
                    return Ok(0.0);
                }
                Ok((1.0 - y) * self.t(s, j + 1, p)?)
            }
        })
    }

    /// b_j = (1 - d_j) A_j on l̄_{j-1}.
    pub fn b(&self, s: usize, j: usize, p: &[u32]) -> Result<f64> {
        self.memo((K_B, s, j, self.id(p)), || {
            let d = self.d(j, p)?;
            if d == 1.0 {
                return Ok(0.0);
            }
            Ok((1.0 - d) * self.a(s, j, p)?)
        })
    }

    /// c_j on l̄_{j-2} and the D-block group of L_{j-1}: b_j averaged over
    /// the L_Y law.
    pub fn c(&self, s: usize, j: usize, q: &[u32], group: usize) -> Result<f64> {
        let t = j - 1;
        let key = self.id(q) * self.combos[t].n_groups as u64 + group as u64;
        self.memo((K_C, s, j, key), || {
            let mut acc = 0.0;
            let mut p = q.to_vec();
            for (ci, v) in self.combos[t].values.iter().enumerate() {
                if self.combos[t].group[ci] != group {
                    continue;
                }
                let pr = self.l(t, q, Block::Y, self.arm.z_y, v)?;
                if pr == 0.0 {
                    continue;
                }
                p.push(ci as u32);
                acc += pr * self.b(s, j, &p)?;
                p.pop();
            }
            Ok(acc)
        })
    }

    /// T_j on l̄_{j-2}: c_j averaged over the L_D law.
    pub fn t(&self, s: usize, j: usize, q: &[u32]) -> Result<f64> {
        self.memo((K_T, s, j, self.id(q)), || {
            let t = j - 1;
            let combos = &self.combos[t];
            let mut acc = 0.0;
            for g in 0..combos.n_groups {
                let rep = combos.group.iter().position(|&x| x == g).unwrap();
                let pr = self.l(t, q, Block::D, self.arm.z_d, &combos.values[rep])?;
                if pr == 0.0 {
                    continue;
                }
                acc += pr * self.c(s, j, q, g)?;
            }
            Ok(acc)
        })
    }

    /// ν_s = T_1 for the event at interval s + 1.
    pub fn nu(&self, s: usize) -> Result<f64> {
        self.t(s, 1, &[])
    }

    fn combo_index(&self, t: usize, v: &[f64]) -> Result<u32> {
        self.combos[t]
            .index_of(v)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Input(vec![format!("covariate value {:?} at time {} outside the schema levels", v, t)]))
    }
}

/// ν¹_s for one individual, s = 0..=K.
pub fn influence_contribution(tr: &Trajectory, ws: &IfWorkspace) -> Result<Vec<f64>> {
    let h = ws.horizon;
    let (zy, zd) = (ws.arm.z_y, ws.arm.z_d);
    let laws = ws.laws;
    let g = &ws.guard;
    let mut out = vec![0.0; h];
    let in_y = tr.z == zy;
    let in_d = tr.z == zd;
    if !(in_y || in_d) || tr.w <= 0.0 {
        return Ok(out);
    }
    // Observed prefix: combo indices of L_0, ..., L_m while observed.
    let mut obs: Vec<u32> = vec![ws.combo_index(0, &tr.base)?];
    for t in 1..h {
        if t > tr.n_l {
            break;
        }
        obs.push(ws.combo_index(t, tr.l_at(t))?);
    }
    // Largest t with L̄_t observed and the individual alive and uncensored.
    let reach = (obs.len() - 1).min(tr.surv).min(tr.unc);
    let hv = |t: usize| tr.hist(t);
    let d_group = |t: usize| ws.combos[t].group[obs[t] as usize];
    // Ω_t (z_Y chain) and Λ_t (z_D chain) for t = 0..=reach.
    let mut omega = vec![0.0; reach + 1];
    let mut lambda = vec![0.0; reach + 1];
    let rr_ld = |t: usize| -> Result<f64> {
        let hq = if t == 0 { HistView::EMPTY } else { hv(t - 1) };
        let num = laws.l_prob(t, zd, hq, Block::D, tr.l_at(t))?;
        let den = g.denom(laws.l_prob(t, zy, hq, Block::D, tr.l_at(t))?, "L_D law under z_Y")?;
        Ok(num / den)
    };
    let rr_ly = |t: usize| -> Result<f64> {
        let hq = if t == 0 { HistView::EMPTY } else { hv(t - 1) };
        let num = laws.l_prob(t, zy, hq, Block::Y, tr.l_at(t))?;
        let den = g.denom(laws.l_prob(t, zd, hq, Block::Y, tr.l_at(t))?, "L_Y law under z_D")?;
        Ok(num / den)
    };
    if in_y {
        omega[0] = rr_ld(0)? / g.denom(laws.p_arm(zy), "P(Z = z_Y)")?;
        for t in 1..=reach {
            if tr.adh < t {
                break;
            }
            let rr_d = (1.0 - laws.d_hazard(t, zd, hv(t - 1))?) / g.denom(1.0 - laws.d_hazard(t, zy, hv(t - 1))?, "D survival under z_Y")?;
            let pi = g.denom(laws.cr_prob(t, zy, hv(t - 1))?, "censoring/adherence propensity")?;
            omega[t] = omega[t - 1] * rr_d / pi * rr_ld(t)?;
        }
    }
    if in_d {
        lambda[0] = 1.0 / g.denom(laws.p_arm(zd), "P(Z = z_D)")?;
        for t in 1..=reach {
            if tr.adh < t {
                break;
            }
            let rr_y = (1.0 - laws.y_hazard(t, zy, hv(t - 1))?) / g.denom(1.0 - laws.y_hazard(t, zd, hv(t - 1))?, "Y survival under z_D")?;
            let pi = g.denom(laws.cr_prob(t, zd, hv(t - 1))?, "censoring/adherence propensity")?;
            lambda[t] = lambda[t - 1] * rr_ly(t - 1)? * rr_y / pi;
        }
    }
    for (s, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 1..=s + 1 {
            // Every term at j needs the individual alive and observed through j-1.
            if j - 1 > reach {
                break;
            }
            let p = &obs[..j];
            let q = &obs[..j - 1];
            let phi_prev = tr.adh >= j - 1;
            let phi_j = tr.adh >= j;
            if in_y && phi_prev {
                acc += omega[j - 1] * (ws.b(s, j, p)? - ws.c(s, j, q, d_group(j - 1))?);
                if phi_j && tr.d[j] == 0 && tr.y[j] <= 1 {
                    let obs_val = if j == s + 1 {
                        tr.y[j] as f64
                    } else if tr.y[j] == 1 {
                        0.0
                    } else {
                        ws.t(s, j + 1, p)?
                    };
                    let rr_d = (1.0 - laws.d_hazard(j, zd, hv(j - 1))?) / g.denom(1.0 - laws.d_hazard(j, zy, hv(j - 1))?, "D survival under z_Y")?;
                    let pi = g.denom(laws.cr_prob(j, zy, hv(j - 1))?, "censoring/adherence propensity")?;
                    acc += omega[j - 1] * rr_d / pi * (obs_val - ws.a(s, j, p)?);
                }
            }
            if in_d && phi_prev {
                acc += lambda[j - 1] * (ws.c(s, j, q, d_group(j - 1))? - ws.t(s, j, q)?);
                if phi_j && tr.d[j] <= 1 {
                    let pi = g.denom(laws.cr_prob(j, zd, hv(j - 1))?, "censoring/adherence propensity")?;
                    let surv_d = 1.0 - tr.d[j] as f64;
                    acc += lambda[j - 1] * rr_ly(j - 1)? / pi * (ws.a(s, j, p)? * surv_d - ws.b(s, j, p)?);
                }
            }
        }
        *slot = acc;
    }
    Ok(out)
}

/// Plug-in curve plus the weighted mean of ν¹ per time.
pub fn one_step_curve(data: &TrialDataset, laws: &dyn LawSet, arm: ArmPair, opts: &EstimatorOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let ws = IfWorkspace::new(laws, arm, opts)?;
    let h = ws.horizon;
    let nu: Vec<f64> = (0..h).map(|s| ws.nu(s)).collect::<Result<_>>()?;
    let tw = data.total_weight();
    if tw <= 0.0 {
        return Err(Error::Input(vec!["empty dataset".into()]));
    }
    let mut corr = vec![0.0; h];
    for tr in data.trajectories() {
        let v = influence_contribution(&tr, &ws)?;
        for s in 0..h {
            corr[s] += tr.w * v[s];
        }
    }
    for c in &mut corr {
        *c /= tw;
    }
    let inc: Vec<f64> = nu.iter().zip(&corr).map(|(a, b)| a + b).collect();
    Ok((cumulative(&inc), corr))
}

// ---------------------------------------------------------------- reports

/// Run one estimator against an already fitted nuisance set.
pub fn estimate_with(data: &TrialDataset, nuis: &NuisanceSet, arm: ArmPair, kind: EstimatorKind, fingerprint: &str, opts: &EstimatorOptions) -> Result<EstimateReport> {
    let (curve, mut diag) = match kind {
        EstimatorKind::PlugIn => {
            let nu = g_formula_increments(nuis, arm, opts)?;
            (cumulative(&nu), Diagnostics::default())
        }
        EstimatorKind::WeightedY => weighted_y_curve(data, nuis, arm, opts)?,
        EstimatorKind::WeightedD => weighted_d_curve(data, nuis, arm, opts)?,
        EstimatorKind::OneStep => {
            let (c, corr) = one_step_curve(data, nuis, arm, opts)?;
            (c, Diagnostics { correction: Some(corr), ..Default::default() })
        }
    };
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit(format!("{} produced a non-finite risk", kind)));
    }
    if !nuis.all_converged() {
        diag.warnings.push("a nuisance fit did not converge".into());
    }
    if kind != EstimatorKind::OneStep && curve.windows(2).any(|w| w[1] < w[0] - 1e-12) {
        diag.warnings.push("risk curve decreases".into());
    }
    Ok(EstimateReport::new(arm, kind, curve, fingerprint.to_string(), diag))
}

/// Fit the nuisance set once and run every (arm, estimator) pair.
pub fn estimate_many(data: &TrialDataset, specs: &[ModelSpec], arms: &[ArmPair], kinds: &[EstimatorKind], opts: &EstimatorOptions) -> Result<Vec<EstimateReport>> {
    let nuis = fit_nuisance_set(data, specs, kinds)?;
    let fp = spec_fingerprint(specs);
    let mut out = Vec::new();
    for &arm in arms {
        for &k in kinds {
            out.push(estimate_with(data, &nuis, arm, k, &fp, opts)?);
        }
    }
    Ok(out)
}

pub fn estimate(data: &TrialDataset, specs: &[ModelSpec], arm: ArmPair, kind: EstimatorKind) -> Result<EstimateReport> {
    Ok(estimate_many(data, specs, &[arm], &[kind], &EstimatorOptions::default())?.remove(0))
}

pub fn plug_in_estimate(data: &TrialDataset, specs: &[ModelSpec], arm: ArmPair) -> Result<EstimateReport> {
    estimate(data, specs, arm, EstimatorKind::PlugIn)
}

pub fn weighted_y_estimate(data: &TrialDataset, specs: &[ModelSpec], arm: ArmPair) -> Result<EstimateReport> {
    estimate(data, specs, arm, EstimatorKind::WeightedY)
}

pub fn weighted_d_estimate(data: &TrialDataset, specs: &[ModelSpec], arm: ArmPair) -> Result<EstimateReport> {
    estimate(data, specs, arm, EstimatorKind::WeightedD)
}

pub fn one_step_estimate(data: &TrialDataset, specs: &[ModelSpec], arm: ArmPair) -> Result<EstimateReport> {
    estimate(data, specs, arm, EstimatorKind::OneStep)
}
