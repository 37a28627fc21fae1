//! The observed-data conditionals every estimator consumes, whether fitted
//! or known exactly.
//!
//! Conditioning sets, with φ_k(z) = {Z = z, C_k = 0, R̄_k = 1} and "alive
//! through k" meaning D_j = Y_j = 0 for j <= k:
//!
//! * `y_hazard(k)`: P(Y_k = 1 | φ_k(z), alive through k-1, D_k = 0, L̄_{k-1})
//! * `d_hazard(k)`: P(D_k = 1 | φ_k(z), alive through k-1, L̄_{k-1})
//! * `cr_prob(k)`: P(C_k = 0, R_k = 1 | φ_{k-1}(z), alive through k-1, L̄_{k-1})
//! * `l_prob(t, block)`: P(L_{block,t} | φ_t(z), alive through t, L̄_{t-1}),
//!   the Y block also conditioning on L_{D,t}. At t = 0 the history is empty
//!   and `cur` is the baseline vector.

use crate::data::{Block, HistView, Schema};
use crate::error::{Error, Result};

pub trait LawSet: Sync {
    fn schema(&self) -> &Schema;
    /// Number of follow-up intervals, K + 1.
    fn horizon(&self) -> usize;
    fn p_arm(&self, z: u8) -> f64;
    fn y_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64>;
    fn d_hazard(&self, k: usize, z: u8, h: HistView) -> Result<f64>;
    fn cr_prob(&self, k: usize, z: u8, h: HistView) -> Result<f64>;
    fn l_prob(&self, t: usize, z: u8, h: HistView, block: Block, cur: &[f64]) -> Result<f64>;
}

/// All values of the covariate vector at time `t`, with the D-block group
/// of each value.
#[derive(Debug, Clone)]
pub struct Combos {
    pub values: Vec<Vec<f64>>,
    pub group: Vec<usize>,
    pub n_groups: usize,
}

impl Combos {
    pub fn at(schema: &Schema, t: usize) -> Result<Combos> {
        let covs = schema.covs_at(t);
        let mut levels = Vec::with_capacity(covs.len());
        for &ci in &covs {
            let c = &schema.covariates[ci];
            match c.n_levels() {
                Some(n) => levels.push(n as usize),
                None => return Err(Error::Unsupported(format!("continuous covariate {} cannot be enumerated", c.name))),
            }
        }
        let total: usize = levels.iter().product();
        if total > 1 << 20 {
            return Err(Error::Unsupported(format!("{} covariate combinations at time {}", total, t)));
        }
        let d_pos = schema.block_positions(t, Block::D);
        let mut values = Vec::with_capacity(total);
        let mut group = Vec::with_capacity(total);
        let mut groups: Vec<Vec<u64>> = Vec::new();
        for mut idx in 0..total {
            let mut v = vec![0.0; levels.len()];
            for p in (0..levels.len()).rev() {
                v[p] = (idx % levels[p]) as f64;
                idx /= levels[p];
            }
            let key: Vec<u64> = d_pos.iter().map(|&p| v[p].to_bits()).collect();
            let g = match groups.iter().position(|k| *k == key) {
                Some(g) => g,
                None => {
                    groups.push(key);
                    groups.len() - 1
                }
            };
            group.push(g);
            values.push(v);
        }
        Ok(Combos { values, group, n_groups: groups.len() })
    }

    pub fn index_of(&self, v: &[f64]) -> Option<usize> {
        self.values.iter().position(|c| c.as_slice() == v)
    }
}

/// Joint probability of the full covariate vector at time t under the
/// component pair (z_Y for the Y block, z_D for the D block).
pub fn l_joint(laws: &dyn LawSet, t: usize, z_y: u8, z_d: u8, h: HistView, cur: &[f64]) -> Result<f64> {
    let pd = laws.l_prob(t, z_d, h, Block::D, cur)?;
    if pd == 0.0 {
        return Ok(0.0);
    }
    Ok(pd * laws.l_prob(t, z_y, h, Block::Y, cur)?)
}

/// Reject probabilities outside [0, 1].
pub fn checked(p: f64, what: &str) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Fit(format!("{} probability {} outside [0, 1]", what, p)))
    }
}
