//! Helpers shared by the integration tests.
#![allow(dead_code)]

use sepeff::data::HistView;
use sepeff::laws::LawSet;
use sepeff::{ArmPair, Block};

/// Direct summation of the identification formula for one baseline and one
/// time-varying binary covariate over two intervals: explicit loops over the
/// event time, l_0 and l_1, returning (ν_0, ν_1).
pub fn flat_oracle(laws: &dyn LawSet, a: ArmPair) -> (f64, f64) {
    let (zy, zd) = (a.z_y, a.z_d);
    let mut nu0 = 0.0;
    let mut nu1 = 0.0;
    for l0 in [0.0, 1.0] {
        let b = [l0];
        let h0 = HistView::new(&b, &[], 0);
        let p0 = laws.l_prob(0, zd, HistView::EMPTY, Block::D, &b).unwrap() * laws.l_prob(0, zy, HistView::EMPTY, Block::Y, &b).unwrap();
        let d1 = laws.d_hazard(1, zd, h0).unwrap();
        let y1 = laws.y_hazard(1, zy, h0).unwrap();
        nu0 += p0 * (1.0 - d1) * y1;
        for l1 in [0.0, 1.0] {
            let v = [l1];
            let p1 = laws.l_prob(1, zd, h0, Block::D, &v).unwrap() * laws.l_prob(1, zy, h0, Block::Y, &v).unwrap();
            let h1 = HistView::new(&b, &v, 1);
            let d2 = laws.d_hazard(2, zd, h1).unwrap();
            let y2 = laws.y_hazard(2, zy, h1).unwrap();
            nu1 += p0 * (1.0 - d1) * (1.0 - y1) * p1 * (1.0 - d2) * y2;
        }
    }
    (nu0, nu1)
}
