use ndarray::{Array4, ArrayView4, Zip};
use serde::Serialize;

use crate::error::{shape, Result};

pub const LOSS_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    #[serde(skip)]
    pub gradient: Option<Array4<f64>>,
}

/// Mean binary cross-entropy over classes and voxels plus the squared-
/// denominator soft Dice loss. `p` is clamped to `[eps, 1 - eps]`; the
/// gradient is taken with respect to `p` and is zero where the clamp is active.
pub fn bce_dice_loss(p: ArrayView4<f64>, s: ArrayView4<f64>, with_gradient: bool) -> Result<LossValue> {
    if p.shape() != s.shape() {
        return Err(shape(format!("prediction {:?} vs target {:?}", p.shape(), s.shape())));
    }
    let count = p.len() as f64;
    let (mut ce, mut inter, mut pp, mut ss) = (0.0, 0.0, 0.0, 0.0);
    Zip::from(&p).and(&s).for_each(|&pv, &sv| {
        let q = pv.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        ce += sv * q.ln() + (1.0 - sv) * (1.0 - q).ln();
        inter += q * sv;
        pp += q * q;
        ss += sv * sv;
    });
    let bce = -ce / count;
    let union = pp + ss;
    let dice = 1.0 - 2.0 * inter / union;
    let gradient = with_gradient.then(|| {
        let mut g = Array4::<f64>::zeros(p.raw_dim());
        Zip::from(&mut g).and(&p).and(&s).for_each(|g, &pv, &sv| {
            if pv < LOSS_EPS || pv > 1.0 - LOSS_EPS {
                return;
            }
            let d_bce = -(sv / pv - (1.0 - sv) / (1.0 - pv)) / count;
            let d_dice = -2.0 * (sv * union - inter * 2.0 * pv) / (union * union);
            *g = d_bce + d_dice;
        });
        g
    });
    Ok(LossValue { total: bce + dice, bce, dice, gradient })
}
