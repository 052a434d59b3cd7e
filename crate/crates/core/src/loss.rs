//! Soft Dice, binary cross-entropy and their weighted sum, on the tape.

use crate::autodiff::{Tape, Var};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` before logs.
pub const CE_CLAMP: f64 = 1e-7;

/// `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)` over the whole batch.
pub fn dice_loss<T: Real>(t: &mut Tape<T>, probs: Var, target: Var, eps: f64) -> Result<Var> {
    let inter = t.mul(probs, target)?;
    let inter = t.sum(inter);
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, eps);
    let sp = t.sum(probs);
    let sy = t.sum(target);
    let den = t.add(sp, sy)?;
    let den = t.add_scalar(den, eps);
    let ratio = t.div(num, den)?;
    let neg = t.scale(ratio, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Mean pixelwise binary cross-entropy.
pub fn ce_loss<T: Real>(t: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    let p = t.clamp(probs, CE_CLAMP, 1.0 - CE_CLAMP);
    let lp = t.log(p);
    let q = t.scale(p, -1.0);
    let q = t.add_scalar(q, 1.0);
    let lq = t.log(q);
    let ny = t.scale(target, -1.0);
    let ny = t.add_scalar(ny, 1.0);
    let a = t.mul(target, lp)?;
    let b = t.mul(ny, lq)?;
    let s = t.add(a, b)?;
    let m = t.mean(s);
    Ok(t.scale(m, -1.0))
}

/// Loss value with its two terms kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct HybridLoss {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `lambda_dice * dice + lambda_ce * ce`.
pub fn hybrid_loss<T: Real>(t: &mut Tape<T>, probs: Var, target: Var, cfg: &LossConfig) -> Result<HybridLoss> {
    if cfg.lambda_dice <= 0.0 && cfg.lambda_ce <= 0.0 {
        return Err(Error::config("lambda_dice and lambda_ce cannot both be zero"));
    }
    if t.shape(probs) != t.shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            t.shape(probs),
            t.shape(target)
        )));
    }
    let dice = dice_loss(t, probs, target, cfg.eps)?;
    let ce = ce_loss(t, probs, target)?;
    let a = t.scale(dice, cfg.lambda_dice);
    let b = t.scale(ce, cfg.lambda_ce);
    let total = t.add(a, b)?;
    Ok(HybridLoss { total, dice, ce })
}
