//! Segmentation loss: binary cross-entropy plus soft Dice.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probability clamp for the logarithms, `[ε, 1 − ε]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Additive smoothing in the Dice ratio; keeps empty masks defined.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

fn check_operands<T: Scalar>(g: &Graph<T>, pred: Var, label: Var) -> Result<()> {
    if g.shape(pred) != g.shape(label) {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(label).to_vec(),
        });
    }
    if g.value(label).data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("loss", "label must be binary"));
    }
    Ok(())
}

/// `−mean(y·ln p + (1 − y)·ln(1 − p))` on clamped probabilities.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, label: Var) -> Result<Var> {
    check_operands(g, pred, label)?;
    let p = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.rsub_scalar(1.0, p)?;
    let log_q = g.log(q)?;
    let pos = g.mul(label, log_p)?;
    let not_label = g.rsub_scalar(1.0, label)?;
    let neg = g.mul(not_label, log_q)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll)?;
    g.mul_scalar(mean, -1.0)
}

/// `1 − (2·Σ p·y + s) / (Σ p + Σ y + s)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, label: Var) -> Result<Var> {
    check_operands(g, pred, label)?;
    let overlap = g.mul(pred, label)?;
    let overlap = g.sum(overlap)?;
    let twice = g.mul_scalar(overlap, 2.0)?;
    let numerator = g.add_scalar(twice, DICE_SMOOTH)?;
    let sum_p = g.sum(pred)?;
    let sum_y = g.sum(label)?;
    let both = g.add(sum_p, sum_y)?;
    let denominator = g.add_scalar(both, DICE_SMOOTH)?;
    let ratio = g.div(numerator, denominator)?;
    g.rsub_scalar(1.0, ratio)
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, label: Var) -> Result<LossVars> {
    let bce = bce_loss(g, pred, label)?;
    let dice = dice_loss(g, pred, label)?;
    let total = g.add(bce, dice)?;
    Ok(LossVars { bce, dice, total })
}

impl LossTerms {
    pub fn compute<T: Scalar>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<Self> {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let y = g.constant(label.clone());
        let vars = total_loss(&mut g, p, y)?;
        Ok(Self::read(&g, &vars))
    }

    pub fn read<T: Scalar>(g: &Graph<T>, vars: &LossVars) -> Self {
        let get = |v: Var| g.value(v).data()[0].as_f64();
        LossTerms {
            bce: get(vars.bce),
            dice: get(vars.dice),
            total: get(vars.total),
        }
    }
}
