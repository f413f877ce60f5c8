//! Pixel-level and region-level supervision and the weighted generator
//! objective.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Element;

pub const PROB_EPS: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub iou: f64,
    pub mcm: f64,
    pub adv: f64,
    /// Discriminator weight.
    pub disc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 30.0,
            iou: 0.5,
            mcm: 3.0,
            adv: 10.0,
            disc: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda1", self.bce),
            ("lambda2", self.iou),
            ("lambda3", self.mcm),
            ("lambda4", self.adv),
            ("lambda5", self.disc),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} = {w} must be a finite nonnegative weight")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities `pred` (clamped into
/// `[1e-7, 1 - 1e-7]`) against targets `gt` in `[0, 1]`.
pub fn bce_loss<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(shape_err!("bce_loss: pred {:?} vs gt {:?}", tape.shape(pred), tape.shape(gt)));
    }
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log_clamped(p, 0.0);
    let q = tape.rsub_scalar(p, 1.0);
    let log_q = tape.log_clamped(q, 0.0);
    let not_gt = tape.rsub_scalar(gt, 1.0);
    let pos = tape.mul(gt, log_p)?;
    let neg = tape.mul(not_gt, log_q)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both);
    Ok(tape.scale(m, -1.0))
}

/// `1 - mean_b sum(Y * P) / (sum(Y + P - Y * P) + eps)` with sums per image.
pub fn iou_loss<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != tape.shape(gt) || s.is_empty() {
        return Err(shape_err!("iou_loss: pred {:?} vs gt {:?}", s, tape.shape(gt)));
    }
    let b = s[0];
    let rest: usize = s[1..].iter().product();
    let p = tape.reshape(pred, &[b, rest])?;
    let y = tape.reshape(gt, &[b, rest])?;
    let inter = tape.mul(p, y)?;
    let py = tape.add(p, y)?;
    let union = tape.sub(py, inter)?;
    let inter = tape.sum_axis(inter, 1)?;
    let union = tape.sum_axis(union, 1)?;
    let union = tape.add_scalar(union, IOU_EPS);
    let iou = tape.div(inter, union)?;
    let m = tape.mean(iou);
    Ok(tape.rsub_scalar(m, 1.0))
}

/// Scalar components of the generator objective; disabled modules are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub bce: Var,
    pub iou: Var,
    pub mcm: Option<Var>,
    pub adv: Option<Var>,
}

/// `l1 * bce + l2 * iou + l3 * mcm + l4 * adv`. Terms with zero weight are
/// left out of the graph entirely.
pub fn total_generator_loss<T: Element>(tape: &mut Tape<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        ("L_BCE", Some(parts.bce), w.bce),
        ("L_IoU", Some(parts.iou), w.iou),
        ("L_MCM", parts.mcm, w.mcm),
        ("L_adv", parts.adv, w.adv),
    ];
    let mut total: Option<Var> = None;
    for (name, var, weight) in terms {
        let Some(v) = var else { continue };
        let value = tape.value(v);
        if value.numel() != 1 {
            return Err(shape_err!("total_generator_loss: {name} is not a scalar"));
        }
        if !value.item().f64().is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is not finite")));
        }
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn var(tape: &mut Tape<f64>, shape: &[usize], v: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape, v).unwrap())
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let p = var(&mut tape, &[1, 1, 2, 2], vec![0.5; 4]);
        let g = var(&mut tape, &[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let l = bce_loss(&mut tape, p, g).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_loss(&mut tape, g, g).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn iou_closed_forms() {
        let mut tape = Tape::new();
        let ones = var(&mut tape, &[1, 1, 2, 2], vec![1.0; 4]);
        let half = var(&mut tape, &[1, 1, 2, 2], vec![0.5; 4]);
        let l = iou_loss(&mut tape, half, ones).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-6);
        let a = var(&mut tape, &[1, 1, 1, 2], vec![1.0, 0.0]);
        let b = var(&mut tape, &[1, 1, 1, 2], vec![0.0, 1.0]);
        let l = iou_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_sum_and_errors() {
        let mut tape = Tape::<f64>::new();
        let one = tape.scalar(1.0);
        let parts = LossParts {
            bce: one,
            iou: one,
            mcm: Some(one),
            adv: Some(one),
        };
        let t = total_generator_loss(&mut tape, &parts, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(t).item(), 43.5);
        let nan = tape.scalar(f64::NAN);
        let bad = LossParts { adv: Some(nan), ..parts };
        let err = total_generator_loss(&mut tape, &bad, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("L_adv"));
    }
}
