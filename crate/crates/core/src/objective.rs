//! Cross-entropy, dynamic Huber and squared-error losses over censored
//! labels, and their weighted combination.

use htgnn_autograd::{BackwardContext, Function};
use htgnn_autograd::{Tape, Tensor, TensorError, Var, LOG_FLOOR};
use serde::Serialize;

use crate::error::{Error, Result};

/// Linear-interpolation percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Tensor(TensorError::Contract(
            "percentile of an empty set".into(),
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * a - 0.5 * delta * delta
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Batch δ: the 95th percentile of absolute residuals.
pub fn huber_delta(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let r: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).collect();
    percentile(&r, 0.95)
}

/// Mean Huber loss with the batch δ; returns `(loss, δ)`.
pub fn dynamic_huber(y: &[f64], y_hat: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Tensor(TensorError::Contract(format!(
            "dynamic Huber needs equal non-empty inputs ({} vs {})",
            y.len(),
            y_hat.len()
        ))));
    }
    let delta = huber_delta(y, y_hat)?;
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| huber(b - a, delta)).sum();
    Ok((total / y.len() as f64, delta))
}

/// Two-term binary cross-entropy summed over the batch.
pub fn binary_ce(c: &[f64], c_hat: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&t, &p) in c.iter().zip(c_hat) {
        // NaN is a diverged prediction, not a contract breach
        if p.is_nan() {
            return Ok(f64::NAN);
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Tensor(TensorError::Domain {
                op: "binary_ce",
                value: p,
            }));
        }
        total -= t * p.max(LOG_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(LOG_FLOOR).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Ce,
    Huber(f64),
    Squared,
}

/// Masked per-sample loss over a `[b × 1]` prediction, summed.
#[derive(Debug)]
struct MaskedLoss {
    kind: Kind,
    targets: Vec<f64>,
    mask: Vec<bool>,
}

impl MaskedLoss {
    fn value(&self, pred: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for ((&p, &y), &m) in pred.iter().zip(&self.targets).zip(&self.mask) {
            if !m {
                continue;
            }
            total += match self.kind {
                Kind::Ce => {
                    if p.is_nan() {
                        return Ok(f64::NAN);
                    }
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Tensor(TensorError::Domain {
                            op: "binary_ce",
                            value: p,
                        }));
                    }
                    -(y * p.max(LOG_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(LOG_FLOOR).ln())
                }
                Kind::Huber(d) => huber(p - y, d),
                Kind::Squared => 0.5 * (p - y) * (p - y),
            };
        }
        Ok(total)
    }
}

impl Function for MaskedLoss {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Ce => "binary_ce",
            Kind::Huber(_) => "huber",
            Kind::Squared => "squared_error",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let g = ctx.grad_output[0];
        let pred = ctx.inputs[0].data();
        let grad = pred
            .iter()
            .zip(&self.targets)
            .zip(&self.mask)
            .map(|((&p, &y), &m)| {
                if !m {
                    return 0.0;
                }
                g * match self.kind {
                    Kind::Ce => {
                        let a = if p > LOG_FLOOR { -y / p } else { 0.0 };
                        let b = if 1.0 - p > LOG_FLOOR {
                            (1.0 - y) / (1.0 - p)
                        } else {
                            0.0
                        };
                        a + b
                    }
                    Kind::Huber(d) => huber_grad(p - y, d),
                    Kind::Squared => p - y,
                }
            })
            .collect();
        Ok(vec![Some(grad)])
    }
}

fn masked_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[f64],
    mask: &[bool],
    kind: Kind,
) -> Result<Var> {
    let n = tape.value(pred).numel();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Tensor(TensorError::Shape {
            op: "masked_loss",
            lhs: tape.value(pred).shape().to_vec(),
            rhs: vec![targets.len()],
        }));
    }
    let op = MaskedLoss {
        kind,
        targets: targets.to_vec(),
        mask: mask.to_vec(),
    };
    let value = op.value(tape.value(pred).data())?;
    Ok(tape.apply(Box::new(op), &[pred], Tensor::scalar(value)))
}

/// Summed binary cross-entropy over rows with `mask` set.
pub fn ce_sum(tape: &mut Tape, probs: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
    masked_loss(tape, probs, targets, mask, Kind::Ce)
}

/// Summed Huber loss with a fixed δ over rows with `mask` set.
pub fn huber_sum(
    tape: &mut Tape,
    pred: Var,
    targets: &[f64],
    mask: &[bool],
    delta: f64,
) -> Result<Var> {
    masked_loss(tape, pred, targets, mask, Kind::Huber(delta))
}

/// Summed `½e²` over rows with `mask` set.
pub fn squared_sum(tape: &mut Tape, pred: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
    masked_loss(tape, pred, targets, mask, Kind::Squared)
}

/// Per-task loss components. Sums, not means: the assembly divides by the
/// batch size once.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskLoss {
    pub ce: f64,
    pub huber: f64,
    pub mse: f64,
    pub js: f64,
    pub delta: Option<f64>,
    pub labeled: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub tasks: Vec<TaskLoss>,
    pub batch: usize,
    pub total: f64,
}

/// `(1/n)(β₁ Σ js + β₂ Σ ce + β₃ Σ huber)`.
pub fn combine(js: &[f64], ce: &[f64], huber: &[f64], betas: [f64; 3], n: usize) -> f64 {
    let s = |v: &[f64]| v.iter().sum::<f64>();
    (betas[0] * s(js) + betas[1] * s(ce) + betas[2] * s(huber)) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(3.0, 1.0), 2.5);
    }

    #[test]
    fn percentile_interpolates() {
        let r: Vec<f64> = (1..=20).map(f64::from).collect();
        assert!((percentile(&r, 0.95).unwrap() - 19.05).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        assert!((binary_ce(&[1.0], &[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(binary_ce(&[1.0], &[1.0 - 1e-12]).unwrap() < 1e-11);
        assert!(binary_ce(&[1.0], &[1.5]).is_err());
        assert!(binary_ce(&[1.0], &[f64::NAN]).unwrap().is_nan());
    }
}
