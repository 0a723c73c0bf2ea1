use std::fmt;
use std::str::FromStr;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Similarity used for supervised, feature and output-consistency losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    /// Huber-style loss with transition point 1.
    SmoothL1,
    Mse,
    Smape,
    /// Mean absolute error divided by a per-series in-sample scale.
    Mase,
}

impl LossKind {
    /// Kinds defined purely elementwise, usable on hidden features.
    pub fn is_elementwise(self) -> bool {
        matches!(self, LossKind::L1 | LossKind::SmoothL1 | LossKind::Mse)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::SmoothL1 => "smooth_l1",
            LossKind::Mse => "mse",
            LossKind::Smape => "smape",
            LossKind::Mase => "mase",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "smooth_l1" | "smoothl1" => Ok(LossKind::SmoothL1),
            "mse" | "l2" => Ok(LossKind::Mse),
            "smape" => Ok(LossKind::Smape),
            "mase" => Ok(LossKind::Mase),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

const SMOOTH_L1_BETA: f64 = 1.0;

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean-reduced loss between `a` and `b` plus its gradients w.r.t. both.
///
/// `scales` (MASE only) holds one divisor per row of the last axis.
pub(crate) fn loss_forward_backward<T: Scalar>(
    kind: LossKind,
    a: &[T],
    b: &[T],
    scales: Option<&[T]>,
) -> (T, Vec<T>, Vec<T>) {
    let n = a.len();
    let inv_n = T::one() / T::lit(n.max(1) as f64);
    let mut total = T::zero();
    let mut ga = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let row_len = scales.map(|s| n / s.len().max(1)).unwrap_or(1);
    for i in 0..n {
        let d = a[i] - b[i];
        let (value, da, db) = match kind {
            LossKind::L1 => (d.abs(), sign(d), -sign(d)),
            LossKind::SmoothL1 => {
                let beta = T::lit(SMOOTH_L1_BETA);
                if d.abs() < beta {
                    (T::lit(0.5) * d * d / beta, d / beta, -d / beta)
                } else {
                    (d.abs() - T::lit(0.5) * beta, sign(d), -sign(d))
                }
            }
            LossKind::Mse => (d * d, T::lit(2.0) * d, T::lit(-2.0) * d),
            LossKind::Smape => {
                let denom = a[i].abs() + b[i].abs();
                if denom == T::zero() {
                    (T::zero(), T::zero(), T::zero())
                } else {
                    let h = T::lit(200.0);
                    let ad = d.abs();
                    let sq = denom * denom;
                    (
                        h * ad / denom,
                        h * (sign(d) / denom - ad * sign(a[i]) / sq),
                        h * (-sign(d) / denom - ad * sign(b[i]) / sq),
                    )
                }
            }
            LossKind::Mase => {
                let s = scales.map(|s| s[i / row_len]).unwrap_or(T::one());
                (d.abs() / s, sign(d) / s, -sign(d) / s)
            }
        };
        total = total + value;
        ga[i] = da * inv_n;
        gb[i] = db * inv_n;
    }
    (total * inv_n, ga, gb)
}

/// Mean-reduced loss of `pred` against `target` as a scalar tensor.
///
/// MASE needs per-series scales and is only available on the tape
/// (see [`super::Tape::mase_loss`]).
pub fn elementwise_loss<T: Scalar>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("elementwise_loss", pred.shape(), target.shape()));
    }
    if kind == LossKind::Mase {
        return Err(Error::usage("MASE requires an in-sample scale"));
    }
    let (value, _, _) = loss_forward_backward(kind, pred.data(), target.data(), None);
    Ok(Tensor::scalar(value))
}
