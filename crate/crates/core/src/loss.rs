//! Quantile (pinball) loss over masked multi-horizon targets.
//!
//! Losses are computed in normalized space. The normalizer counts only
//! valid `(position, step, quantile)` triples, so padded or unobserved
//! targets never dilute the value.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Targets for one head, aligned so the forecast from token `i` at step
/// `t` compares against the series value `i·P + t` (padded coordinates).
#[derive(Debug, Clone)]
pub struct HeadTargets<T> {
    pub horizon: usize,
    /// `[batch, n, horizon]` normalized target values (0 where invalid).
    pub values: Tensor<T>,
    /// `[batch, n, horizon]`; 1 marks a usable target.
    pub valid: Tensor<T>,
}

impl<T: Scalar> HeadTargets<T> {
    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|v| **v > T::zero()).count()
    }
}

/// Mean pinball loss for one head:
/// `q·(x−x̂)` where `x̂ ≤ x`, else `(1−q)·(x̂−x)`, averaged over valid
/// `(i, t, q)` triples.
pub fn quantile_loss<T: Scalar>(
    g: &mut Graph<T>,
    predictions: TensorId,
    targets: &HeadTargets<T>,
    quantiles: &[f64],
) -> Result<TensorId> {
    let shape = g.value(predictions).shape().to_vec();
    let [batch, n, horizon, nq] = shape[..] else {
        return Err(Error::Shape { op: "quantile_loss", detail: format!("{shape:?}") });
    };
    if horizon != targets.horizon || targets.values.shape() != [batch, n, horizon] {
        return Err(Error::Shape {
            op: "quantile_loss",
            detail: format!(
                "targets {:?} do not align with predictions {shape:?}",
                targets.values.shape()
            ),
        });
    }
    if nq != quantiles.len() {
        return Err(Error::Shape {
            op: "quantile_loss",
            detail: format!("{nq} prediction quantiles vs {} levels", quantiles.len()),
        });
    }
    let valid_triples = targets.valid_count() * nq;
    if valid_triples == 0 {
        return Err(Error::contract("quantile_loss: no valid targets"));
    }

    // Repeat targets and validity along a new quantile axis.
    let rep = |src: &Tensor<T>| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(src.numel() * nq);
        for &v in src.data() {
            for _ in 0..nq {
                data.push(v);
            }
        }
        Tensor::new(vec![batch, n, horizon, nq], data)
    };
    let target_rep = g.constant(rep(&targets.values)?);
    let valid_rep = g.constant(rep(&targets.valid)?);
    let q_vec = g.constant(Tensor::from_f64s([nq], quantiles)?);
    let q_minus_one =
        g.constant(Tensor::from_f64s([nq], &quantiles.iter().map(|q| q - 1.0).collect::<Vec<_>>())?);

    let diff = g.sub(target_rep, predictions)?;
    let lo = g.mul_last(diff, q_vec)?;
    let hi = g.mul_last(diff, q_minus_one)?;
    let pinball = g.maximum(lo, hi)?;
    let masked = g.mul(pinball, valid_rep)?;
    let sum = g.sum_all(masked)?;
    g.mul_scalar(sum, T::from_f64(1.0 / valid_triples as f64))
}

/// Average of per-head losses.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, per_head: &[TensorId]) -> Result<TensorId> {
    if per_head.is_empty() {
        return Err(Error::contract("total_loss requires at least one head"));
    }
    let mut acc = per_head[0];
    for &l in &per_head[1..] {
        acc = g.add(acc, l)?;
    }
    g.mul_scalar(acc, T::from_f64(1.0 / per_head.len() as f64))
}
