//! Multi-head quantile prediction.
//!
//! One head per horizon: a two-layer SiLU MLP mapping each token embedding
//! to `horizon × |Q|` raw quantile outputs in normalized space. Training
//! consumes the raw outputs; inference denormalizes and repairs quantile
//! crossings by an ascending sort per time step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::denormalize;

/// Graph ids for one head's MLP (`d → d → horizon·|Q|`).
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Raw head outputs for `hl [batch, n, d]`, reshaped to
/// `[batch, n, horizon, n_quantiles]`.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    hl: TensorId,
    w: &HeadWeights,
    horizon: usize,
    n_quantiles: usize,
) -> Result<TensorId> {
    let shape = g.value(hl).shape().to_vec();
    let [batch, n, _] = shape[..] else {
        return Err(Error::Shape { op: "head_forward", detail: format!("{shape:?}") });
    };
    let h = g.matmul(hl, w.w1)?;
    let h = g.add_last(h, w.b1)?;
    let h = g.silu(h)?;
    let out = g.matmul(h, w.w2)?;
    let out = g.add_last(out, w.b2)?;
    if g.value(out).last_dim() != horizon * n_quantiles {
        return Err(Error::Shape {
            op: "head_forward",
            detail: format!(
                "head emits {} channels, expected {horizon}×{n_quantiles}",
                g.value(out).last_dim()
            ),
        });
    }
    g.reshape(out, [batch, n, horizon, n_quantiles])
}

/// Denormalized forecast grid issued from one token position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileForecast {
    /// `[horizon][quantile]`, non-decreasing along the quantile axis.
    pub values: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Token position the forecast was issued from.
    pub origin_index: usize,
    pub mu: f64,
    pub sigma: f64,
    pub quantile_levels: Vec<f64>,
}

impl QuantileForecast {
    /// Column for one quantile level across the horizon.
    pub fn quantile_track(&self, q_index: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[q_index]).collect()
    }

    /// Median track (levels are odd in count by construction: 0.1..0.9).
    pub fn median(&self) -> Vec<f64> {
        self.quantile_track(self.quantile_levels.len() / 2)
    }
}

/// Per-position forecast grids for one head: `[n][horizon][quantile]`,
/// denormalized and monotone along the quantile axis.
#[derive(Debug, Clone)]
pub struct PositionGrids {
    pub horizon: usize,
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Denormalize raw head output rows and sort each time step's quantile
/// vector ascending (crossing repair).
pub fn to_position_grids<T: Scalar>(
    raw: &crate::tensor::Tensor<T>,
    horizon: usize,
    n_quantiles: usize,
    mu: f64,
    sigma: f64,
) -> Result<PositionGrids> {
    let shape = raw.shape();
    let [batch, n, h, q] = shape[..] else {
        return Err(Error::Shape { op: "to_position_grids", detail: format!("{shape:?}") });
    };
    if batch != 1 || h != horizon || q != n_quantiles {
        return Err(Error::Shape {
            op: "to_position_grids",
            detail: format!("expected [1, n, {horizon}, {n_quantiles}], got {shape:?}"),
        });
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut per_step = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let base = (i * horizon + t) * n_quantiles;
            let mut row: Vec<f64> =
                raw.data()[base..base + n_quantiles].iter().map(|&v| denormalize(v.as_f64(), mu, sigma)).collect();
            row.sort_by(|a, b| a.partial_cmp(b).expect("finite forecast values"));
            per_step.push(row);
        }
        values.push(per_step);
    }
    Ok(PositionGrids { horizon, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn crossing_quantiles_are_emitted_sorted() {
        let raw = Tensor::<f64>::new([1, 1, 1, 3], vec![0.3, 0.1, 0.2]).unwrap();
        let grids = to_position_grids(&raw, 1, 3, 0.0, 1.0).unwrap();
        assert_eq!(grids.values[0][0], vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn grids_denormalize_with_series_stats() {
        let raw = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let grids = to_position_grids(&raw, 2, 2, 10.0, 2.0).unwrap();
        assert_eq!(grids.values[0][0], vec![10.0, 12.0]);
        assert_eq!(grids.values[0][1], vec![8.0, 11.0]);
    }
}
