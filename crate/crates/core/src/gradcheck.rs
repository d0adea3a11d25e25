//! Central-finite-difference gradient checking.
//!
//! The checker is independent of the reverse pass it verifies: it only
//! re-evaluates the forward graph at perturbed leaf values. Intended for
//! 64-bit graphs; 32-bit precision is too coarse for step sizes near 1e-6.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative-error floor: entries where analytic and numeric gradients are
/// both below this magnitude are compared absolutely, which keeps central
/// differences' roundoff (~1e-10 at step 1e-6) from flagging dead paths.
const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per leaf, in leaf order.
    pub per_leaf: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_leaf.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Compare analytic gradients of the scalar produced by `build` against
/// central finite differences with the given step, for every element of
/// every leaf. `build` must be a pure function of the leaf values.
pub fn grad_check<T, F>(build: F, leaves: &[Tensor<T>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[TensorId]) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item()?.as_f64())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids)?;
    if !g.value(root).is_scalar() {
        return Err(Error::contract("grad_check target must be scalar"));
    }
    g.backward(root)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, leaf)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec())))
        .collect();

    let mut per_leaf = Vec::with_capacity(leaves.len());
    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let mut worst = 0.0f64;
        for ei in 0..leaf.numel() {
            let orig = leaf.data()[ei];
            work[li].data_mut()[ei] = orig + T::from_f64(step);
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - T::from_f64(step);
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[li].data()[ei].as_f64(), numeric);
            worst = worst.max(err);
        }
        per_leaf.push(worst);
    }
    let pass = per_leaf.iter().all(|&e| e <= tolerance);
    Ok(GradCheckReport { per_leaf, tolerance, pass })
}
