//! Plain Adam (no weight decay) with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Scaling never changes direction. Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.norm() * g.norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One Adam update. Parameters without a gradient entry are untouched
/// only if their moments are zero (true for never-touched parameters).
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - BETA1), T::from_f64(1.0 - BETA2));
    let eps = T::from_f64(ADAM_EPS);
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);

    for (name, param) in params.iter_mut() {
        let zero;
        let grad = match grads.get(name) {
            Some(g) => {
                if g.shape() != param.shape() {
                    return Err(Error::contract(format!(
                        "gradient shape {:?} does not match parameter {name} {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
                g
            }
            None => {
                zero = Tensor::zeros(param.shape().to_vec());
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let pdata = param.data_mut();
        for (((p, &g), m), v) in
            pdata.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::from_f64s([3], &[3.0, 0.0, 4.0]).unwrap());
        let before = grads["a"].clone();
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after = &grads["a"];
        assert!((after.norm() - 1.0).abs() < 1e-12);
        for (b, a) in before.data().iter().zip(after.data()) {
            assert!((b * 0.2 - a).abs() < 1e-12, "clip must be scale-only");
        }
    }

    #[test]
    fn small_gradients_are_untouched() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::from_f64s([2], &[0.1, 0.2]).unwrap());
        let before = grads["a"].clone();
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(before.data(), grads["a"].data());
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("w".into(), Tensor::from_f64s([2], &[0.5, -0.25]).unwrap());
        let before = params["w"].clone();
        let mut state = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut params, &BTreeMap::new(), &mut state, 1e-3).unwrap();
        }
        assert_eq!(before.data(), params["w"].data());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("x".into(), Tensor::from_f64s([1], &[3.0]).unwrap());
        let mut state = AdamState::new();
        for _ in 0..3000 {
            let x = params["x"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_f64s([1], &[2.0 * x]).unwrap());
            adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        }
        assert!(params["x"].data()[0].abs() < 1e-2);
    }
}
