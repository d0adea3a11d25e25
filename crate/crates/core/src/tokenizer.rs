//! Series → normalized, patched, masked token embeddings.
//!
//! Pipeline: per-series instance normalization (statistics over observed
//! positions only), left-padded non-overlapping patching, then a two-layer
//! SiLU MLP embedding of each `(patch, mask)` pair.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::series::Series;
use crate::tensor::Tensor;

/// Floor for the per-series standard deviation.
pub const SIGMA_EPS: f64 = 1e-5;

/// Normalized patches plus the metadata needed to undo normalization and
/// locate the true series end.
#[derive(Debug, Clone)]
pub struct PatchedInput<T> {
    /// `[n, patch]` normalized values; padded/missing slots are 0.
    pub patches: Tensor<T>,
    /// `[n, patch]`; 1 marks padded-or-missing, 0 marks observed.
    pub mask: Tensor<T>,
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub pad_len: usize,
}

/// Per-series standardization. Statistics use observed positions only;
/// sigma is the population standard deviation floored at [`SIGMA_EPS`].
/// Missing positions come out as 0.
pub fn instance_normalize<T: Scalar>(series: &Series) -> Result<(Vec<T>, f64, f64)> {
    if series.is_empty() {
        return Err(Error::contract("instance_normalize on empty series"));
    }
    let observed: Vec<f64> = series
        .values
        .iter()
        .zip(&series.observed)
        .filter(|(_, &obs)| obs)
        .map(|(&v, _)| v)
        .collect();
    if observed.is_empty() {
        return Err(Error::contract("instance_normalize: no observed values"));
    }
    let n = observed.len() as f64;
    let mu = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt().max(SIGMA_EPS);
    let normalized = series
        .values
        .iter()
        .zip(&series.observed)
        .map(|(&v, &obs)| if obs { T::from_f64((v - mu) / sigma) } else { T::zero() })
        .collect();
    Ok((normalized, mu, sigma))
}

/// Invert [`instance_normalize`] for model outputs.
pub fn denormalize(y: f64, mu: f64, sigma: f64) -> f64 {
    sigma * y + mu
}

/// Split into non-overlapping patches of size `patch`, left-padding with
/// zeros so the last real value lands in the final slot of the last patch.
pub fn patch<T: Scalar>(
    normalized: &[T],
    observed: &[bool],
    patch_size: usize,
    mu: f64,
    sigma: f64,
) -> Result<PatchedInput<T>> {
    patch_aligned(normalized, observed, patch_size, 1, mu, sigma)
}

/// [`patch`] with the patch count additionally rounded up to a multiple of
/// `align` (the block schedule's lcm), extending the left pad.
pub fn patch_aligned<T: Scalar>(
    normalized: &[T],
    observed: &[bool],
    patch_size: usize,
    align: usize,
    mu: f64,
    sigma: f64,
) -> Result<PatchedInput<T>> {
    if patch_size == 0 || align == 0 {
        return Err(Error::contract("patch size and alignment must be positive"));
    }
    let t = normalized.len();
    if t == 0 || t != observed.len() {
        return Err(Error::contract("patch: empty input or mask length mismatch"));
    }
    let n_raw = t.div_ceil(patch_size);
    let n = n_raw.div_ceil(align) * align;
    let padded = n * patch_size;
    let pad_len = padded - t;

    let mut patches = vec![T::zero(); padded];
    let mut mask = vec![T::zero(); padded];
    for slot in 0..padded {
        if slot < pad_len {
            mask[slot] = T::one();
        } else {
            let src = slot - pad_len;
            patches[slot] = normalized[src];
            if !observed[src] {
                mask[slot] = T::one();
            }
        }
    }
    Ok(PatchedInput {
        patches: Tensor::new(vec![n, patch_size], patches)?,
        mask: Tensor::new(vec![n, patch_size], mask)?,
        mu,
        sigma,
        n,
        pad_len,
    })
}

/// Convenience: normalize then patch a series in one go.
pub fn normalize_and_patch<T: Scalar>(
    series: &Series,
    patch_size: usize,
    align: usize,
) -> Result<PatchedInput<T>> {
    let (normalized, mu, sigma) = instance_normalize::<T>(series)?;
    patch_aligned(&normalized, &series.observed, patch_size, align, mu, sigma)
}

/// Graph node ids for the input embedding MLP (`2P → hidden → d`).
#[derive(Debug, Clone, Copy)]
pub struct EmbedWeights {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Embed `(patches, mask)` rows into token embeddings `[.., n, d]`.
/// Each token depends only on its own patch and mask row.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    patches: TensorId,
    mask: TensorId,
    weights: &EmbedWeights,
) -> Result<TensorId> {
    let joined = g.concat_last(patches, mask)?;
    let expect = g.value(weights.w1).shape()[0];
    if g.value(joined).last_dim() != expect {
        return Err(Error::Shape {
            op: "embed",
            detail: format!("embedding expects {expect} inputs, got {}", g.value(joined).last_dim()),
        });
    }
    let h = g.matmul(joined, weights.w1)?;
    let h = g.add_last(h, weights.b1)?;
    let h = g.silu(h)?;
    let out = g.matmul(h, weights.w2)?;
    g.add_last(out, weights.b2)
}
