//! Multi-head attention with grouped-query heads, rotary positions, and
//! the sparse mask patterns used by the block-attention stack.

use std::sync::Arc;

use crate::autodiff::{Graph, Mask, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ROPE_BASE: f64 = 10_000.0;

/// Attention patterns over a token sequence of length `n`.
///
/// Intra patterns act within contiguous blocks of `block_size` tokens;
/// the inter pattern connects tokens that share a within-block offset
/// ("lanes"), causally over the block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    IntraNonCausal,
    IntraCausal,
    InterStridedCausal,
    DenseCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub kind: MaskKind,
    pub block_size: usize,
}

impl AttentionMaskSpec {
    pub fn new(kind: MaskKind, block_size: usize) -> Self {
        AttentionMaskSpec { kind, block_size }
    }

    /// Mask applied inside the batched layout of this pattern (per block
    /// for intra, per lane for inter). `None` means fully visible.
    pub fn local_mask(&self, n: usize) -> Result<Option<Mask>> {
        let b = self.block_size;
        Ok(match self.kind {
            MaskKind::IntraNonCausal => None,
            MaskKind::IntraCausal => Some(Mask::causal(b)),
            MaskKind::InterStridedCausal => Some(Mask::causal(self.num_blocks(n)?)),
            MaskKind::DenseCausal => Some(Mask::causal(n)),
        })
    }

    /// Equivalent mask over the full flattened sequence, as a dense
    /// attention oracle sees it. Token t lives in block t/B at offset t%B.
    pub fn dense_mask(&self, n: usize) -> Result<Mask> {
        let b = self.block_size;
        if matches!(self.kind, MaskKind::IntraNonCausal | MaskKind::IntraCausal | MaskKind::InterStridedCausal) {
            self.num_blocks(n)?;
        }
        Ok(match self.kind {
            MaskKind::IntraNonCausal => Mask::from_fn(n, n, |i, j| i / b != j / b),
            MaskKind::IntraCausal => Mask::from_fn(n, n, |i, j| i / b != j / b || j > i),
            MaskKind::InterStridedCausal => {
                Mask::from_fn(n, n, |i, j| i % b != j % b || j / b > i / b)
            }
            MaskKind::DenseCausal => Mask::causal(n),
        })
    }

    pub fn num_blocks(&self, n: usize) -> Result<usize> {
        let b = self.block_size;
        if b == 0 || !n.is_multiple_of(b) {
            return Err(Error::contract(format!(
                "sequence length {n} is not divisible by block size {b}"
            )));
        }
        Ok(n / b)
    }

    /// Score pairs computed by this pattern's kernel per head: intra
    /// kernels compute full B×B score matrices per block, the lane kernel
    /// full M×M per lane, and a dense causal kernel only the visible
    /// triangle.
    pub fn score_pairs(&self, n: usize) -> Result<u64> {
        let b = self.block_size as u64;
        let n64 = n as u64;
        Ok(match self.kind {
            MaskKind::IntraNonCausal | MaskKind::IntraCausal => {
                self.num_blocks(n)?;
                n64 * b
            }
            MaskKind::InterStridedCausal => {
                self.num_blocks(n)?;
                n64 * n64 / b
            }
            MaskKind::DenseCausal => n64 * (n64 + 1) / 2,
        })
    }
}

/// Score pairs for one full block-attention layer (intra + inter) at
/// block size `b`: `n·B + n²/B`.
pub fn layer_pair_law(n: usize, b: usize) -> u64 {
    (n * b) as u64 + (n * n / b) as u64
}

/// Score pairs for a dense causal layer: `n(n+1)/2`.
pub fn dense_causal_pairs(n: usize) -> u64 {
    (n as u64) * (n as u64 + 1) / 2
}

/// Head layout: `h_q` query heads sharing `h_kv` key/value heads.
#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub d: usize,
    pub h_q: usize,
    pub h_kv: usize,
}

impl AttentionDims {
    pub fn new(d: usize, h_q: usize, h_kv: usize) -> Result<Self> {
        if h_q == 0 || h_kv == 0 || !h_q.is_multiple_of(h_kv) {
            return Err(Error::contract(format!(
                "query heads {h_q} must be a positive multiple of kv heads {h_kv}"
            )));
        }
        if !d.is_multiple_of(h_q) {
            return Err(Error::contract(format!("model dim {d} not divisible by {h_q} heads")));
        }
        if !(d / h_q).is_multiple_of(2) {
            return Err(Error::contract(format!(
                "head dim {} must be even for rotary rotation",
                d / h_q
            )));
        }
        Ok(AttentionDims { d, h_q, h_kv })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h_q
    }

    pub fn group(&self) -> usize {
        self.h_q / self.h_kv
    }
}

/// Projection weight ids: `wq [d, h_q·dh]`, `wk/wv [d, h_kv·dh]`,
/// `wo [h_q·dh, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

/// Scaled dot-product attention over `x [batch, s, d]`.
///
/// `positions[b*s + i]` is the rotary position of element `(b, i)`;
/// `mask` (if any) addresses the `[s, s]` score plane of every batch and
/// head. Returns the output and the number of score entries computed.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: &AttentionWeights,
    dims: &AttentionDims,
    mask: Option<&Arc<Mask>>,
    positions: &[usize],
) -> Result<(TensorId, u64)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != dims.d {
        return Err(Error::Shape {
            op: "multi_head_attention",
            detail: format!("expected [batch, s, {}], got {shape:?}", dims.d),
        });
    }
    let (batch, s) = (shape[0], shape[1]);
    if positions.len() != batch * s {
        return Err(Error::Shape {
            op: "multi_head_attention",
            detail: format!("{} positions for batch {batch} × s {s}", positions.len()),
        });
    }
    let dh = dims.head_dim();

    // Positions expanded over query heads: row (b, h, i) → positions[b*s+i].
    let mut head_positions = Vec::with_capacity(batch * dims.h_q * s);
    for b in 0..batch {
        for _ in 0..dims.h_q {
            head_positions.extend_from_slice(&positions[b * s..(b + 1) * s]);
        }
    }
    let head_positions = Arc::new(head_positions);

    let split = |g: &mut Graph<T>, proj: TensorId, heads: usize| -> Result<TensorId> {
        let r = g.reshape(proj, [batch, s, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };

    let q = g.matmul(x, w.wq)?;
    let q = split(g, q, dims.h_q)?;
    let k = g.matmul(x, w.wk)?;
    let k = split(g, k, dims.h_kv)?;
    let v = g.matmul(x, w.wv)?;
    let v = split(g, v, dims.h_kv)?;
    let (k, v) = if dims.group() > 1 {
        (g.repeat_interleave(k, 1, dims.group())?, g.repeat_interleave(v, 1, dims.group())?)
    } else {
        (k, v)
    };

    let q = g.rope(q, &head_positions, ROPE_BASE)?;
    let k = g.rope(k, &head_positions, ROPE_BASE)?;

    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => g.masked_fill(scores, m)?,
        None => scores,
    };
    let probs = g.softmax(scores)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, [batch, s, dims.h_q * dh])?;
    let out = g.matmul(ctx, w.wo)?;

    let entries = (batch * dims.h_q * s * s) as u64;
    Ok((out, entries))
}
