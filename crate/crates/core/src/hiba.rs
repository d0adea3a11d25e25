//! The hierarchical interleaved block-attention stack.
//!
//! Each block runs four post-norm sublayers: non-causal attention within
//! blocks of `B` tokens, a gated FFN, causal attention along strided token
//! lanes across blocks, and a second FFN. Successive blocks cycle through
//! the schedule of block sizes, so the stack mixes information at several
//! granularities while keeping information flow causal at block-boundary
//! resolution.

use std::sync::Arc;

use crate::attention::{
    multi_head_attention, AttentionDims, AttentionWeights,
};
use crate::autodiff::{Graph, Mask, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-6;

/// Block sizes per layer, cycling a base pattern (default `(3, 7, 21)`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    pattern: Vec<usize>,
}

impl BlockSchedule {
    pub fn new(pattern: Vec<usize>) -> Result<Self> {
        if pattern.is_empty() || pattern.contains(&0) {
            return Err(Error::contract(format!("invalid block schedule {pattern:?}")));
        }
        Ok(BlockSchedule { pattern })
    }

    pub fn pattern(&self) -> &[usize] {
        &self.pattern
    }

    pub fn size_for_layer(&self, layer: usize) -> usize {
        self.pattern[layer % self.pattern.len()]
    }

    /// Least common multiple of all block sizes; sequence lengths must be
    /// padded to a multiple of this.
    pub fn lcm(&self) -> usize {
        self.pattern.iter().copied().fold(1, lcm)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Block index and within-block offset of a token (all 0-based).
pub fn partition_index(token: usize, block_size: usize) -> (usize, usize) {
    (token / block_size, token % block_size)
}

/// View `[batch, n, d]` as `[batch, M, B, d]`. Pure reshape; block j holds
/// tokens `j·B .. (j+1)·B`.
pub fn partition<T: Scalar>(g: &mut Graph<T>, h: TensorId, block_size: usize) -> Result<TensorId> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape { op: "partition", detail: format!("expected rank 3, got {shape:?}") });
    }
    let (batch, n, d) = (shape[0], shape[1], shape[2]);
    if block_size == 0 || n % block_size != 0 {
        return Err(Error::contract(format!(
            "partition: sequence length {n} not divisible by block size {block_size}"
        )));
    }
    g.reshape(h, [batch, n / block_size, block_size, d])
}

/// Gated FFN weight ids: `gate/up [d, d_ff]`, `down [d_ff, d]`.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub gate: TensorId,
    pub up: TensorId,
    pub down: TensorId,
}

/// GLU feed-forward: `down( silu(x·gate) ⊙ (x·up) )`.
pub fn ffn<T: Scalar>(g: &mut Graph<T>, x: TensorId, w: &FfnWeights) -> Result<TensorId> {
    let gated = g.matmul(x, w.gate)?;
    let gated = g.silu(gated)?;
    let lifted = g.matmul(x, w.up)?;
    let prod = g.mul(gated, lifted)?;
    g.matmul(prod, w.down)
}

/// Weight ids for one full block: two attentions, two FFNs, four norms.
#[derive(Debug, Clone, Copy)]
pub struct HibaBlockWeights {
    pub intra: AttentionWeights,
    pub inter: AttentionWeights,
    pub ffn1: FfnWeights,
    pub ffn2: FfnWeights,
    pub norms: [TensorId; 4],
}

/// Architecture rewirings used by the ablation study.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockWiring {
    /// Replace each (attention, FFN) sublayer pair with a dense causal
    /// attention + FFN pair over the whole sequence.
    pub standard_attention: bool,
    /// Causal instead of non-causal attention inside blocks.
    pub causal_intra: bool,
    /// Normalize before each sublayer instead of after the residual add.
    pub prenorm: bool,
}

/// Per-layer score-entry accounting, normalized per window and per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub block_size: usize,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.intra_pairs + self.inter_pairs
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardStats {
    pub layers: Vec<LayerCost>,
}

impl ForwardStats {
    pub fn total_pairs(&self) -> u64 {
        self.layers.iter().map(LayerCost::total).sum()
    }
}

/// Intra-block attention on the blocked view `[batch, M, B, d]`. Rotary
/// positions use the absolute token index.
pub fn intra_attention<T: Scalar>(
    g: &mut Graph<T>,
    blocked: TensorId,
    w: &AttentionWeights,
    dims: &AttentionDims,
    causal: bool,
) -> Result<(TensorId, u64)> {
    let shape = g.value(blocked).shape().to_vec();
    let [batch, m, b, d] = shape[..] else {
        return Err(Error::Shape { op: "intra_attention", detail: format!("{shape:?}") });
    };
    let flat = g.reshape(blocked, [batch * m, b, d])?;
    let mut positions = Vec::with_capacity(batch * m * b);
    for bm in 0..batch * m {
        let block = bm % m;
        for offset in 0..b {
            positions.push(block * b + offset);
        }
    }
    let mask = if causal { Some(Arc::new(Mask::causal(b))) } else { None };
    let (out, entries) = multi_head_attention(g, flat, w, dims, mask.as_ref(), &positions)?;
    let out = g.reshape(out, [batch, m, b, d])?;
    Ok((out, entries / (batch * dims.h_q) as u64))
}

/// Inter-block attention on the blocked view `[batch, M, B, d]`: tokens
/// sharing a within-block offset attend causally over the block index.
/// Rotary positions use the block index.
pub fn inter_attention<T: Scalar>(
    g: &mut Graph<T>,
    blocked: TensorId,
    w: &AttentionWeights,
    dims: &AttentionDims,
) -> Result<(TensorId, u64)> {
    let shape = g.value(blocked).shape().to_vec();
    let [batch, m, b, d] = shape[..] else {
        return Err(Error::Shape { op: "inter_attention", detail: format!("{shape:?}") });
    };
    let lanes = g.permute(blocked, &[0, 2, 1, 3])?; // [batch, B, M, d]
    let flat = g.reshape(lanes, [batch * b, m, d])?;
    let mut positions = Vec::with_capacity(batch * b * m);
    for _ in 0..batch * b {
        positions.extend(0..m);
    }
    let mask = Arc::new(Mask::causal(m));
    let (out, entries) = multi_head_attention(g, flat, w, dims, Some(&mask), &positions)?;
    let out = g.reshape(out, [batch, b, m, d])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((out, entries / (batch * dims.h_q) as u64))
}

/// Dense causal attention over the whole sequence `[batch, n, d]`.
pub fn dense_causal_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: &AttentionWeights,
    dims: &AttentionDims,
) -> Result<(TensorId, u64)> {
    let shape = g.value(x).shape().to_vec();
    let [batch, n, _] = shape[..] else {
        return Err(Error::Shape { op: "dense_causal_attention", detail: format!("{shape:?}") });
    };
    let mut positions = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        positions.extend(0..n);
    }
    let mask = Arc::new(Mask::causal(n));
    let (out, entries) = multi_head_attention(g, x, w, dims, Some(&mask), &positions)?;
    Ok((out, entries / (batch * dims.h_q) as u64))
}

fn sublayer<T: Scalar, F>(
    g: &mut Graph<T>,
    x: TensorId,
    gain: TensorId,
    prenorm: bool,
    inner: F,
) -> Result<TensorId>
where
    F: FnOnce(&mut Graph<T>, TensorId) -> Result<TensorId>,
{
    let eps = T::from_f64(RMS_EPS);
    if prenorm {
        let normed = g.rms_norm(x, gain, eps)?;
        let y = inner(g, normed)?;
        g.add(x, y)
    } else {
        let y = inner(g, x)?;
        let sum = g.add(x, y)?;
        g.rms_norm(sum, gain, eps)
    }
}

/// One full block on `[batch, n, d]`: attention → residual+norm → FFN →
/// residual+norm, twice (intra then inter; or dense twice under the
/// standard-attention rewiring).
pub fn hiba_block<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: &HibaBlockWeights,
    block_size: usize,
    dims: &AttentionDims,
    wiring: &BlockWiring,
) -> Result<(TensorId, LayerCost)> {
    let shape = g.value(x).shape().to_vec();
    let [batch, n, d] = shape[..] else {
        return Err(Error::Shape { op: "hiba_block", detail: format!("{shape:?}") });
    };
    let mut intra_pairs = 0;
    let mut inter_pairs = 0;

    let h1 = sublayer(g, x, w.norms[0], wiring.prenorm, |g, inp| {
        if wiring.standard_attention {
            let (out, pairs) = dense_causal_attention(g, inp, &w.intra, dims)?;
            intra_pairs = pairs;
            Ok(out)
        } else {
            let blocked = partition(g, inp, block_size)?;
            let (out, pairs) = intra_attention(g, blocked, &w.intra, dims, wiring.causal_intra)?;
            intra_pairs = pairs;
            g.reshape(out, [batch, n, d])
        }
    })?;
    let h2 = sublayer(g, h1, w.norms[1], wiring.prenorm, |g, inp| ffn(g, inp, &w.ffn1))?;
    let h3 = sublayer(g, h2, w.norms[2], wiring.prenorm, |g, inp| {
        if wiring.standard_attention {
            let (out, pairs) = dense_causal_attention(g, inp, &w.inter, dims)?;
            inter_pairs = pairs;
            Ok(out)
        } else {
            let blocked = partition(g, inp, block_size)?;
            let (out, pairs) = inter_attention(g, blocked, &w.inter, dims)?;
            inter_pairs = pairs;
            g.reshape(out, [batch, n, d])
        }
    })?;
    let h4 = sublayer(g, h3, w.norms[3], wiring.prenorm, |g, inp| ffn(g, inp, &w.ffn2))?;

    Ok((h4, LayerCost { block_size, intra_pairs, inter_pairs }))
}

/// Apply `L` blocks with block sizes from the cycled schedule.
pub fn hiba_forward<T: Scalar>(
    g: &mut Graph<T>,
    h0: TensorId,
    blocks: &[HibaBlockWeights],
    schedule: &BlockSchedule,
    dims: &AttentionDims,
    wiring: &BlockWiring,
) -> Result<(TensorId, ForwardStats)> {
    let n = match g.value(h0).shape() {
        [_, n, _] => *n,
        other => {
            return Err(Error::Shape { op: "hiba_forward", detail: format!("{other:?}") });
        }
    };
    if !wiring.standard_attention && n % schedule.lcm() != 0 {
        return Err(Error::contract(format!(
            "sequence length {n} is not a multiple of the schedule lcm {}",
            schedule.lcm()
        )));
    }
    let mut h = h0;
    let mut stats = ForwardStats::default();
    for (l, w) in blocks.iter().enumerate() {
        let b = schedule.size_for_layer(l);
        let (next, cost) = hiba_block(g, h, w, b, dims, wiring)?;
        h = next;
        stats.layers.push(cost);
    }
    Ok((h, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::layer_pair_law;
    use crate::rng::Prng;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_cycles_and_lcm() {
        let s = BlockSchedule::new(vec![3, 7, 21]).unwrap();
        assert_eq!(s.lcm(), 21);
        assert_eq!(s.size_for_layer(0), 3);
        assert_eq!(s.size_for_layer(4), 7);
        assert_eq!(s.size_for_layer(23), 21);
        assert!(BlockSchedule::new(vec![]).is_err());
        assert!(BlockSchedule::new(vec![3, 0]).is_err());
    }

    #[test]
    fn partition_arithmetic() {
        assert_eq!(336 / 3, 112);
        assert_eq!(336 / 21, 16);
        // Token 100 (1-indexed) at B=7 → block 15, offset 2 (1-indexed).
        let (block, offset) = partition_index(99, 7);
        assert_eq!((block + 1, offset + 1), (15, 2));
    }

    #[test]
    fn partition_is_a_pure_reshape() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let h = g.constant(Tensor::new([1, 6, 4], vals.clone()).unwrap());
        let blocked = partition(&mut g, h, 3).unwrap();
        assert_eq!(g.value(blocked).shape(), &[1, 2, 3, 4]);
        assert_eq!(g.value(blocked).data(), &vals[..]);
        assert!(partition(&mut g, h, 4).is_err(), "6 % 4 != 0 must violate the contract");
    }

    fn rand_weights(
        g: &mut Graph<f64>,
        dims: &AttentionDims,
        rng: &mut Prng,
    ) -> AttentionWeights {
        let dh = dims.head_dim();
        let std = 1.0 / (dims.d as f64).sqrt();
        AttentionWeights {
            wq: g.constant(Tensor::randn([dims.d, dims.h_q * dh], std, rng)),
            wk: g.constant(Tensor::randn([dims.d, dims.h_kv * dh], std, rng)),
            wv: g.constant(Tensor::randn([dims.d, dims.h_kv * dh], std, rng)),
            wo: g.constant(Tensor::randn([dims.h_q * dh, dims.d], std, rng)),
        }
    }

    /// With one token per block, softmax over a single position is 1, so
    /// intra attention reduces to the value/output projection path.
    #[test]
    fn single_token_blocks_reduce_to_value_path() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let mut rng = Prng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let w = rand_weights(&mut g, &dims, &mut rng);
        let x = g.constant(Tensor::randn([1, 4, 8], 1.0, &mut rng));
        let blocked = partition(&mut g, x, 1).unwrap();
        let (out, _) = intra_attention(&mut g, blocked, &w, &dims, false).unwrap();
        let out = g.reshape(out, [1usize, 4, 8]).unwrap();

        let v = g.matmul(x, w.wv).unwrap();
        let vo = {
            // kv heads repeat across query groups, then project out.
            let r = g.reshape(v, [1usize, 4, 1, 4]).unwrap();
            let p = g.permute(r, &[0, 2, 1, 3]).unwrap();
            let rep = g.repeat_interleave(p, 1, 2).unwrap();
            let back = g.permute(rep, &[0, 2, 1, 3]).unwrap();
            let flat = g.reshape(back, [1usize, 4, 8]).unwrap();
            g.matmul(flat, w.wo).unwrap()
        };
        assert!(g.value(out).max_abs_diff(g.value(vo)) < 1e-12);
    }

    /// Identical block contents give identical per-block outputs. Rotary
    /// rotation preserves this: scores depend only on relative positions,
    /// which repeat from block to block.
    #[test]
    fn identical_blocks_produce_identical_outputs() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let mut rng = Prng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let w = rand_weights(&mut g, &dims, &mut rng);
        let block: Vec<f64> = (0..3 * 8).map(|_| rng.normal()).collect();
        let mut data = block.clone();
        data.extend_from_slice(&block);
        let x = g.constant(Tensor::new([1, 6, 8], data).unwrap());
        let blocked = partition(&mut g, x, 3).unwrap();
        let (out, _) = intra_attention(&mut g, blocked, &w, &dims, false).unwrap();
        let o = g.value(out);
        for (a, b) in o.data()[..24].iter().zip(&o.data()[24..]) {
            assert!((a - b).abs() < 1e-9, "identical blocks must produce identical outputs");
        }
    }

    /// With M=1 every lane holds a single token: inter attention reduces
    /// to the value/output projection path.
    #[test]
    fn single_block_lanes_are_identity_attention() {
        let dims = AttentionDims::new(8, 2, 2).unwrap();
        let mut rng = Prng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let w = rand_weights(&mut g, &dims, &mut rng);
        let x = g.constant(Tensor::randn([1, 5, 8], 1.0, &mut rng));
        let blocked = partition(&mut g, x, 5).unwrap(); // M = 1
        let (out, _) = inter_attention(&mut g, blocked, &w, &dims).unwrap();
        let out = g.reshape(out, [1usize, 5, 8]).unwrap();
        let v = g.matmul(x, w.wv).unwrap();
        let vo = g.matmul(v, w.wo).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(vo)) < 1e-12);
    }

    /// Lanes with equal contents produce equal outputs (lane independence).
    #[test]
    fn equal_lanes_produce_equal_outputs() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let mut rng = Prng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let w = rand_weights(&mut g, &dims, &mut rng);
        // Every token inside a block identical → all B lanes identical.
        let mut data = Vec::new();
        for _ in 0..4 {
            let tok: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            for _ in 0..3 {
                data.extend_from_slice(&tok);
            }
        }
        let x = g.constant(Tensor::new([1, 12, 8], data).unwrap());
        let blocked = partition(&mut g, x, 3).unwrap();
        let (out, _) = inter_attention(&mut g, blocked, &w, &dims).unwrap();
        let o = g.value(out);
        for block in 0..4 {
            let base = &o.data()[block * 24..block * 24 + 8];
            for offset in 1..3 {
                let lane = &o.data()[block * 24 + offset * 8..block * 24 + (offset + 1) * 8];
                for (a, b) in base.iter().zip(lane) {
                    assert!((a - b).abs() < 1e-12, "lanes with equal contents must agree");
                }
            }
        }
    }

    fn rand_block_weights(
        g: &mut Graph<f64>,
        dims: &AttentionDims,
        d_ff: usize,
        rng: &mut Prng,
    ) -> HibaBlockWeights {
        let std = 1.0 / (dims.d as f64).sqrt();
        HibaBlockWeights {
            intra: rand_weights(g, dims, rng),
            inter: rand_weights(g, dims, rng),
            ffn1: FfnWeights {
                gate: g.constant(Tensor::randn([dims.d, d_ff], std, rng)),
                up: g.constant(Tensor::randn([dims.d, d_ff], std, rng)),
                down: g.constant(Tensor::randn([d_ff, dims.d], std, rng)),
            },
            ffn2: FfnWeights {
                gate: g.constant(Tensor::randn([dims.d, d_ff], std, rng)),
                up: g.constant(Tensor::randn([dims.d, d_ff], std, rng)),
                down: g.constant(Tensor::randn([d_ff, dims.d], std, rng)),
            },
            norms: [
                g.constant(Tensor::ones([dims.d])),
                g.constant(Tensor::ones([dims.d])),
                g.constant(Tensor::ones([dims.d])),
                g.constant(Tensor::ones([dims.d])),
            ],
        }
    }

    /// Zeroed output/down projections leave only the residual path: the
    /// block acts as four successive RMS norms.
    #[test]
    fn zeroed_projections_reduce_to_norm_chain() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let mut rng = Prng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let mut w = rand_block_weights(&mut g, &dims, 16, &mut rng);
        let zero_o = g.constant(Tensor::zeros([8, 8]));
        let zero_down = g.constant(Tensor::zeros([16, 8]));
        w.intra.wo = zero_o;
        w.inter.wo = zero_o;
        w.ffn1.down = zero_down;
        w.ffn2.down = zero_down;

        let x = g.constant(Tensor::randn([1, 6, 8], 1.0, &mut rng));
        let (out, _) = hiba_block(&mut g, x, &w, 3, &dims, &BlockWiring::default()).unwrap();

        let mut h = x;
        for i in 0..4 {
            h = g.rms_norm(h, w.norms[i], RMS_EPS).unwrap();
        }
        assert!(g.value(out).max_abs_diff(g.value(h)) < 1e-12);
    }

    #[test]
    fn block_preserves_shape_and_counts_pairs() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let mut rng = Prng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let w = rand_block_weights(&mut g, &dims, 16, &mut rng);
        let x = g.constant(Tensor::randn([2, 21, 8], 1.0, &mut rng));
        let (out, cost) = hiba_block(&mut g, x, &w, 7, &dims, &BlockWiring::default()).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 21, 8]);
        assert_eq!(cost.total(), layer_pair_law(21, 7));
    }

    #[test]
    fn empty_stack_is_identity() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let schedule = BlockSchedule::new(vec![3, 7, 21]).unwrap();
        let mut rng = Prng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn([1, 21, 8], 1.0, &mut rng));
        let (out, stats) =
            hiba_forward(&mut g, x, &[], &schedule, &dims, &BlockWiring::default()).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
        assert_eq!(stats.total_pairs(), 0);
    }

    #[test]
    fn forward_uses_cycled_block_sizes() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let schedule = BlockSchedule::new(vec![3, 7, 21]).unwrap();
        let mut rng = Prng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let blocks: Vec<HibaBlockWeights> =
            (0..6).map(|_| rand_block_weights(&mut g, &dims, 16, &mut rng)).collect();
        let x = g.constant(Tensor::randn([1, 21, 8], 1.0, &mut rng));
        let (_, stats) =
            hiba_forward(&mut g, x, &blocks, &schedule, &dims, &BlockWiring::default()).unwrap();
        let sizes: Vec<usize> = stats.layers.iter().map(|c| c.block_size).collect();
        assert_eq!(sizes, vec![3, 7, 21, 3, 7, 21]);
        for cost in &stats.layers {
            assert_eq!(cost.total(), layer_pair_law(21, cost.block_size));
        }
    }

    #[test]
    fn misaligned_length_is_rejected() {
        let dims = AttentionDims::new(8, 2, 1).unwrap();
        let schedule = BlockSchedule::new(vec![3, 7, 21]).unwrap();
        let mut rng = Prng::seed_from_u64(8);
        let mut g = Graph::<f64>::new();
        let blocks = vec![rand_block_weights(&mut g, &dims, 16, &mut rng)];
        let x = g.constant(Tensor::randn([1, 20, 8], 1.0, &mut rng));
        assert!(hiba_forward(&mut g, x, &blocks, &schedule, &dims, &BlockWiring::default()).is_err());
    }
}
