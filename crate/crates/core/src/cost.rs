//! Attention-cost instrumentation and the bench report.
//!
//! The counting kernels are single-head reference implementations that
//! increment a counter for every query–key score they compute. The block
//! kernels compute full score matrices per block/lane (mirroring the
//! batched-matmul implementation); the dense causal kernel skips future
//! keys, so its count is the visible triangle.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{dense_causal_pairs, layer_pair_law};
use crate::autodiff::Graph;
use crate::error::Result;
use crate::hiba::BlockSchedule;
use crate::model::{Forecaster, ModelConfig};
use crate::rng::Prng;
use crate::tensor::Tensor;

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Intra-block pass: full B×B scores per block. Returns score-pair count.
pub fn counted_intra_pass(x: &Tensor<f64>, block_size: usize) -> Result<(Tensor<f64>, u64)> {
    let [n, d] = x.shape()[..] else {
        return Err(crate::error::Error::contract("counted_intra_pass expects [n, d]".to_string()));
    };
    let m = n / block_size;
    let mut pairs = 0u64;
    let mut out = vec![0.0; n * d];
    let data = x.data();
    for block in 0..m {
        let base = block * block_size;
        let mut scores = vec![0.0; block_size * block_size];
        for i in 0..block_size {
            for j in 0..block_size {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += data[(base + i) * d + k] * data[(base + j) * d + k];
                }
                scores[i * block_size + j] = dot / (d as f64).sqrt();
                pairs += 1;
            }
        }
        for i in 0..block_size {
            softmax_inplace(&mut scores[i * block_size..(i + 1) * block_size]);
            for j in 0..block_size {
                let w = scores[i * block_size + j];
                for k in 0..d {
                    out[(base + i) * d + k] += w * data[(base + j) * d + k];
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, pairs))
}

/// Inter-block lane pass: full M×M scores per lane, causal mask applied
/// after computing the matrix.
pub fn counted_inter_pass(x: &Tensor<f64>, block_size: usize) -> Result<(Tensor<f64>, u64)> {
    let [n, d] = x.shape()[..] else {
        return Err(crate::error::Error::contract("counted_inter_pass expects [n, d]".to_string()));
    };
    let m = n / block_size;
    let mut pairs = 0u64;
    let mut out = vec![0.0; n * d];
    let data = x.data();
    for offset in 0..block_size {
        let token = |j: usize| j * block_size + offset;
        let mut scores = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += data[token(i) * d + k] * data[token(j) * d + k];
                }
                scores[i * m + j] = dot / (d as f64).sqrt();
                pairs += 1;
            }
        }
        for i in 0..m {
            let row = &mut scores[i * m..(i + 1) * m];
            for v in row.iter_mut().skip(i + 1) {
                *v = f64::NEG_INFINITY;
            }
            softmax_inplace(&mut row[..i + 1]);
            for item in row.iter_mut().skip(i + 1) {
                *item = 0.0;
            }
            for j in 0..=i {
                let w = scores[i * m + j];
                for k in 0..d {
                    out[token(i) * d + k] += w * data[token(j) * d + k];
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, pairs))
}

/// Dense causal pass: computes only scores with `j ≤ i`.
pub fn counted_dense_causal_pass(x: &Tensor<f64>) -> Result<(Tensor<f64>, u64)> {
    let [n, d] = x.shape()[..] else {
        return Err(crate::error::Error::contract("counted_dense_causal_pass expects [n, d]".to_string()));
    };
    let mut pairs = 0u64;
    let mut out = vec![0.0; n * d];
    let data = x.data();
    for i in 0..n {
        let mut scores = vec![0.0; i + 1];
        for (j, slot) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for k in 0..d {
                dot += data[i * d + k] * data[j * d + k];
            }
            *slot = dot / (d as f64).sqrt();
            pairs += 1;
        }
        softmax_inplace(&mut scores);
        for (j, &w) in scores.iter().enumerate() {
            for k in 0..d {
                out[i * d + k] += w * data[j * d + k];
            }
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, pairs))
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockCostReport {
    pub block_size: usize,
    pub measured_pairs: u64,
    pub formula_pairs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub d_model: usize,
    pub layers: usize,
    pub hiba_forward_ms: f64,
    pub dense_forward_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub per_block: Vec<BlockCostReport>,
    pub dense_measured_pairs: u64,
    pub dense_formula_pairs: u64,
    pub timing: Option<TimingReport>,
}

/// Measure score-pair counts per block size via the counting kernels and
/// compare against the closed forms; optionally time a block-attention
/// stack against an equal-shape dense causal stack.
pub fn run_bench(
    n: usize,
    d: usize,
    schedule: &BlockSchedule,
    seed: u64,
    timing_layers: Option<usize>,
) -> Result<BenchReport> {
    let mut rng = Prng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn([n, d], 1.0, &mut rng);

    let mut per_block = Vec::new();
    for &b in schedule.pattern() {
        let (_, intra) = counted_intra_pass(&x, b)?;
        let (_, inter) = counted_inter_pass(&x, b)?;
        per_block.push(BlockCostReport {
            block_size: b,
            measured_pairs: intra + inter,
            formula_pairs: layer_pair_law(n, b),
        });
    }
    let (_, dense_measured) = counted_dense_causal_pass(&x)?;

    let timing = match timing_layers {
        Some(layers) => Some(time_stacks(n, d, layers, schedule, seed)?),
        None => None,
    };

    Ok(BenchReport {
        n,
        per_block,
        dense_measured_pairs: dense_measured,
        dense_formula_pairs: dense_causal_pairs(n),
        timing,
    })
}

fn time_stacks(
    n: usize,
    d: usize,
    layers: usize,
    schedule: &BlockSchedule,
    seed: u64,
) -> Result<TimingReport> {
    let mut config = ModelConfig::desk();
    config.d_model = d;
    config.d_ff = 2 * d;
    config.embed_hidden = 2 * d;
    config.layers = layers;
    config.block_schedule = schedule.pattern().to_vec();
    config.context_length = n * config.patch_size;
    config.query_heads = 4;
    config.kv_heads = 2;

    let forward_ms = |cfg: &ModelConfig| -> Result<f64> {
        let model = Forecaster::<f32>::init(cfg.clone(), &mut Prng::seed_from_u64(seed))?;
        let mut rng = Prng::seed_from_u64(seed + 1);
        let patches = Tensor::<f32>::randn([1, n, cfg.patch_size], 1.0, &mut rng);
        let mask = Tensor::<f32>::zeros([1, n, cfg.patch_size]);
        // Warm-up pass, then timed passes.
        let run = |model: &Forecaster<f32>| -> Result<()> {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false)?;
            let p = g.constant(patches.clone());
            let m = g.constant(mask.clone());
            model.encode(&mut g, &bound, p, m)?;
            Ok(())
        };
        run(&model)?;
        let reps = 3;
        let start = Instant::now();
        for _ in 0..reps {
            run(&model)?;
        }
        Ok(start.elapsed().as_secs_f64() * 1000.0 / reps as f64)
    };

    let hiba_ms = forward_ms(&config)?;
    let mut dense_cfg = config.clone();
    dense_cfg.toggles.standard_attention = true;
    let dense_ms = forward_ms(&dense_cfg)?;
    Ok(TimingReport { d_model: d, layers, hiba_forward_ms: hiba_ms, dense_forward_ms: dense_ms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measured_pairs_match_the_law_at_paper_scale() {
        let schedule = BlockSchedule::new(vec![3, 7, 21]).unwrap();
        let report = run_bench(336, 16, &schedule, 0, None).unwrap();
        for block in &report.per_block {
            assert_eq!(block.measured_pairs, block.formula_pairs, "B={}", block.block_size);
        }
        assert_eq!(report.dense_measured_pairs, report.dense_formula_pairs);
        assert_eq!(report.dense_formula_pairs, 56_616);
    }

    #[test]
    fn counting_kernels_agree_with_expected_totals() {
        let mut rng = Prng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([42, 8], 1.0, &mut rng);
        let (_, intra) = counted_intra_pass(&x, 7).unwrap();
        assert_eq!(intra, 42 * 7);
        let (_, inter) = counted_inter_pass(&x, 7).unwrap();
        assert_eq!(inter, 42 * 42 / 7);
        let (_, dense) = counted_dense_causal_pass(&x).unwrap();
        assert_eq!(dense, 42 * 43 / 2);
    }
}
