//! Optimization loop: quality-weighted window sampling, Adam with warmup +
//! cosine learning rate, global-norm clipping, and bit-exact checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod schedule;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::HeadTargets;
use crate::model::{Forecaster, TrainBatch};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::series::Series;
use crate::synth::{QualityProfile, WeightedSampler};
use crate::tensor::Tensor;
use crate::tokenizer::{instance_normalize, patch_aligned};

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{load_checkpoint, peek_checkpoint, save_checkpoint, CheckpointState};
pub use config::{resolve_settings, EvalSettings, Precision, Settings, TrainConfig};
pub use schedule::lr_schedule;

const INIT_LABEL: u64 = 0x696e_6974;
const SAMPLE_LABEL: u64 = 0x7361_6d70;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: Forecaster<T>,
    corpus: Vec<Series>,
    sampler: WeightedSampler,
    adam: AdamState<T>,
    rng: Prng,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, corpus: Vec<Series>, profiles: &[QualityProfile]) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        if corpus.len() != profiles.len() {
            return Err(Error::contract(format!(
                "{} series but {} quality profiles",
                corpus.len(),
                profiles.len()
            )));
        }
        let sampler = WeightedSampler::new(profiles)?;
        let model = Forecaster::init(config.model.clone(), &mut Prng::derive(config.seed, INIT_LABEL))?;
        let rng = Prng::derive(config.seed, SAMPLE_LABEL);
        Ok(Trainer { config, model, corpus, sampler, adam: AdamState::new(), rng, step: 0 })
    }

    /// Resume from a checkpoint; training continues bit-exactly.
    pub fn from_checkpoint(
        state: CheckpointState<T>,
        corpus: Vec<Series>,
        profiles: &[QualityProfile],
    ) -> Result<Self> {
        state.config.validate()?;
        if corpus.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        let sampler = WeightedSampler::new(profiles)?;
        let model = Forecaster::from_parts(state.config.model.clone(), state.params)?;
        Ok(Trainer {
            config: state.config,
            model,
            corpus,
            sampler,
            adam: state.adam,
            rng: Prng::restore(&state.rng),
            step: state.step,
        })
    }

    pub fn model(&self) -> &Forecaster<T> {
        &self.model
    }

    pub fn into_model(self) -> Forecaster<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint_state(&self) -> CheckpointState<T> {
        CheckpointState {
            config: self.config.clone(),
            step: self.step,
            params: self.model.params().clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
        }
    }

    /// Draw one training window: a context slice ending at a random split
    /// point, left-padded to the model context, with per-head targets
    /// continuing past the split.
    fn sample_window(&mut self, series_idx: usize) -> Result<Option<WindowSample<T>>> {
        let model_cfg = &self.config.model;
        let p = model_cfg.patch_size;
        let n_tokens = model_cfg.token_count()?;
        let ctx = model_cfg.context_length;
        let horizons = model_cfg.active_horizons();
        let h_max = *horizons.last().expect("validated: at least one active horizon");

        let series = &self.corpus[series_idx];
        let t_len = series.len();
        if t_len < 2 {
            return Ok(None);
        }
        let lo = p.min(t_len - 1).max(1);
        let split = self.rng.range_inclusive(lo, t_len - 1);
        let ctx_len = split.min(ctx);
        let ctx_start = split - ctx_len;

        let window = series.window(ctx_start, ctx_len)?;
        if !window.observed.iter().any(|&o| o) {
            return Ok(None);
        }
        let (normalized, mu, sigma) = instance_normalize::<T>(&window)?;
        let patched = patch_aligned(&normalized, &window.observed, p, n_tokens, mu, sigma)?;
        debug_assert_eq!(patched.n, n_tokens);

        // Normalized target space spans the context plus up to h_max
        // points beyond the split.
        let future_end = (split + h_max).min(t_len);
        let space_len = future_end - ctx_start;
        let mut target_vals = Vec::with_capacity(space_len);
        let mut target_obs = Vec::with_capacity(space_len);
        for i in ctx_start..future_end {
            target_obs.push(series.observed[i]);
            target_vals.push(if series.observed[i] {
                T::from_f64((series.values[i] - mu) / sigma)
            } else {
                T::zero()
            });
        }

        let mut per_head = Vec::with_capacity(horizons.len());
        for &h in &horizons {
            let mut values = vec![T::zero(); n_tokens * h];
            let mut valid = vec![T::zero(); n_tokens * h];
            for token in 0..n_tokens {
                for t in 1..=h {
                    // Forecast from token `token` at step `t` targets the
                    // padded position (token+1)·P + t − 1.
                    let padded = (token + 1) * p + t - 1;
                    let Some(raw) = padded.checked_sub(patched.pad_len) else { continue };
                    if raw < space_len && target_obs[raw] {
                        values[token * h + t - 1] = target_vals[raw];
                        valid[token * h + t - 1] = T::one();
                    }
                }
            }
            per_head.push(HeadWindowTargets { horizon: h, values, valid });
        }
        if per_head.iter().all(|t| t.valid.iter().all(|v| *v == T::zero())) {
            return Ok(None);
        }
        Ok(Some(WindowSample {
            patches: patched.patches.into_data(),
            mask: patched.mask.into_data(),
            per_head,
        }))
    }

    /// Assemble a batch by quality-weighted series sampling.
    pub fn sample_batch(&mut self) -> Result<TrainBatch<T>> {
        let model_cfg = &self.config.model;
        let n = model_cfg.token_count()?;
        let p = model_cfg.patch_size;
        let horizons = model_cfg.active_horizons();
        let b = self.config.batch_size;

        let mut windows = Vec::with_capacity(b);
        let mut attempts = 0;
        while windows.len() < b {
            attempts += 1;
            if attempts > 200 * b {
                return Err(Error::contract(
                    "corpus yielded no usable training windows after repeated sampling".to_string(),
                ));
            }
            let idx = self.sampler.draw(&mut self.rng);
            if let Some(w) = self.sample_window(idx)? {
                windows.push(w);
            }
        }

        let mut patches = Vec::with_capacity(b * n * p);
        let mut mask = Vec::with_capacity(b * n * p);
        for w in &windows {
            patches.extend_from_slice(&w.patches);
            mask.extend_from_slice(&w.mask);
        }
        let mut targets = Vec::with_capacity(horizons.len());
        for (hi, &h) in horizons.iter().enumerate() {
            let mut values = Vec::with_capacity(b * n * h);
            let mut valid = Vec::with_capacity(b * n * h);
            for w in &windows {
                values.extend_from_slice(&w.per_head[hi].values);
                valid.extend_from_slice(&w.per_head[hi].valid);
            }
            targets.push(HeadTargets {
                horizon: h,
                values: Tensor::new(vec![b, n, h], values)?,
                valid: Tensor::new(vec![b, n, h], valid)?,
            });
        }
        Ok(TrainBatch {
            patches: Tensor::new(vec![b, n, p], patches)?,
            mask: Tensor::new(vec![b, n, p], mask)?,
            targets,
        })
    }

    /// Loss of the current parameters on a fixed batch (no update).
    pub fn loss_on(&self, batch: &TrainBatch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false)?;
        let (loss, _) = self.model.train_loss(&mut g, &bound, batch)?;
        Ok(g.value(loss).item()?.as_f64())
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, batch: &TrainBatch<T>) -> Result<StepMetrics> {
        let lr = lr_schedule(
            self.step.min(self.config.total_steps),
            self.config.total_steps,
            self.config.lr_init,
            self.config.warmup_ratio,
        )?;

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true)?;
        let (loss_id, _) = self.model.train_loss(&mut g, &bound, batch)?;
        let loss = g.value(loss_id).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training aborted: loss became non-finite at step {} (loss = {loss})",
                self.step
            )));
        }
        g.backward(loss_id)?;

        let mut grads = std::collections::BTreeMap::new();
        for (name, id) in &bound.by_name {
            if let Some(grad) = g.grad(*id) {
                grads.insert(name.clone(), grad.clone());
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "training aborted: gradient norm became non-finite at step {}",
                self.step
            )));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr)?;
        let metrics = StepMetrics { step: self.step, loss, grad_norm, lr };
        self.step += 1;
        Ok(metrics)
    }

    /// Sample a batch and step on it.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.sample_batch()?;
        self.step_on(&batch)
    }

    /// Run up to `steps` more steps (bounded by `total_steps`).
    pub fn run(&mut self, steps: u64, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        for _ in 0..steps {
            if self.step >= self.config.total_steps {
                break;
            }
            let metrics = self.train_step()?;
            on_step(&metrics);
        }
        Ok(())
    }
}

struct HeadWindowTargets<T> {
    #[allow(dead_code)]
    horizon: usize,
    values: Vec<T>,
    valid: Vec<T>,
}

struct WindowSample<T> {
    patches: Vec<T>,
    mask: Vec<T>,
    per_head: Vec<HeadWindowTargets<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationToggles, ModelConfig};
    use crate::series::Frequency;
    use crate::synth::{generate, score_predictability, GeneratorSpec};

    fn mini_model() -> ModelConfig {
        ModelConfig {
            patch_size: 4,
            context_length: 84,
            d_model: 8,
            d_ff: 16,
            embed_hidden: 16,
            layers: 2,
            block_schedule: vec![3, 7],
            query_heads: 2,
            kv_heads: 1,
            horizons: vec![4, 8],
            quantiles: crate::model::DEFAULT_QUANTILES.to_vec(),
            toggles: AblationToggles::default(),
        }
    }

    fn mini_config(seed: u64) -> TrainConfig {
        TrainConfig {
            lr_init: 1e-3,
            warmup_ratio: 0.0,
            total_steps: 50,
            batch_size: 2,
            grad_clip_norm: 1.0,
            seed,
            precision: Precision::F64,
            model: mini_model(),
        }
    }

    fn mini_corpus(seed: u64) -> (Vec<Series>, Vec<QualityProfile>) {
        let spec = GeneratorSpec {
            seed,
            len_range: (96, 128),
            max_components: 2,
            ..GeneratorSpec::default()
        };
        let corpus = generate(&spec, 6).unwrap();
        let profiles = corpus.iter().map(|s| score_predictability(s).unwrap()).collect();
        (corpus, profiles)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        // Warmup makes lr(0) exactly zero.
        let mut cfg = mini_config(3);
        cfg.warmup_ratio = 0.5;
        let (corpus, profiles) = mini_corpus(1);
        let mut trainer = Trainer::<f64>::new(cfg, corpus, &profiles).unwrap();
        let before = trainer.model().params().clone();
        let metrics = trainer.train_step().unwrap();
        assert_eq!(metrics.lr, 0.0);
        for (name, t) in trainer.model().params() {
            assert_eq!(t.data(), before[name].data(), "{name} changed under zero lr");
        }
    }

    #[test]
    fn one_step_on_a_repeated_sample_decreases_its_loss() {
        let (corpus, profiles) = mini_corpus(0);
        let mut trainer = Trainer::<f64>::new(mini_config(0), corpus, &profiles).unwrap();
        let batch = trainer.sample_batch().unwrap();
        let before = trainer.loss_on(&batch).unwrap();
        trainer.step_on(&batch).unwrap();
        let after = trainer.loss_on(&batch).unwrap();
        assert!(after < before, "descent check: loss {before} → {after}");
    }

    #[test]
    fn identical_seeds_produce_identical_loss_curves() {
        let (corpus, profiles) = mini_corpus(3);
        let mut a = Trainer::<f64>::new(mini_config(7), corpus.clone(), &profiles).unwrap();
        let mut b = Trainer::<f64>::new(mini_config(7), corpus, &profiles).unwrap();
        for _ in 0..5 {
            let ma = a.train_step().unwrap();
            let mb = b.train_step().unwrap();
            assert_eq!(ma.loss.to_bits(), mb.loss.to_bits());
            assert_eq!(ma.grad_norm.to_bits(), mb.grad_norm.to_bits());
        }
        let ca = checkpoint::encode(&a.checkpoint_state()).unwrap();
        let cb = checkpoint::encode(&b.checkpoint_state()).unwrap();
        assert_eq!(ca, cb, "identical seeds must produce bitwise-identical checkpoints");
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let (corpus, profiles) = mini_corpus(4);
        let mut full = Trainer::<f64>::new(mini_config(9), corpus.clone(), &profiles).unwrap();
        full.run(10, |_| {}).unwrap();

        let mut half = Trainer::<f64>::new(mini_config(9), corpus.clone(), &profiles).unwrap();
        half.run(5, |_| {}).unwrap();
        let bytes = checkpoint::encode(&half.checkpoint_state()).unwrap();
        let restored = checkpoint::decode::<f64>(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(restored, corpus, &profiles).unwrap();
        resumed.run(5, |_| {}).unwrap();

        assert_eq!(resumed.step(), full.step());
        let a = checkpoint::encode(&full.checkpoint_state()).unwrap();
        let b = checkpoint::encode(&resumed.checkpoint_state()).unwrap();
        assert_eq!(a, b, "save/resume must equal uninterrupted training bitwise");
    }

    #[test]
    fn head_set_toggle_alters_no_parameters_outside_heads() {
        let (corpus, profiles) = mini_corpus(5);
        let base = Trainer::<f64>::new(mini_config(11), corpus.clone(), &profiles).unwrap();
        let mut cfg = mini_config(11);
        cfg.model.toggles.head_set = Some(vec![4]);
        let ablated = Trainer::<f64>::new(cfg, corpus, &profiles).unwrap();

        let names = |t: &Trainer<f64>| -> Vec<String> { t.model().params().keys().cloned().collect() };
        assert_eq!(names(&base), names(&ablated), "head_set must not change the parameter table");

        // Inactive head receives zero gradient: its parameters never move.
        let mut ablated = ablated;
        let before = ablated.model().params()["head8.w2"].clone();
        for _ in 0..3 {
            ablated.train_step().unwrap();
        }
        assert_eq!(before.data(), ablated.model().params()["head8.w2"].data());
    }

    #[test]
    fn standard_attention_preserves_parameter_shapes() {
        let (corpus, profiles) = mini_corpus(6);
        let base = Trainer::<f64>::new(mini_config(13), corpus.clone(), &profiles).unwrap();
        let mut cfg = mini_config(13);
        cfg.model.toggles.standard_attention = true;
        let ablated = Trainer::<f64>::new(cfg, corpus, &profiles).unwrap();
        let shapes = |t: &Trainer<f64>| -> Vec<(String, Vec<usize>)> {
            t.model().params().iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        assert_eq!(shapes(&base), shapes(&ablated), "norm/FFN/attention parameter tables must match");
        assert_eq!(base.model().param_count(), ablated.model().param_count());
    }

    #[test]
    fn window_targets_align_with_series_continuation() {
        // Context of exactly one patch: the final token's first target is
        // the first point after the split.
        let cfg = TrainConfig {
            batch_size: 1,
            model: ModelConfig { context_length: 4, ..mini_model() },
            ..mini_config(21)
        };
        let values: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let series = Series::fully_observed("ramp", values, Frequency::None).unwrap();
        let profiles = vec![QualityProfile {
            periodicity_strength: 0.0,
            trend_strength: 1.0,
            noise_level: 0.0,
            tier: crate::synth::PredictabilityTier::High,
            sampling_weight: 3.0,
        }];
        let mut trainer = Trainer::<f64>::new(cfg, vec![series.clone()], &profiles).unwrap();
        let batch = trainer.sample_batch().unwrap();
        let n = trainer.config().model.token_count().unwrap();
        let h = 4;
        let head0 = &batch.targets[0];

        // Recover the split point from the last context value.
        let last_patch = &batch.patches.data()[(n - 1) * 4..n * 4];
        let mask_last = &batch.mask.data()[(n - 1) * 4..n * 4];
        assert!(mask_last.iter().all(|&m| m == 0.0), "last patch must be fully real");
        let _ = last_patch;

        // The final token's target at t=1 must be valid whenever the
        // series continues past the split (always true here since split ≤ 9
        // and at least one future point exists when split < 10).
        let tail_valid = &head0.valid.data()[(n - 1) * h..n * h];
        assert_eq!(tail_valid[0], 1.0, "first step after the split must be a valid target");
    }
}
