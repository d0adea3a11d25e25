//! Model configuration, parameter store, and the end-to-end forecaster:
//! tokenize → block-attention stack → quantile heads → denormalize.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, AttentionWeights};
use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::heads::{head_forward, to_position_grids, HeadWeights, PositionGrids, QuantileForecast};
use crate::hiba::{hiba_forward, BlockSchedule, BlockWiring, FfnWeights, ForwardStats, HibaBlockWeights};
use crate::loss::{quantile_loss, total_loss, HeadTargets};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::series::Series;
use crate::tensor::Tensor;
use crate::tokenizer::{embed, normalize_and_patch, EmbedWeights};

pub const DEFAULT_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Architecture rewirings exercised by the ablation study.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationToggles {
    /// Dense causal attention in place of both block attentions.
    #[serde(default)]
    pub standard_attention: bool,
    /// Causal masking inside blocks.
    #[serde(default)]
    pub causal_intra: bool,
    /// One shared block size for every layer.
    #[serde(default)]
    pub uniform_block_size: Option<usize>,
    /// Restrict training and inference to a subset of horizons.
    #[serde(default)]
    pub head_set: Option<Vec<usize>>,
    /// Pre-norm residual ordering (experimental; default is post-norm).
    #[serde(default)]
    pub prenorm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Hidden width of the input embedding MLP (defaults to 4·d).
    pub embed_hidden: usize,
    pub layers: usize,
    pub block_schedule: Vec<usize>,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub horizons: Vec<usize>,
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub toggles: AblationToggles,
}

impl ModelConfig {
    /// Paper-scale tiny configuration.
    pub fn tiny() -> Self {
        ModelConfig {
            patch_size: 8,
            context_length: 2688,
            d_model: 160,
            d_ff: 640,
            embed_hidden: 640,
            layers: 24,
            block_schedule: vec![3, 7, 21],
            query_heads: 10,
            kv_heads: 2,
            horizons: vec![96, 768],
            quantiles: DEFAULT_QUANTILES.to_vec(),
            toggles: AblationToggles::default(),
        }
    }

    /// Desk-scale configuration used by tests and CI: minutes, not hours.
    pub fn desk() -> Self {
        ModelConfig {
            patch_size: 8,
            context_length: 168,
            d_model: 32,
            d_ff: 128,
            embed_hidden: 128,
            layers: 6,
            block_schedule: vec![3, 7, 21],
            query_heads: 4,
            kv_heads: 2,
            horizons: vec![24, 48],
            quantiles: DEFAULT_QUANTILES.to_vec(),
            toggles: AblationToggles::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.context_length == 0 {
            return Err(Error::contract("patch size and context length must be positive"));
        }
        self.dims()?;
        self.schedule()?;
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "horizons must be strictly increasing, got {:?}",
                self.horizons
            )));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|&q| q <= 0.0 || q >= 1.0)
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::contract(format!(
                "quantile levels must be strictly increasing within (0, 1), got {:?}",
                self.quantiles
            )));
        }
        if let Some(set) = &self.toggles.head_set {
            if set.is_empty() || set.iter().any(|h| !self.horizons.contains(h)) {
                return Err(Error::contract(format!(
                    "head set {set:?} is not a non-empty subset of horizons {:?}",
                    self.horizons
                )));
            }
        }
        if self.d_ff == 0 || self.embed_hidden == 0 {
            return Err(Error::contract("d_ff and embed_hidden must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<AttentionDims> {
        AttentionDims::new(self.d_model, self.query_heads, self.kv_heads)
    }

    /// Block schedule with the uniform-size override applied.
    pub fn schedule(&self) -> Result<BlockSchedule> {
        match self.toggles.uniform_block_size {
            Some(b) => BlockSchedule::new(vec![b]),
            None => BlockSchedule::new(self.block_schedule.clone()),
        }
    }

    pub fn wiring(&self) -> BlockWiring {
        BlockWiring {
            standard_attention: self.toggles.standard_attention,
            causal_intra: self.toggles.causal_intra,
            prenorm: self.toggles.prenorm,
        }
    }

    /// Horizons whose heads participate in the loss and in inference.
    pub fn active_horizons(&self) -> Vec<usize> {
        match &self.toggles.head_set {
            Some(set) => self.horizons.iter().copied().filter(|h| set.contains(h)).collect(),
            None => self.horizons.clone(),
        }
    }

    /// Token count after padding the context to whole, schedule-aligned
    /// patches.
    pub fn token_count(&self) -> Result<usize> {
        let raw = self.context_length.div_ceil(self.patch_size);
        let align = self.schedule()?.lcm();
        Ok(raw.div_ceil(align) * align)
    }

    pub fn max_horizon(&self) -> usize {
        *self.horizons.last().expect("validated: horizons non-empty")
    }

    /// One-line architecture description for run logs.
    pub fn describe(&self) -> String {
        let attention = if self.toggles.standard_attention {
            "dense causal attention (standard rewiring)".to_string()
        } else {
            let intra = if self.toggles.causal_intra { "causal" } else { "non-causal" };
            let schedule = match self.toggles.uniform_block_size {
                Some(b) => format!("uniform block size {b}"),
                None => format!("block schedule {:?} cycled", self.block_schedule),
            };
            format!("intra-block {intra} + inter-block strided causal, {schedule}")
        };
        let norm = if self.toggles.prenorm { "pre-norm" } else { "post-norm" };
        format!(
            "d={} d_ff={} layers={} heads={}q/{}kv patch={} context={} ({} tokens) horizons={:?} active={:?} quantiles={} | {attention}, {norm}",
            self.d_model,
            self.d_ff,
            self.layers,
            self.query_heads,
            self.kv_heads,
            self.patch_size,
            self.context_length,
            self.token_count().map(|n| n.to_string()).unwrap_or_else(|_| "?".into()),
            self.horizons,
            self.active_horizons(),
            self.quantiles.len(),
        )
    }
}

/// Named parameter tensors in deterministic (sorted) order.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Graph ids of all bound parameters for one forward pass.
pub struct BoundModel {
    pub embed: EmbedWeights,
    pub blocks: Vec<HibaBlockWeights>,
    /// `(horizon, weights)` for every head the model owns.
    pub heads: Vec<(usize, HeadWeights)>,
    /// Name → id, for gradient collection.
    pub by_name: Vec<(String, TensorId)>,
}

/// One training batch in patched, normalized space.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    /// `[batch, n, P]` normalized patches.
    pub patches: Tensor<T>,
    /// `[batch, n, P]` pad-or-missing indicator.
    pub mask: Tensor<T>,
    /// Targets per active head, ascending horizon order.
    pub targets: Vec<HeadTargets<T>>,
}

pub struct Forecaster<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Forecaster<T> {
    /// Initialize parameters: normal weights scaled by 1/√fan_in, zero
    /// biases, unit norm gains.
    pub fn init(config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let dims = config.dims()?;
        let dh = dims.head_dim();
        let (d, d_ff, hidden) = (config.d_model, config.d_ff, config.embed_hidden);
        let p = config.patch_size;
        let nq = config.quantiles.len();

        let mut params = ParamStore::new();
        let weight = |params: &mut ParamStore<T>, name: String, shape: [usize; 2], rng: &mut Prng| {
            let std = 1.0 / (shape[0] as f64).sqrt();
            params.insert(name, Tensor::randn(shape.to_vec(), std, rng));
        };

        weight(&mut params, "embed.w1".into(), [2 * p, hidden], rng);
        params.insert("embed.b1".into(), Tensor::zeros([hidden]));
        weight(&mut params, "embed.w2".into(), [hidden, d], rng);
        params.insert("embed.b2".into(), Tensor::zeros([d]));

        for l in 0..config.layers {
            for attn in ["intra", "inter"] {
                weight(&mut params, format!("block{l:02}.{attn}.wq"), [d, dims.h_q * dh], rng);
                weight(&mut params, format!("block{l:02}.{attn}.wk"), [d, dims.h_kv * dh], rng);
                weight(&mut params, format!("block{l:02}.{attn}.wv"), [d, dims.h_kv * dh], rng);
                weight(&mut params, format!("block{l:02}.{attn}.wo"), [dims.h_q * dh, d], rng);
            }
            for ffn in ["ffn1", "ffn2"] {
                weight(&mut params, format!("block{l:02}.{ffn}.gate"), [d, d_ff], rng);
                weight(&mut params, format!("block{l:02}.{ffn}.up"), [d, d_ff], rng);
                weight(&mut params, format!("block{l:02}.{ffn}.down"), [d_ff, d], rng);
            }
            for norm in 1..=4 {
                params.insert(format!("block{l:02}.norm{norm}"), Tensor::ones([d]));
            }
        }

        for &h in &config.horizons {
            weight(&mut params, format!("head{h}.w1"), [d, d], rng);
            params.insert(format!("head{h}.b1"), Tensor::zeros([d]));
            weight(&mut params, format!("head{h}.w2"), [d, h * nq], rng);
            params.insert(format!("head{h}.b2"), Tensor::zeros([h * nq]));
        }

        Ok(Forecaster { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Forecaster { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundModel> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.params {
            ids.insert(name.clone(), g.leaf(tensor.clone(), trainable));
        }
        self.assemble(&ids)
    }

    /// Wire the model from caller-supplied node ids, one per parameter
    /// name (used by gradient checking, which owns the leaves).
    pub fn bind_existing(&self, ids: &BTreeMap<String, TensorId>) -> Result<BoundModel> {
        self.assemble(ids)
    }

    fn assemble(&self, ids: &BTreeMap<String, TensorId>) -> Result<BoundModel> {
        let lookup = |name: String| -> Result<TensorId> {
            ids.get(&name)
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter binding {name}")))
        };

        let embed = EmbedWeights {
            w1: lookup("embed.w1".into())?,
            b1: lookup("embed.b1".into())?,
            w2: lookup("embed.w2".into())?,
            b2: lookup("embed.b2".into())?,
        };
        let mut blocks = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let attn = |kind: &str| -> Result<AttentionWeights> {
                Ok(AttentionWeights {
                    wq: lookup(format!("block{l:02}.{kind}.wq"))?,
                    wk: lookup(format!("block{l:02}.{kind}.wk"))?,
                    wv: lookup(format!("block{l:02}.{kind}.wv"))?,
                    wo: lookup(format!("block{l:02}.{kind}.wo"))?,
                })
            };
            let ffn = |kind: &str| -> Result<FfnWeights> {
                Ok(FfnWeights {
                    gate: lookup(format!("block{l:02}.{kind}.gate"))?,
                    up: lookup(format!("block{l:02}.{kind}.up"))?,
                    down: lookup(format!("block{l:02}.{kind}.down"))?,
                })
            };
            let mut norms = [embed.w1; 4];
            for (i, slot) in norms.iter_mut().enumerate() {
                *slot = lookup(format!("block{l:02}.norm{}", i + 1))?;
            }
            blocks.push(HibaBlockWeights {
                intra: attn("intra")?,
                inter: attn("inter")?,
                ffn1: ffn("ffn1")?,
                ffn2: ffn("ffn2")?,
                norms,
            });
        }

        let mut heads = Vec::new();
        for &h in &self.config.horizons {
            heads.push((
                h,
                HeadWeights {
                    w1: lookup(format!("head{h}.w1"))?,
                    b1: lookup(format!("head{h}.b1"))?,
                    w2: lookup(format!("head{h}.w2"))?,
                    b2: lookup(format!("head{h}.b2"))?,
                },
            ));
        }

        let by_name = ids.iter().map(|(k, &v)| (k.clone(), v)).collect();
        Ok(BoundModel { embed, blocks, heads, by_name })
    }

    /// Token embeddings → final hidden states for `[batch, n, P]` patches.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        patches: TensorId,
        mask: TensorId,
    ) -> Result<(TensorId, ForwardStats)> {
        let h0 = embed(g, patches, mask, &bound.embed)?;
        hiba_forward(
            g,
            h0,
            &bound.blocks,
            &self.config.schedule()?,
            &self.config.dims()?,
            &self.config.wiring(),
        )
    }

    /// Raw head outputs `[batch, n, H_k, |Q|]` for the active horizons.
    pub fn head_outputs(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        hl: TensorId,
    ) -> Result<Vec<(usize, TensorId)>> {
        let active = self.config.active_horizons();
        let nq = self.config.quantiles.len();
        bound
            .heads
            .iter()
            .filter(|(h, _)| active.contains(h))
            .map(|(h, w)| Ok((*h, head_forward(g, hl, w, *h, nq)?)))
            .collect()
    }

    /// Total quantile loss for one batch. Returns the loss node and the
    /// attention cost stats.
    pub fn train_loss(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        batch: &TrainBatch<T>,
    ) -> Result<(TensorId, ForwardStats)> {
        let patches = g.constant(batch.patches.clone());
        let mask = g.constant(batch.mask.clone());
        let (hl, stats) = self.encode(g, bound, patches, mask)?;
        let outputs = self.head_outputs(g, bound, hl)?;
        if outputs.len() != batch.targets.len() {
            return Err(Error::contract(format!(
                "batch carries {} target sets for {} active heads",
                batch.targets.len(),
                outputs.len()
            )));
        }
        let mut losses = Vec::with_capacity(outputs.len());
        for ((h, pred), targets) in outputs.iter().zip(&batch.targets) {
            if *h != targets.horizon {
                return Err(Error::contract(format!(
                    "target horizon {} does not match head {h}",
                    targets.horizon
                )));
            }
            losses.push(quantile_loss(g, *pred, targets, &self.config.quantiles)?);
        }
        let loss = total_loss(g, &losses)?;
        Ok((loss, stats))
    }

    /// Forecast grids for every token position and every active head,
    /// denormalized and monotone (the `predict` surface).
    pub fn predict(&self, series: &Series) -> Result<Vec<PositionGrids>> {
        let (patched, hl_vals) = self.encode_series(series)?;
        let mut out = Vec::new();
        for &h in &self.config.active_horizons() {
            let raw = self.run_head_on(&hl_vals, h)?;
            out.push(to_position_grids(&raw, h, self.config.quantiles.len(), patched.mu, patched.sigma)?);
        }
        Ok(out)
    }

    /// Forecast the next `horizon` steps from the end of the series.
    /// Served by the smallest active head covering the horizon; horizons
    /// beyond the largest head are rejected.
    pub fn forecast(&self, series: &Series, horizon: usize) -> Result<QuantileForecast> {
        if horizon == 0 {
            return Err(Error::contract("forecast horizon must be positive"));
        }
        let active = self.config.active_horizons();
        let head = *active
            .iter()
            .find(|&&h| h >= horizon)
            .ok_or_else(|| {
                Error::contract(format!(
                    "horizon {horizon} exceeds the largest head {:?}; no autoregressive fallback",
                    active.last()
                ))
            })?;

        let (patched, hl_vals) = self.encode_series(series)?;
        let n = patched.n;
        let raw = self.run_head_on_last(&hl_vals, head)?;
        let grids = to_position_grids(&raw, head, self.config.quantiles.len(), patched.mu, patched.sigma)?;
        let full = &grids.values[0];
        Ok(QuantileForecast {
            values: full[..horizon].to_vec(),
            horizon,
            origin_index: n - 1,
            mu: patched.mu,
            sigma: patched.sigma,
            quantile_levels: self.config.quantiles.clone(),
        })
    }

    /// Encode a series (truncated to the model context) and return the
    /// patched input plus final hidden state values `[1, n, d]`.
    fn encode_series(&self, series: &Series) -> Result<(crate::tokenizer::PatchedInput<T>, Tensor<T>)> {
        let ctx = self.config.context_length;
        let tail = if series.len() > ctx { series.window(series.len() - ctx, ctx)? } else { series.clone() };
        let align = self.config.schedule()?.lcm();
        let patched = normalize_and_patch::<T>(&tail, self.config.patch_size, align)?;
        let n = patched.n;
        let p = self.config.patch_size;

        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let patches = g.constant(patched.patches.clone().reshape([1, n, p])?);
        let mask = g.constant(patched.mask.clone().reshape([1, n, p])?);
        let (hl, _) = self.encode(&mut g, &bound, patches, mask)?;
        let hl_vals = g.value(hl).clone();
        Ok((patched, hl_vals))
    }

    /// Run one head over all positions of stored hidden states.
    fn run_head_on(&self, hl_vals: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let (_, w) = bound
            .heads
            .iter()
            .find(|(h, _)| *h == horizon)
            .ok_or_else(|| Error::contract(format!("no head for horizon {horizon}")))?;
        let hl = g.constant(hl_vals.clone());
        let raw = head_forward(&mut g, hl, w, horizon, self.config.quantiles.len())?;
        Ok(g.value(raw).clone())
    }

    /// Run one head on the last position only (leakage-free inference).
    fn run_head_on_last(&self, hl_vals: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
        let [_, n, d] = hl_vals.shape()[..] else {
            return Err(Error::Shape { op: "run_head_on_last", detail: format!("{:?}", hl_vals.shape()) });
        };
        let last = Tensor::new(vec![1, 1, d], hl_vals.data()[(n - 1) * d..n * d].to_vec())?;
        self.run_head_on(&last, horizon)
    }
}
