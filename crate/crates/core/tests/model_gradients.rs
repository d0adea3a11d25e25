//! End-to-end gradient verification: the full training loss (embedding,
//! block-attention stack, quantile heads, masked pinball loss) against
//! central finite differences, parameter group by parameter group.

use std::collections::BTreeMap;

use hiba_core::gradcheck::grad_check;
use hiba_core::model::{AblationToggles, Forecaster, ModelConfig, ParamStore, TrainBatch, DEFAULT_QUANTILES};
use hiba_core::synth::{generate, score_predictability, GeneratorSpec};
use hiba_core::train::{Precision, TrainConfig, Trainer};

fn tiny_model() -> ModelConfig {
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
        quantiles: DEFAULT_QUANTILES.to_vec(),
        toggles: AblationToggles::default(),
    }
}

fn fixed_batch(model: ModelConfig, seed: u64) -> (Forecaster<f64>, TrainBatch<f64>) {
    let cfg = TrainConfig {
        lr_init: 1e-3,
        warmup_ratio: 0.0,
        total_steps: 10,
        batch_size: 1,
        grad_clip_norm: 1.0,
        seed,
        precision: Precision::F64,
        model,
    };
    let spec = GeneratorSpec { seed, len_range: (96, 128), max_components: 2, ..GeneratorSpec::default() };
    let corpus = generate(&spec, 4).unwrap();
    let profiles: Vec<_> = corpus.iter().map(|s| score_predictability(s).unwrap()).collect();
    let mut trainer = Trainer::<f64>::new(cfg, corpus, &profiles).unwrap();
    let batch = trainer.sample_batch().unwrap();
    (trainer.into_model(), batch)
}

#[test]
fn full_model_loss_gradients_match_finite_differences() {
    let (model, batch) = fixed_batch(tiny_model(), 404);
    let names: Vec<String> = model.params().keys().cloned().collect();
    let leaves: Vec<_> = names.iter().map(|n| model.params()[n].clone()).collect();
    let config = model.config().clone();

    let report = grad_check(
        move |g, ids| {
            let mut store = ParamStore::new();
            let mut id_map = BTreeMap::new();
            for (name, &id) in names.iter().zip(ids) {
                store.insert(name.clone(), g.value(id).clone());
                id_map.insert(name.clone(), id);
            }
            let fc = Forecaster::from_parts(config.clone(), store)?;
            let bound = fc.bind_existing(&id_map)?;
            let (loss, _) = fc.train_loss(g, &bound, &batch)?;
            Ok(loss)
        },
        &leaves,
        1e-6,
        1e-5,
    )
    .unwrap();

    let names: Vec<String> = model.params().keys().cloned().collect();
    for (name, err) in names.iter().zip(&report.per_leaf) {
        assert!(
            *err <= 1e-5,
            "parameter group {name}: max relative error {err:.3e} exceeds 1e-5"
        );
    }
    println!(
        "full-model gradcheck: {} parameter groups, max rel err {:.3e}",
        report.per_leaf.len(),
        report.max_error()
    );
}
