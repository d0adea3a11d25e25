//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hiba_core::dataset::{
    load_corpus_auto, read_series_jsonl, write_manifest, write_series_jsonl, Manifest, ManifestEntry,
};
use hiba_core::error::Error;
use hiba_core::eval::{aggregate, evaluate_series, EvalRecord};
use hiba_core::hiba::BlockSchedule;
use hiba_core::model::Forecaster;
use hiba_core::rng::Prng;
use hiba_core::scalar::Scalar;
use hiba_core::series::Series;
use hiba_core::synth::{augment, generate, score_predictability, AugmentMode, QualityProfile};
use hiba_core::train::{
    load_checkpoint, peek_checkpoint, save_checkpoint, Precision, Settings, Trainer,
};
use hiba_core::Result;

use crate::CommonArgs;

const AUGMENT_LABEL: u64 = 0x6175_676d;

pub fn synth(common: &CommonArgs, count: Option<usize>) -> Result<()> {
    let settings = crate::resolve(common)?;
    let count = count.unwrap_or(settings.synth_count);
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::contract("synth requires --out PATH for the corpus JSONL"))?;

    let mut corpus = generate(&settings.synth, count)?;
    if settings.synth_augment {
        let mut rng = Prng::derive(settings.synth.seed, AUGMENT_LABEL);
        for (i, series) in corpus.iter_mut().enumerate() {
            // Augment alternating thirds; leave the rest untouched.
            let mode = match i % 3 {
                0 => Some(AugmentMode::AmplitudeModulation),
                1 => Some(AugmentMode::Censor),
                _ => None,
            };
            if let Some(mode) = mode {
                *series = augment(series, mode, &mut rng)?;
            }
        }
    }

    write_series_jsonl(&out, &corpus)?;
    let mut profiles = BTreeMap::new();
    let mut tier_counts: BTreeMap<String, usize> = BTreeMap::new();
    for series in &corpus {
        let profile = score_predictability(series)?;
        *tier_counts.entry(format!("{:?}", profile.tier).to_lowercase()).or_default() += 1;
        profiles.insert(series.id.clone(), profile);
    }
    let corpus_name = out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::contract("output path has no file name"))?;
    let manifest = Manifest {
        files: vec![ManifestEntry { path: corpus_name.to_string(), tier_override: None }],
        profiles,
    };
    let manifest_path = out.with_extension("manifest.json");
    write_manifest(&manifest_path, &manifest)?;
    eprintln!(
        "wrote {count} series to {} (tiers: {tier_counts:?}), manifest at {}",
        out.display(),
        manifest_path.display()
    );
    Ok(())
}

fn training_corpus(settings: &Settings, data: Option<&Path>) -> Result<(Vec<Series>, Vec<QualityProfile>)> {
    let path = data
        .map(|p| p.to_path_buf())
        .or_else(|| settings.data.as_ref().map(PathBuf::from));
    match path {
        Some(path) => load_corpus_auto(&path),
        None => {
            eprintln!(
                "no --data given; generating {} in-memory synthetic series",
                settings.synth_count
            );
            let corpus = generate(&settings.synth, settings.synth_count)?;
            let profiles = corpus.iter().map(score_predictability).collect::<Result<Vec<_>>>()?;
            Ok((corpus, profiles))
        }
    }
}

fn run_training<T: Scalar>(
    settings: &Settings,
    corpus: Vec<Series>,
    profiles: &[QualityProfile],
    out: &Path,
) -> Result<()> {
    let mut trainer = Trainer::<T>::new(settings.train.clone(), corpus, profiles)?;
    eprintln!("model: {}", settings.train.model.describe());
    eprintln!("parameter count: {}", trainer.model().param_count());

    let metrics_path = out.with_extension("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let total = settings.train.total_steps;
    let mut io_err: Option<std::io::Error> = None;
    trainer.run(total, |m| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut metrics_file, m)
                .map_err(std::io::Error::other)
                .and_then(|()| metrics_file.write_all(b"\n"))
            {
                io_err = Some(e);
            }
        }
        if m.step % 100 == 0 || m.step + 1 == total {
            eprintln!("step {:>6}  loss {:.6}  grad_norm {:.4}  lr {:.2e}", m.step, m.loss, m.grad_norm, m.lr);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(metrics_path.display().to_string(), e));
    }
    save_checkpoint(out, &trainer.checkpoint_state())?;
    eprintln!("checkpoint written to {} at step {}", out.display(), trainer.step());
    Ok(())
}

pub fn train(common: &CommonArgs, data: Option<PathBuf>) -> Result<()> {
    let settings = crate::resolve(common)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let (corpus, profiles) = training_corpus(&settings, data.as_deref())?;
    match settings.train.precision {
        Precision::F32 => run_training::<f32>(&settings, corpus, &profiles, &out),
        Precision::F64 => run_training::<f64>(&settings, corpus, &profiles, &out),
    }
}

fn with_model<R>(
    checkpoint: &Path,
    f32_run: impl FnOnce(Forecaster<f32>) -> Result<R>,
    f64_run: impl FnOnce(Forecaster<f64>) -> Result<R>,
) -> Result<R> {
    let meta = peek_checkpoint(checkpoint)?;
    match meta.dtype {
        0 => {
            let state = load_checkpoint::<f32>(checkpoint)?;
            f32_run(Forecaster::from_parts(state.config.model, state.params)?)
        }
        1 => {
            let state = load_checkpoint::<f64>(checkpoint)?;
            f64_run(Forecaster::from_parts(state.config.model, state.params)?)
        }
        other => Err(Error::format(format!("unknown checkpoint dtype tag {other}"))),
    }
}

#[derive(serde::Serialize)]
struct ForecastRecord {
    id: String,
    #[serde(flatten)]
    forecast: hiba_core::heads::QuantileForecast,
}

fn forecast_all<T: Scalar>(model: &Forecaster<T>, series: &[Series], horizon: usize) -> Result<Vec<ForecastRecord>> {
    series
        .iter()
        .map(|s| {
            Ok(ForecastRecord { id: s.id.clone(), forecast: model.forecast(s, horizon)? })
        })
        .collect()
}

pub fn forecast(common: &CommonArgs, checkpoint: &Path, input: &Path, horizon: usize) -> Result<()> {
    let series = read_series_jsonl(input)?;
    if series.is_empty() {
        return Err(Error::contract(format!("{} holds no series", input.display())));
    }
    let records = with_model(
        checkpoint,
        |m| forecast_all(&m, &series, horizon),
        |m| forecast_all(&m, &series, horizon),
    )?;
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::format(format!("encoding forecasts: {e}")))?;
    match &common.out {
        Some(path) => fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn eval_one<T: Scalar>(
    model: &Forecaster<T>,
    series: &Series,
    horizon: usize,
    season_override: Option<usize>,
) -> Result<Option<EvalRecord>> {
    let t = series.len();
    if t <= horizon + 1 {
        return Ok(None);
    }
    let split = t - horizon;
    let context = series.window(0, split)?;
    if !context.observed.iter().any(|&o| o) {
        return Ok(None);
    }
    let target_slice = &series.values[split..];
    if series.observed[split..].iter().any(|&o| !o) {
        return Ok(None);
    }

    let season = season_override.unwrap_or_else(|| series.frequency.season_length());
    let grid = model.forecast(&context, horizon)?;
    evaluate_series(
        &series.id,
        series.frequency,
        &context.values,
        target_slice,
        &grid.values,
        &grid.quantile_levels,
        season,
        horizon,
    )
    .map(Some)
}

fn eval_with_model<T: Scalar>(
    model: &Forecaster<T>,
    series: &[Series],
    horizon: usize,
    season: Option<usize>,
) -> Result<Vec<EvalRecord>> {
    use rayon::prelude::*;

    let threads = std::env::var("HIBA_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract(format!("building worker pool: {e}")))?;
    let mut records: Vec<EvalRecord> = pool.install(|| {
        series
            .par_iter()
            .map(|s| eval_one(model, s, horizon, season))
            .collect::<Result<Vec<Option<EvalRecord>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    records.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
    Ok(records)
}

pub fn eval(common: &CommonArgs, checkpoint: &Path, data: &Path) -> Result<()> {
    let settings = crate::resolve(common)?;
    let (series, _) = load_corpus_auto(data)?;
    if series.is_empty() {
        return Err(Error::contract(format!("{} holds no series", data.display())));
    }

    let meta = peek_checkpoint(checkpoint)?;
    let horizon = if settings.eval.horizon == 0 {
        *meta
            .config
            .model
            .active_horizons()
            .first()
            .ok_or_else(|| Error::contract("checkpoint model has no active heads"))?
    } else {
        settings.eval.horizon
    };
    let season = settings.eval.season;

    let records = with_model(
        checkpoint,
        |m| eval_with_model(&m, &series, horizon, season),
        |m| eval_with_model(&m, &series, horizon, season),
    )?;
    if records.is_empty() {
        return Err(Error::contract(
            "no evaluable series: every series was shorter than horizon + 2 or had missing targets".to_string(),
        ));
    }
    let summary = aggregate(&records)?;

    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    let records_path = out.with_extension("records.jsonl");
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format(format!("encoding record: {e}")))?;
        buf.push(b'\n');
    }
    fs::write(&records_path, &buf).map_err(|e| Error::io(records_path.display().to_string(), e))?;

    let summary_path = out.with_extension("summary.json");
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::format(format!("encoding summary: {e}")))?;
    fs::write(&summary_path, &summary_json)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;

    if settings.eval.csv {
        let csv_path = out.with_extension("records.csv");
        let mut csv = String::from("dataset_id,frequency,horizon_class,mase,crps,scaled_mase,scaled_crps\n");
        for r in &records {
            csv.push_str(&format!(
                "{},{},{:?},{},{},{},{}\n",
                r.dataset_id,
                r.frequency.as_str(),
                r.horizon_class,
                r.mase,
                r.crps,
                r.scaled_mase,
                r.scaled_crps
            ));
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    }

    println!("{summary_json}");
    eprintln!(
        "evaluated {} series at horizon {horizon}; records at {}",
        records.len(),
        records_path.display()
    );
    Ok(())
}

pub fn bench(common: &CommonArgs, n: usize, d: usize, layers: usize, timing: bool) -> Result<()> {
    let settings = crate::resolve(common)?;
    let schedule = BlockSchedule::new(settings.train.model.block_schedule.clone())?;
    let report = hiba_core::cost::run_bench(
        n,
        d,
        &schedule,
        settings.train.seed,
        timing.then_some(layers),
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(format!("encoding bench report: {e}")))?;
    match &common.out {
        Some(path) => fs::write(path, &json).map_err(|e| Error::io(path.display().to_string(), e))?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct InspectReport {
    version: u32,
    dtype: &'static str,
    step: u64,
    param_count: usize,
    architecture: String,
    config: hiba_core::train::TrainConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(serde::Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let meta = peek_checkpoint(checkpoint)?;
    let (dtype, tensors, param_count) = match meta.dtype {
        0 => {
            let state = load_checkpoint::<f32>(checkpoint)?;
            let infos: Vec<TensorInfo> = state
                .params
                .iter()
                .map(|(k, v)| TensorInfo { name: k.clone(), shape: v.shape().to_vec() })
                .collect();
            let count = state.params.values().map(|t| t.numel()).sum();
            ("f32", infos, count)
        }
        1 => {
            let state = load_checkpoint::<f64>(checkpoint)?;
            let infos: Vec<TensorInfo> = state
                .params
                .iter()
                .map(|(k, v)| TensorInfo { name: k.clone(), shape: v.shape().to_vec() })
                .collect();
            let count = state.params.values().map(|t| t.numel()).sum();
            ("f64", infos, count)
        }
        other => return Err(Error::format(format!("unknown checkpoint dtype tag {other}"))),
    };
    let report = InspectReport {
        version: meta.version,
        dtype,
        step: meta.step,
        param_count,
        architecture: meta.config.model.describe(),
        config: meta.config,
        tensors,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(format!("encoding inspect report: {e}")))?;
    println!("{json}");
    Ok(())
}
