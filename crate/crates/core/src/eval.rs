//! Forecast evaluation: MASE, quantile-based CRPS, the seasonal-naive
//! baseline, and geometric-mean aggregation of baseline-scaled scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Frequency;

const METRIC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonClass {
    Short,
    Medium,
    Long,
}

impl HorizonClass {
    /// Fixed desk-scale thresholds: ≤48 short, ≤336 medium, else long.
    pub fn classify(horizon: usize) -> Self {
        if horizon <= 48 {
            HorizonClass::Short
        } else if horizon <= 336 {
            HorizonClass::Medium
        } else {
            HorizonClass::Long
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset_id: String,
    pub frequency: Frequency,
    pub horizon_class: HorizonClass,
    pub mase: f64,
    pub crps: f64,
    /// Ratios against the seasonal-naive baseline on the same task.
    pub scaled_mase: f64,
    pub scaled_crps: f64,
}

/// Repeat the value observed one season earlier:
/// `ŷ[t] = y[T − season + (t mod season)]` (0-based `t`). A context
/// shorter than the season falls back to season 1 (last value).
pub fn seasonal_naive(context: &[f64], season_length: usize, horizon: usize) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::contract("seasonal_naive requires a non-empty context"));
    }
    let season = if season_length == 0 || context.len() < season_length { 1 } else { season_length };
    let t = context.len();
    Ok((0..horizon).map(|step| context[t - season + (step % season)]).collect())
}

fn mae(forecast: &[f64], targets: &[f64]) -> f64 {
    forecast.iter().zip(targets).map(|(f, t)| (f - t).abs()).sum::<f64>() / forecast.len().max(1) as f64
}

/// Mean absolute scaled error: forecast MAE over the in-sample MAE of the
/// one-season-lag naive forecaster (ε-floored).
pub fn mase(forecast: &[f64], targets: &[f64], context: &[f64], season_length: usize) -> Result<f64> {
    if forecast.len() != targets.len() || forecast.is_empty() {
        return Err(Error::contract(format!(
            "mase: forecast length {} vs targets {}",
            forecast.len(),
            targets.len()
        )));
    }
    let season = if season_length == 0 || context.len() <= season_length { 1 } else { season_length };
    if context.len() <= season {
        return Err(Error::contract("mase: context shorter than one season lag"));
    }
    let insample: f64 = context
        .windows(season + 1)
        .map(|w| (w[season] - w[0]).abs())
        .sum::<f64>()
        / (context.len() - season) as f64;
    Ok(mae(forecast, targets) / insample.max(METRIC_EPS))
}

/// Quantile-grid CRPS: `(2 / (H·|Q|)) Σ pinball_q(x_t, x̂_t^q)`, normalized
/// by the mean absolute target (ε-floored).
pub fn crps_quantile(grid: &[Vec<f64>], quantile_levels: &[f64], targets: &[f64]) -> Result<f64> {
    if grid.len() != targets.len() || grid.is_empty() {
        return Err(Error::contract(format!(
            "crps: grid has {} steps for {} targets",
            grid.len(),
            targets.len()
        )));
    }
    let nq = quantile_levels.len();
    let mut acc = 0.0;
    for (row, &x) in grid.iter().zip(targets) {
        if row.len() != nq {
            return Err(Error::contract(format!("crps: row width {} vs {} levels", row.len(), nq)));
        }
        if row.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("crps: quantile grid is not monotone"));
        }
        for (&pred, &q) in row.iter().zip(quantile_levels) {
            acc += if pred <= x { q * (x - pred) } else { (1.0 - q) * (pred - x) };
        }
    }
    let scale = targets.iter().map(|t| t.abs()).sum::<f64>() / targets.len() as f64;
    Ok(2.0 * acc / (grid.len() * nq) as f64 / scale.max(METRIC_EPS))
}

/// Score one forecast grid against the seasonal-naive baseline on the
/// same task. The baseline's quantile grid repeats its point forecast at
/// every level.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_series(
    dataset_id: &str,
    frequency: Frequency,
    context: &[f64],
    targets: &[f64],
    grid: &[Vec<f64>],
    quantile_levels: &[f64],
    season_length: usize,
    horizon: usize,
) -> Result<EvalRecord> {
    let median_idx = quantile_levels.len() / 2;
    let median: Vec<f64> = grid.iter().map(|row| row[median_idx]).collect();
    let model_mase = mase(&median, targets, context, season_length)?;
    let model_crps = crps_quantile(grid, quantile_levels, targets)?;

    let naive = seasonal_naive(context, season_length, horizon)?;
    let naive_mase = mase(&naive, targets, context, season_length)?;
    let naive_grid: Vec<Vec<f64>> = naive.iter().map(|&v| vec![v; quantile_levels.len()]).collect();
    let naive_crps = crps_quantile(&naive_grid, quantile_levels, targets)?;

    Ok(EvalRecord {
        dataset_id: dataset_id.to_string(),
        frequency,
        horizon_class: HorizonClass::classify(horizon),
        mase: model_mase,
        crps: model_crps,
        scaled_mase: model_mase.max(METRIC_EPS) / naive_mase.max(METRIC_EPS),
        scaled_crps: model_crps.max(METRIC_EPS) / naive_crps.max(METRIC_EPS),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateSummary {
    pub count: usize,
    pub geo_mean_scaled_mase: f64,
    pub geo_mean_scaled_crps: f64,
    pub per_class: Vec<ClassSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: HorizonClass,
    pub count: usize,
    pub geo_mean_scaled_mase: f64,
    pub geo_mean_scaled_crps: f64,
}

fn geometric_mean(values: impl Iterator<Item = f64> + Clone) -> Result<f64> {
    let mut log_sum = 0.0;
    let mut count = 0usize;
    for v in values {
        if v <= 0.0 {
            return Err(Error::contract(format!("geometric mean over non-positive value {v}")));
        }
        log_sum += v.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("geometric mean of an empty set"));
    }
    Ok((log_sum / count as f64).exp())
}

/// Geometric means of the baseline-scaled metrics, overall and per
/// horizon class.
pub fn aggregate(records: &[EvalRecord]) -> Result<AggregateSummary> {
    let overall_mase = geometric_mean(records.iter().map(|r| r.scaled_mase))?;
    let overall_crps = geometric_mean(records.iter().map(|r| r.scaled_crps))?;
    let mut per_class = Vec::new();
    for class in [HorizonClass::Short, HorizonClass::Medium, HorizonClass::Long] {
        let subset: Vec<&EvalRecord> = records.iter().filter(|r| r.horizon_class == class).collect();
        if subset.is_empty() {
            continue;
        }
        per_class.push(ClassSummary {
            class,
            count: subset.len(),
            geo_mean_scaled_mase: geometric_mean(subset.iter().map(|r| r.scaled_mase))?,
            geo_mean_scaled_crps: geometric_mean(subset.iter().map(|r| r.scaled_crps))?,
        });
    }
    Ok(AggregateSummary {
        count: records.len(),
        geo_mean_scaled_mase: overall_mase,
        geo_mean_scaled_crps: overall_crps,
        per_class,
    })
}
