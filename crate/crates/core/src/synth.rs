//! Synthetic corpus generation, augmentation, predictability scoring, and
//! quality-weighted sampling.
//!
//! Series are additive compositions of simple kernels (trend, periodic,
//! bump, noise, level shift). Every series is a pure function of
//! `(seed, index)`, so corpora replay bitwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::series::{Frequency, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sine,
    Sawtooth,
    Square,
}

/// Kernel bank parameter ranges and corpus shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub len_range: (usize, usize),
    pub max_components: usize,
    pub frequency: Frequency,
    pub period_range: (usize, usize),
    pub amplitude_range: (f64, f64),
    pub slope_range: (f64, f64),
    pub noise_std_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            len_range: (192, 512),
            max_components: 3,
            frequency: Frequency::Hourly,
            period_range: (6, 64),
            amplitude_range: (0.5, 2.0),
            slope_range: (-0.02, 0.02),
            noise_std_range: (0.05, 0.4),
            shift_range: (-2.0, 2.0),
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if self.max_components == 0 {
            return Err(Error::contract("max_components must be at least 1"));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::contract(format!("invalid length range {:?}", self.len_range)));
        }
        if self.period_range.0 < 2 || self.period_range.0 > self.period_range.1 {
            return Err(Error::contract(format!("invalid period range {:?}", self.period_range)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Trend { slope: f64, intercept: f64 },
    Periodic { period: usize, amplitude: f64, phase: f64, waveform: Waveform },
    Bump { center: f64, width: f64, height: f64 },
    Noise { std: f64 },
    LevelShift { at: usize, delta: f64 },
}

impl Kernel {
    fn sample(spec: &GeneratorSpec, len: usize, rng: &mut Prng) -> Kernel {
        match rng.below(5) {
            0 => Kernel::Trend {
                slope: rng.uniform(spec.slope_range.0, spec.slope_range.1),
                intercept: rng.uniform(-1.0, 1.0),
            },
            1 => Kernel::Periodic {
                period: rng.range_inclusive(spec.period_range.0, spec.period_range.1.min(len / 2).max(spec.period_range.0)),
                amplitude: rng.uniform(spec.amplitude_range.0, spec.amplitude_range.1),
                phase: rng.uniform(0.0, 1.0),
                waveform: match rng.below(3) {
                    0 => Waveform::Sine,
                    1 => Waveform::Sawtooth,
                    _ => Waveform::Square,
                },
            },
            2 => Kernel::Bump {
                center: rng.uniform(0.2, 0.8) * len as f64,
                width: rng.uniform(0.03, 0.15) * len as f64,
                height: rng.uniform(-2.0, 2.0),
            },
            3 => Kernel::Noise { std: rng.uniform(spec.noise_std_range.0, spec.noise_std_range.1) },
            _ => Kernel::LevelShift {
                at: rng.below(len.max(1)),
                delta: rng.uniform(spec.shift_range.0, spec.shift_range.1),
            },
        }
    }

    fn add_into(&self, out: &mut [f64], rng: &mut Prng) {
        match *self {
            Kernel::Trend { slope, intercept } => {
                for (t, v) in out.iter_mut().enumerate() {
                    *v += intercept + slope * t as f64;
                }
            }
            Kernel::Periodic { period, amplitude, phase, waveform } => {
                for (t, v) in out.iter_mut().enumerate() {
                    // Index modulo period keeps the signal exactly periodic
                    // in floating point.
                    let frac = (t % period) as f64 / period as f64 + phase;
                    let frac = frac - frac.floor();
                    *v += amplitude * waveform_value(waveform, frac);
                }
            }
            Kernel::Bump { center, width, height } => {
                for (t, v) in out.iter_mut().enumerate() {
                    let z = (t as f64 - center) / width;
                    *v += height * (-0.5 * z * z).exp();
                }
            }
            Kernel::Noise { std } => {
                for v in out.iter_mut() {
                    *v += std * rng.normal();
                }
            }
            Kernel::LevelShift { at, delta } => {
                for v in out.iter_mut().skip(at) {
                    *v += delta;
                }
            }
        }
    }
}

fn waveform_value(w: Waveform, frac: f64) -> f64 {
    match w {
        Waveform::Sine => (std::f64::consts::TAU * frac).sin(),
        Waveform::Sawtooth => 2.0 * frac - 1.0,
        Waveform::Square => {
            if frac < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Generate series `index` of the corpus (pure in `(spec.seed, index)`).
pub fn generate_one(spec: &GeneratorSpec, index: u64) -> Result<Series> {
    spec.validate()?;
    let mut rng = Prng::derive(spec.seed, index);
    let len = rng.range_inclusive(spec.len_range.0, spec.len_range.1);
    let components = rng.range_inclusive(1, spec.max_components);
    let mut values = vec![0.0; len];
    for _ in 0..components {
        let kernel = Kernel::sample(spec, len, &mut rng);
        kernel.add_into(&mut values, &mut rng);
    }
    Series::fully_observed(format!("synth-{:08x}-{index:06}", spec.seed), values, spec.frequency)
}

pub fn generate(spec: &GeneratorSpec, count: usize) -> Result<Vec<Series>> {
    (0..count as u64).map(|i| generate_one(spec, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    AmplitudeModulation,
    Censor,
}

/// Multiply by a slowly varying positive envelope `1 + a·sin(…)` with
/// values inside `[0.5, 1.5]`.
pub fn amplitude_modulate(series: &Series, amplitude: f64, cycles: f64, phase: f64) -> Result<Series> {
    if !(0.0..=0.5).contains(&amplitude) {
        return Err(Error::contract(format!("envelope amplitude {amplitude} outside [0, 0.5]")));
    }
    let t_len = series.len() as f64;
    let values = series
        .values
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let envelope = 1.0 + amplitude * (std::f64::consts::TAU * cycles * t as f64 / t_len + phase).sin();
            v * envelope
        })
        .collect();
    Series::new(series.id.clone(), values, series.observed.clone(), series.frequency)
}

/// Clip everything below the `q`-quantile to that threshold. The threshold
/// is the `⌈q·T⌉`-th smallest value (ties broken by index), so exactly that
/// many positions equal the threshold afterwards when values are distinct.
pub fn censor_at_quantile(series: &Series, q: f64) -> Result<Series> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::contract(format!("censor quantile {q} outside [0, 1)")));
    }
    let t = series.len();
    let k = ((q * t as f64).ceil() as usize).clamp(1, t);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        series.values[a]
            .partial_cmp(&series.values[b])
            .expect("finite series values")
            .then(a.cmp(&b))
    });
    let threshold = series.values[order[k - 1]];
    let values = series.values.iter().map(|&v| v.max(threshold)).collect();
    Series::new(series.id.clone(), values, series.observed.clone(), series.frequency)
}

/// Apply one augmentation with parameters drawn from `rng`. Length and
/// observation mask are preserved.
pub fn augment(series: &Series, mode: AugmentMode, rng: &mut Prng) -> Result<Series> {
    if series.len() < 8 {
        return Err(Error::contract("augmentation requires at least 8 points"));
    }
    match mode {
        AugmentMode::AmplitudeModulation => {
            let amplitude = rng.uniform(0.1, 0.5);
            let cycles = rng.uniform(0.5, 3.0);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            amplitude_modulate(series, amplitude, cycles, phase)
        }
        AugmentMode::Censor => {
            let q = rng.uniform(0.05, 0.35);
            censor_at_quantile(series, q)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictabilityTier {
    High,
    Mid,
    Low,
}

impl PredictabilityTier {
    /// Corpus-mixing weight (high:mid:low = 3:2:1).
    pub fn weight(self) -> f64 {
        match self {
            PredictabilityTier::High => 3.0,
            PredictabilityTier::Mid => 2.0,
            PredictabilityTier::Low => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityProfile {
    pub periodicity_strength: f64,
    pub trend_strength: f64,
    pub noise_level: f64,
    pub tier: PredictabilityTier,
    /// Un-normalized sampling weight (the tier weight); the sampler
    /// normalizes across the corpus.
    pub sampling_weight: f64,
}

const VAR_EPS: f64 = 1e-12;

fn classify(periodicity: f64, trend: f64, noise: f64) -> PredictabilityTier {
    if (periodicity > 0.6 || trend > 0.8) && noise < 0.5 {
        PredictabilityTier::High
    } else if noise > 1.2 {
        PredictabilityTier::Low
    } else {
        PredictabilityTier::Mid
    }
}

/// Score periodicity (max normalized autocorrelation over lags 2..T/2),
/// trend (R² of a least-squares line), and noise (std of first differences
/// relative to the series std), then bucket into a predictability tier.
pub fn score_predictability(series: &Series) -> Result<QualityProfile> {
    let x = &series.values;
    let t = x.len();
    if t < 16 {
        return Err(Error::contract(format!("predictability scoring needs T ≥ 16, got {t}")));
    }
    let n = t as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= VAR_EPS {
        // Constant series: trivially predictable.
        return Ok(QualityProfile {
            periodicity_strength: 0.0,
            trend_strength: 0.0,
            noise_level: 0.0,
            tier: PredictabilityTier::High,
            sampling_weight: PredictabilityTier::High.weight(),
        });
    }

    let mut periodicity: f64 = 0.0;
    for lag in 2..=t / 2 {
        let m = t - lag;
        let mut acc = 0.0;
        for i in 0..m {
            acc += (x[i] - mean) * (x[i + lag] - mean);
        }
        let r = acc / m as f64 / var;
        periodicity = periodicity.max(r);
    }
    let periodicity = periodicity.clamp(0.0, 1.0);

    // Least-squares line through (t, x_t).
    let tm = (n - 1.0) / 2.0;
    let stt: f64 = (0..t).map(|i| (i as f64 - tm) * (i as f64 - tm)).sum();
    let stx: f64 = (0..t).map(|i| (i as f64 - tm) * (x[i] - mean)).sum();
    let slope = stx / stt;
    let detrended_var = (0..t)
        .map(|i| {
            let fit = mean + slope * (i as f64 - tm);
            (x[i] - fit) * (x[i] - fit)
        })
        .sum::<f64>()
        / n;
    let trend = (1.0 - detrended_var / var.max(VAR_EPS)).clamp(0.0, 1.0);

    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let dn = diffs.len() as f64;
    let dmean = diffs.iter().sum::<f64>() / dn;
    let dvar = diffs.iter().map(|v| (v - dmean) * (v - dmean)).sum::<f64>() / dn;
    let noise = (dvar.max(VAR_EPS) / var.max(VAR_EPS)).sqrt();

    let tier = classify(periodicity, trend, noise);
    Ok(QualityProfile {
        periodicity_strength: periodicity,
        trend_strength: trend,
        noise_level: noise,
        tier,
        sampling_weight: tier.weight(),
    })
}

/// Draws series indices with probability proportional to tier weight.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl WeightedSampler {
    pub fn new(profiles: &[QualityProfile]) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::contract("weighted sampler over an empty corpus"));
        }
        let mut cumulative = Vec::with_capacity(profiles.len());
        let mut total = 0.0;
        for p in profiles {
            if p.sampling_weight <= 0.0 || !p.sampling_weight.is_finite() {
                return Err(Error::contract("sampling weights must be positive"));
            }
            total += p.sampling_weight;
            cumulative.push(total);
        }
        Ok(WeightedSampler { cumulative, total })
    }

    /// Normalized per-series probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) / self.total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn draw(&self, rng: &mut Prng) -> usize {
        let u = rng.unit() * self.total;
        let idx = match self.cumulative.binary_search_by(|c| c.partial_cmp(&u).expect("finite weights")) {
            Ok(i) => i + 1,
            Err(i) => i,
        };
        idx.min(self.cumulative.len() - 1)
    }
}
