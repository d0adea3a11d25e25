//! Corpus file formats: JSON-lines series files and a JSON manifest with
//! per-file tier overrides and per-series quality profiles.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{Frequency, Series};
use crate::synth::{score_predictability, PredictabilityTier, QualityProfile};

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    id: String,
    freq: String,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observed: Option<Vec<u8>>,
}

pub fn write_series_jsonl(path: &Path, series: &[Series]) -> Result<()> {
    let mut out = Vec::new();
    for s in series {
        let observed = if s.observed.iter().all(|&o| o) {
            None
        } else {
            Some(s.observed.iter().map(|&o| u8::from(o)).collect())
        };
        let record = SeriesRecord {
            id: s.id.clone(),
            freq: s.frequency.as_str().to_string(),
            values: s.values.clone(),
            observed,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::format(format!("encoding series {}: {e}", s.id)))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_series_jsonl(path: &Path) -> Result<Vec<Series>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut series = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SeriesRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{}:{}: invalid series record: {e}", path.display(), lineno + 1))
        })?;
        let frequency = Frequency::parse(&record.freq)?;
        let observed = match record.observed {
            Some(flags) => {
                if flags.len() != record.values.len() {
                    return Err(Error::format(format!(
                        "{}:{}: observed mask length mismatch",
                        path.display(),
                        lineno + 1
                    )));
                }
                flags.iter().map(|&f| f != 0).collect()
            }
            None => vec![true; record.values.len()],
        };
        series.push(Series::new(record.id, record.values, observed, frequency)?);
    }
    Ok(series)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    /// Forces every series in the file into one tier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_override: Option<PredictabilityTier>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    /// Per-series profiles keyed by series id.
    pub profiles: BTreeMap<String, QualityProfile>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("encoding manifest: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: invalid manifest: {e}", path.display())))
}

/// Load every series referenced by a manifest, with aligned quality
/// profiles. Missing profiles are recomputed; file tier overrides replace
/// the scored tier (and weight).
pub fn load_corpus(manifest_path: &Path) -> Result<(Vec<Series>, Vec<QualityProfile>)> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut all_series = Vec::new();
    let mut all_profiles = Vec::new();
    for entry in &manifest.files {
        let file_path = base.join(&entry.path);
        let series = read_series_jsonl(&file_path)?;
        for s in series {
            let mut profile = match manifest.profiles.get(&s.id) {
                Some(p) => p.clone(),
                None => score_predictability(&s)?,
            };
            if let Some(tier) = entry.tier_override {
                profile.tier = tier;
                profile.sampling_weight = tier.weight();
            }
            all_profiles.push(profile);
            all_series.push(s);
        }
    }
    Ok((all_series, all_profiles))
}

/// Load a corpus from either a manifest (`.json`) or a bare series file
/// (`.jsonl`), scoring profiles as needed.
pub fn load_corpus_auto(path: &Path) -> Result<(Vec<Series>, Vec<QualityProfile>)> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let series = read_series_jsonl(path)?;
        let profiles = series.iter().map(score_predictability).collect::<Result<Vec<_>>>()?;
        Ok((series, profiles))
    } else {
        load_corpus(path)
    }
}
