//! Univariate time series with an observation mask and frequency tag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Secondly,
    Minutely,
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Quarterly,
    Yearly,
    None,
}

impl Frequency {
    /// Conventional season length for the seasonal-naive baseline.
    pub fn season_length(self) -> usize {
        match self {
            Frequency::Secondly => 60,
            Frequency::Minutely => 60,
            Frequency::Hourly => 24,
            Frequency::Daily => 7,
            Frequency::Weekly => 52,
            Frequency::Monthly => 12,
            Frequency::Quarterly => 4,
            Frequency::Yearly => 1,
            Frequency::None => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::format(format!("unknown frequency tag {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Secondly => "secondly",
            Frequency::Minutely => "minutely",
            Frequency::Hourly => "hourly",
            Frequency::Daily => "daily",
            Frequency::Weekly => "weekly",
            Frequency::Monthly => "monthly",
            Frequency::Quarterly => "quarterly",
            Frequency::Yearly => "yearly",
            Frequency::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    /// Values; missing positions hold the canonical fill 0.0.
    pub values: Vec<f64>,
    /// `false` marks a missing observation.
    pub observed: Vec<bool>,
    pub frequency: Frequency,
}

impl Series {
    pub fn new(
        id: impl Into<String>,
        mut values: Vec<f64>,
        observed: Vec<bool>,
        frequency: Frequency,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("series must contain at least one point"));
        }
        if values.len() != observed.len() {
            return Err(Error::contract(format!(
                "values ({}) and observation mask ({}) lengths differ",
                values.len(),
                observed.len()
            )));
        }
        for (v, &obs) in values.iter_mut().zip(&observed) {
            if !obs {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite("observed series value is not finite".into()));
            }
        }
        Ok(Series { id: id.into(), values, observed, frequency })
    }

    /// Fully observed series.
    pub fn fully_observed(id: impl Into<String>, values: Vec<f64>, frequency: Frequency) -> Result<Self> {
        let observed = vec![true; values.len()];
        Series::new(id, values, observed, frequency)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sub-range as a new series (same id and frequency).
    pub fn window(&self, start: usize, len: usize) -> Result<Series> {
        if start + len > self.len() || len == 0 {
            return Err(Error::contract(format!(
                "window {start}..{} out of series of length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Series {
            id: self.id.clone(),
            values: self.values[start..start + len].to_vec(),
            observed: self.observed[start..start + len].to_vec(),
            frequency: self.frequency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_positions_are_zero_filled() {
        let s = Series::new("a", vec![5.0, 9.0, 7.0], vec![true, false, true], Frequency::Daily).unwrap();
        assert_eq!(s.values, vec![5.0, 0.0, 7.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(Series::new("a", vec![1.0], vec![true, false], Frequency::None).is_err());
        assert!(Series::new("a", vec![], vec![], Frequency::None).is_err());
    }

    #[test]
    fn frequency_round_trip() {
        for f in [
            Frequency::Secondly,
            Frequency::Minutely,
            Frequency::Hourly,
            Frequency::Daily,
            Frequency::Weekly,
            Frequency::Monthly,
            Frequency::Quarterly,
            Frequency::Yearly,
            Frequency::None,
        ] {
            assert_eq!(Frequency::parse(f.as_str()).unwrap(), f);
        }
        assert!(Frequency::parse("fortnightly").is_err());
    }
}
