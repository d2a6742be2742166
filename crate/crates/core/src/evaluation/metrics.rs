use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPair {
    pub image_id: String,
    pub predicted: u64,
    pub ground_truth: u64,
}

/// Per-image predicted and true counts, one entry per image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountSeries {
    pairs: Vec<CountPair>,
}

impl CountSeries {
    pub fn new(pairs: Vec<CountPair>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = pairs.iter().find(|p| !seen.insert(p.image_id.as_str())) {
            return Err(Error::invalid(format!(
                "image `{}` appears twice in a count series",
                dup.image_id
            )));
        }
        Ok(CountSeries { pairs })
    }

    /// Series over images named by position (`"0"`, `"1"`, ...).
    pub fn from_counts(predicted: &[u64], ground_truth: &[u64]) -> Result<Self> {
        if predicted.len() != ground_truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} ground-truth counts",
                predicted.len(),
                ground_truth.len()
            )));
        }
        CountSeries::new(
            predicted
                .iter()
                .zip(ground_truth)
                .enumerate()
                .map(|(i, (&p, &g))| CountPair {
                    image_id: i.to_string(),
                    predicted: p,
                    ground_truth: g,
                })
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[CountPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl<'de> Deserialize<'de> for CountSeries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            pairs: Vec<CountPair>,
        }
        CountSeries::new(Raw::deserialize(d)?.pairs).map_err(serde::de::Error::custom)
    }
}

fn abs_diff(p: &CountPair) -> u64 {
    p.predicted.abs_diff(p.ground_truth)
}

pub fn mae(series: &CountSeries) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty("MAE of an empty count series"));
    }
    let total: u64 = series.pairs.iter().map(abs_diff).sum();
    Ok(total as f64 / series.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapeMode {
    /// Mean over images of the relative error.
    #[default]
    PerImage,
    /// Total absolute error over total ground truth.
    Aggregate,
}

impl FromStr for MapeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(MapeMode::PerImage),
            "aggregate" => Ok(MapeMode::Aggregate),
            other => Err(Error::invalid(format!(
                "unknown MAPE mode `{other}` (expected per-image or aggregate)"
            ))),
        }
    }
}

impl fmt::Display for MapeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapeMode::PerImage => "per-image",
            MapeMode::Aggregate => "aggregate",
        })
    }
}

/// Mean absolute percentage error, in percent. Any image with a zero ground
/// truth is an error in either mode rather than being skipped.
pub fn mape(series: &CountSeries, mode: MapeMode) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty("MAPE of an empty count series"));
    }
    if let Some(p) = series.pairs.iter().find(|p| p.ground_truth == 0) {
        return Err(Error::Metric(format!(
            "MAPE undefined at zero ground truth (image `{}`)",
            p.image_id
        )));
    }
    Ok(match mode {
        MapeMode::PerImage => {
            let sum: f64 = series
                .pairs
                .iter()
                .map(|p| abs_diff(p) as f64 / p.ground_truth as f64)
                .sum();
            100.0 * sum / series.len() as f64
        }
        MapeMode::Aggregate => {
            let err: u64 = series.pairs.iter().map(abs_diff).sum();
            let gt: u64 = series.pairs.iter().map(|p| p.ground_truth).sum();
            100.0 * err as f64 / gt as f64
        }
    })
}
