//! Empirical calibration: thresholds and p-values from ID calibration scores.
//!
//! A [`CalibrationTable`] holds the sorted calibration scores of one
//! (layer, scorer) pair. Scores are oriented higher-is-ID, so a test score's
//! p-value is the smoothed fraction of calibration scores at or below it:
//!
//! ```text
//! p = (c + 1) / (n + 2),   c = #{calibration scores <= score}
//! ```
//!
//! which stays strictly inside `(0, 1)` for the Fisher and Cauchy transforms.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurepack::LayerSpec;
use crate::scorers::ScoreVector;

/// Smallest calibration set accepted by [`fit_calibration`].
pub const MIN_CALIBRATION_SAMPLES: usize = 20;
/// Below this size a warning is logged: p-value resolution is `1/(n+2)`.
pub const RECOMMENDED_CALIBRATION_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least {min} calibration samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("non-finite calibration score at position {0}")]
    NonFinite(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt calibration table {}: {reason}", path.display())]
    CorruptTable { path: PathBuf, reason: String },
    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CalibrationError {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibrationError::TooFewSamples { .. } => "TooFewSamples",
            CalibrationError::NonFinite(_) => "NonFinite",
            CalibrationError::InvalidAlpha(_) => "InvalidAlpha",
            CalibrationError::ShapeMismatch(_) => "ShapeMismatch",
            CalibrationError::CorruptTable { .. } => "CorruptTable",
            CalibrationError::Io { .. } => "IoFailure",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Id,
    Ood,
}

impl Decision {
    pub fn is_ood(self) -> bool {
        self == Decision::Ood
    }
}

/// Sorted ID calibration scores for one (layer, scorer) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    sorted: Vec<f64>,
}

impl CalibrationTable {
    /// Fits a table, requiring at least [`MIN_CALIBRATION_SAMPLES`] scores.
    pub fn fit(scores: &[f64]) -> Result<Self, CalibrationError> {
        Self::fit_with_min(scores, MIN_CALIBRATION_SAMPLES)
    }

    /// Fits a table with a caller-chosen minimum size (at least 1).
    pub fn fit_with_min(scores: &[f64], min_samples: usize) -> Result<Self, CalibrationError> {
        let min = min_samples.max(1);
        if scores.len() < min {
            return Err(CalibrationError::TooFewSamples { n: scores.len(), min });
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
            return Err(CalibrationError::NonFinite(pos));
        }
        if scores.len() < RECOMMENDED_CALIBRATION_SAMPLES {
            log::warn!(
                "calibration set has {} samples; p-value resolution is 1/{}",
                scores.len(),
                scores.len() + 2
            );
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted
    }

    /// Empirical CDF `#{s_i <= s} / n`.
    pub fn ecdf(&self, score: f64) -> f64 {
        self.count_at_or_below(score) as f64 / self.sorted.len() as f64
    }

    fn count_at_or_below(&self, score: f64) -> usize {
        self.sorted.partition_point(|&s| s <= score)
    }

    /// Smallest calibration score whose empirical CDF reaches `alpha`.
    pub fn threshold_at(&self, alpha: f64) -> Result<f64, CalibrationError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CalibrationError::InvalidAlpha(alpha));
        }
        let n = self.sorted.len() as f64;
        // F(sorted[i]) >= (i+1)/n, and values below sorted[i] reach at most i/n,
        // so the infimum is sorted[i] for the first i with (i+1)/n >= alpha.
        let (mut lo, mut hi) = (0, self.sorted.len() - 1);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if (mid + 1) as f64 / n >= alpha {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Ok(self.sorted[lo])
    }

    /// Smoothed p-value `(c + 1) / (n + 2)`.
    pub fn p_value(&self, score: f64) -> f64 {
        let c = self.count_at_or_below(score);
        (c + 1) as f64 / (self.sorted.len() + 2) as f64
    }

    /// Bounds `[1/(n+2), (n+1)/(n+2)]` of the attainable p-values.
    pub fn p_value_range(&self) -> (f64, f64) {
        let d = (self.sorted.len() + 2) as f64;
        (1.0 / d, (self.sorted.len() + 1) as f64 / d)
    }

    /// Writes the sorted scores as raw little-endian `f64`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.sorted.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|source| CalibrationError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CalibrationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let corrupt = |reason: &str| CalibrationError::CorruptTable {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.is_empty() || bytes.len() % 8 != 0 {
            return Err(corrupt("length is not a positive multiple of 8"));
        }
        let sorted: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite score"));
        }
        if sorted.windows(2).any(|w| w[0] > w[1]) {
            return Err(corrupt("scores are not sorted"));
        }
        Ok(Self { sorted })
    }
}

/// File name for a persisted table.
pub fn table_file_name(layer_index: usize, scorer_tag: &str) -> String {
    format!("calib_{layer_index}_{scorer_tag}.bin")
}

pub fn fit_calibration(scores: &ScoreVector) -> Result<CalibrationTable, CalibrationError> {
    CalibrationTable::fit(&scores.values)
}

pub fn threshold_at(table: &CalibrationTable, alpha: f64) -> Result<f64, CalibrationError> {
    table.threshold_at(alpha)
}

/// Single-layer rule: OOD iff `score < lambda`.
pub fn decide_threshold(score: f64, lambda: f64) -> Decision {
    if score < lambda {
        Decision::Ood
    } else {
        Decision::Id
    }
}

pub fn p_value(table: &CalibrationTable, score: f64) -> f64 {
    table.p_value(score)
}

/// Per-sample p-values across layers, stored row-major `(samples, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PValueMatrix {
    layers: Vec<LayerSpec>,
    values: Vec<f64>,
}

impl PValueMatrix {
    /// Wraps raw row-major p-values; `values.len()` must be a multiple of `layers.len()`.
    pub fn from_rows(layers: Vec<LayerSpec>, values: Vec<f64>) -> Result<Self, CalibrationError> {
        if layers.is_empty() || !values.len().is_multiple_of(layers.len()) {
            return Err(CalibrationError::ShapeMismatch(format!(
                "{} values for {} layers",
                values.len(),
                layers.len()
            )));
        }
        Ok(Self { layers, values })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of layers.
    pub fn m(&self) -> usize {
        self.layers.len()
    }

    pub fn n_samples(&self) -> usize {
        self.values.len() / self.layers.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.m();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.m())
    }

    /// All p-values of one layer (column `j`, 0-based).
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}

/// p-values of every test sample against every layer's table, columns in layer-index order.
///
/// `tables[i]` must belong to the layer of `scores[i]`.
pub fn p_matrix(tables: &[CalibrationTable], scores: &[ScoreVector]) -> Result<PValueMatrix, CalibrationError> {
    if tables.is_empty() || tables.len() != scores.len() {
        return Err(CalibrationError::ShapeMismatch(format!(
            "{} tables for {} score vectors",
            tables.len(),
            scores.len()
        )));
    }
    let n = scores[0].len();
    if let Some(bad) = scores.iter().find(|s| s.len() != n) {
        return Err(CalibrationError::ShapeMismatch(format!(
            "layer {} has {} samples, expected {n}",
            bad.layer.index,
            bad.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by_key(|&i| scores[i].layer.index);
    if order
        .windows(2)
        .any(|w| scores[w[0]].layer.index == scores[w[1]].layer.index)
    {
        return Err(CalibrationError::ShapeMismatch("duplicate layer index".into()));
    }
    let m = order.len();
    let mut values = vec![0.0; n * m];
    for (col, &i) in order.iter().enumerate() {
        for (t, &s) in scores[i].values.iter().enumerate() {
            values[t * m + col] = tables[i].p_value(s);
        }
    }
    let layers = order.iter().map(|&i| scores[i].layer.clone()).collect();
    Ok(PValueMatrix { layers, values })
}
