//! Per-layer detection scores.
//!
//! Every scorer is oriented so that a higher score means more ID-like. Logit
//! scorers (MSP, energy, ODIN temperature scaling) are per-sample functions;
//! the k-NN scorer needs a reference set and returns the negated distance to
//! the k-th nearest reference point. Scores are computed in `f64`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurepack::{FeatureMatrix, LayerKind, LayerSpec};
use crate::knn::KnnIndex;

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_ENERGY_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("degenerate logits: {0}")]
    DegenerateLogits(String),
    #[error("cannot L2-normalize a zero vector")]
    ZeroVector,
    #[error("k = {k} but only {available} reference points are available")]
    TooFewPoints { k: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("scorer {method} cannot be applied to a {kind:?} layer")]
    KindMismatch { method: ScoreMethod, kind: LayerKind },
    #[error("invalid scorer config: {0}")]
    InvalidConfig(String),
}

impl ScoreError {
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreError::DegenerateLogits(_) => "DegenerateLogits",
            ScoreError::ZeroVector => "ZeroVector",
            ScoreError::TooFewPoints { .. } => "TooFewPoints",
            ScoreError::DimMismatch { .. } => "DimMismatch",
            ScoreError::KindMismatch { .. } => "KindMismatch",
            ScoreError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Msp,
    Energy,
    Odin,
    Knn,
}

impl ScoreMethod {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Odin => "odin",
            ScoreMethod::Knn => "knn",
        }
    }

    /// The layer kind this scorer consumes.
    pub fn input_kind(self) -> LayerKind {
        match self {
            ScoreMethod::Knn => LayerKind::Features,
            _ => LayerKind::Logits,
        }
    }

    fn default_temperature(self) -> f64 {
        match self {
            ScoreMethod::Odin => DEFAULT_ODIN_TEMPERATURE,
            _ => DEFAULT_ENERGY_TEMPERATURE,
        }
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(ScoreMethod::Msp),
            "energy" => Ok(ScoreMethod::Energy),
            "odin" => Ok(ScoreMethod::Odin),
            "knn" => Ok(ScoreMethod::Knn),
            other => Err(ScoreError::InvalidConfig(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScorerConfig {
    pub method: ScoreMethod,
    /// Softmax temperature for energy and ODIN; ignored otherwise.
    pub temperature: f64,
    /// Neighbour rank for k-NN; ignored otherwise.
    pub k: usize,
    /// L2-normalize features before k-NN.
    pub normalize: bool,
}

// Hand-written so the temperature default follows the method.
impl<'de> Deserialize<'de> for ScorerConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            method: ScoreMethod,
            temperature: Option<f64>,
            k: Option<usize>,
            normalize: Option<bool>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let mut config = ScorerConfig::for_method(raw.method);
        if let Some(t) = raw.temperature {
            config.temperature = t;
        }
        if let Some(k) = raw.k {
            config.k = k;
        }
        if let Some(n) = raw.normalize {
            config.normalize = n;
        }
        Ok(config)
    }
}

impl ScorerConfig {
    pub fn for_method(method: ScoreMethod) -> Self {
        Self {
            method,
            temperature: method.default_temperature(),
            k: DEFAULT_K,
            normalize: true,
        }
    }

    pub fn msp() -> Self {
        Self::for_method(ScoreMethod::Msp)
    }

    pub fn energy(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::for_method(ScoreMethod::Energy)
        }
    }

    pub fn odin(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::for_method(ScoreMethod::Odin)
        }
    }

    pub fn knn(k: usize) -> Self {
        Self {
            k,
            ..Self::for_method(ScoreMethod::Knn)
        }
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ScoreError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(ScoreError::InvalidConfig("k must be positive".into()));
        }
        Ok(())
    }

    /// Short tag used in file names, e.g. `knn` or `energy`.
    pub fn tag(&self) -> &'static str {
        self.method.name()
    }
}

/// Per-layer scorer choice: defaults by layer kind plus overrides by layer name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerAssignment {
    #[serde(default = "default_features_scorer")]
    pub features: ScorerConfig,
    #[serde(default = "default_logits_scorer")]
    pub logits: ScorerConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, ScorerConfig>,
}

fn default_features_scorer() -> ScorerConfig {
    ScorerConfig::knn(DEFAULT_K)
}

fn default_logits_scorer() -> ScorerConfig {
    ScorerConfig::energy(DEFAULT_ENERGY_TEMPERATURE)
}

impl Default for ScorerAssignment {
    fn default() -> Self {
        Self {
            features: default_features_scorer(),
            logits: default_logits_scorer(),
            layers: BTreeMap::new(),
        }
    }
}

impl ScorerAssignment {
    /// Same scorer for every features layer.
    pub fn uniform_features(config: ScorerConfig) -> Self {
        Self {
            features: config,
            ..Self::default()
        }
    }

    pub fn for_layer(&self, layer: &LayerSpec) -> ScorerConfig {
        if let Some(c) = self.layers.get(&layer.name) {
            return *c;
        }
        match layer.kind {
            LayerKind::Features => self.features,
            LayerKind::Logits => self.logits,
        }
    }
}

fn check_logits(logits: &[f64]) -> Result<(), ScoreError> {
    if logits.len() < 2 {
        return Err(ScoreError::DegenerateLogits(format!(
            "need at least 2 classes, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::DegenerateLogits("non-finite logit".into()));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<(), ScoreError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ScoreError::InvalidConfig(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64, ScoreError> {
    check_logits(logits)?;
    let top = max_of(logits);
    let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    Ok(1.0 / denom)
}

/// Negated free energy, `T * logsumexp(logits / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64, ScoreError> {
    check_logits(logits)?;
    check_temperature(temperature)?;
    let top = max_of(logits);
    let sum: f64 = logits.iter().map(|l| ((l - top) / temperature).exp()).sum();
    Ok(top + temperature * sum.ln())
}

/// Maximum softmax probability of temperature-scaled logits.
pub fn odin_score(logits: &[f64], temperature: f64) -> Result<f64, ScoreError> {
    check_logits(logits)?;
    check_temperature(temperature)?;
    let top = max_of(logits);
    let denom: f64 = logits.iter().map(|l| ((l - top) / temperature).exp()).sum();
    Ok(1.0 / denom)
}

/// Builds the k-NN reference index for one features layer.
pub fn build_knn_index(calibration: &FeatureMatrix, config: &ScorerConfig) -> Result<KnnIndex, ScoreError> {
    config.validate()?;
    if calibration.rows() < config.k {
        return Err(ScoreError::TooFewPoints {
            k: config.k,
            available: calibration.rows(),
        });
    }
    KnnIndex::build(calibration.data(), calibration.dim(), config.normalize)
}

/// Negated distance from `feature` to its k-th nearest reference point.
pub fn knn_score(index: &KnnIndex, feature: &[f32], k: usize) -> Result<f64, ScoreError> {
    Ok(-index.kth_distance(feature, k)?)
}

/// Scores for every row of one layer on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub layer: LayerSpec,
    pub scorer: ScorerConfig,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A scorer bound to one layer, holding whatever reference data it needs.
#[derive(Clone, Debug)]
pub struct LayerScorer {
    layer: LayerSpec,
    config: ScorerConfig,
    index: Option<KnnIndex>,
}

impl LayerScorer {
    /// Prepares a scorer for `layer`. k-NN scorers index `reference`.
    pub fn new(layer: &LayerSpec, config: ScorerConfig, reference: Option<&FeatureMatrix>) -> Result<Self, ScoreError> {
        config.validate()?;
        if config.method.input_kind() != layer.kind {
            return Err(ScoreError::KindMismatch {
                method: config.method,
                kind: layer.kind,
            });
        }
        let index = match config.method {
            ScoreMethod::Knn => {
                let reference = reference.ok_or_else(|| {
                    ScoreError::InvalidConfig(format!("k-NN on layer `{}` needs reference data", layer.name))
                })?;
                if reference.dim() != layer.dim {
                    return Err(ScoreError::DimMismatch {
                        expected: layer.dim,
                        actual: reference.dim(),
                    });
                }
                Some(build_knn_index(reference, &config)?)
            }
            _ => None,
        };
        Ok(Self {
            layer: layer.clone(),
            config,
            index,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn layer(&self) -> &LayerSpec {
        &self.layer
    }

    pub fn index(&self) -> Option<&KnnIndex> {
        self.index.as_ref()
    }

    pub fn score_row(&self, row: &[f32]) -> Result<f64, ScoreError> {
        if row.len() != self.layer.dim {
            return Err(ScoreError::DimMismatch {
                expected: self.layer.dim,
                actual: row.len(),
            });
        }
        match (&self.index, self.config.method) {
            (Some(index), _) => knn_score(index, row, self.config.k),
            (None, method) => {
                let logits: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                match method {
                    ScoreMethod::Msp => msp_score(&logits),
                    ScoreMethod::Energy => energy_score(&logits, self.config.temperature),
                    ScoreMethod::Odin => odin_score(&logits, self.config.temperature),
                    ScoreMethod::Knn => unreachable!("k-NN scorers always hold an index"),
                }
            }
        }
    }

    pub fn score(&self, matrix: &FeatureMatrix) -> Result<ScoreVector, ScoreError> {
        if matrix.dim() != self.layer.dim {
            return Err(ScoreError::DimMismatch {
                expected: self.layer.dim,
                actual: matrix.dim(),
            });
        }
        let values = match &self.index {
            Some(index) => index
                .kth_distances(matrix.data(), self.config.k)?
                .into_iter()
                .map(|d| -d)
                .collect(),
            None => matrix
                .iter_rows()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|row| self.score_row(row))
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(ScoreVector {
            values,
            layer: self.layer.clone(),
            scorer: self.config,
        })
    }

    /// Scores the k-NN reference set against itself, leaving each point out of
    /// its own neighbour search. Returns `None` for scorers without a reference.
    pub fn score_reference_loo(&self) -> Result<Option<ScoreVector>, ScoreError> {
        let Some(index) = &self.index else {
            return Ok(None);
        };
        let values = index
            .kth_distances_loo(self.config.k)?
            .into_iter()
            .map(|d| -d)
            .collect();
        Ok(Some(ScoreVector {
            values,
            layer: self.layer.clone(),
            scorer: self.config,
        }))
    }
}

/// Scores every row of `matrix`; k-NN uses `calibration` as the reference set.
pub fn score_layer(
    matrix: &FeatureMatrix,
    config: &ScorerConfig,
    calibration: &FeatureMatrix,
) -> Result<ScoreVector, ScoreError> {
    LayerScorer::new(matrix.layer(), *config, Some(calibration))?.score(matrix)
}
