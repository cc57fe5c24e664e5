//! Fusion of per-layer p-values into one ID/OOD decision.
//!
//! Step-up procedures (BH, adaptive BH, BY) sort the `m` p-values and reject
//! up to the largest rank `k` passing `p_(k) <= alpha * k / c`, with `c = m`,
//! `c = m0_hat` or `c = m * H(m)` respectively. Fisher and Cauchy build a
//! single statistic and compare it against the upper `alpha` quantile of its
//! null law. The naive rule rejects when any layer rejects on its own, and the
//! last-layer baseline consults layer `m` only.
//!
//! Layer positions in results are 1-based and follow the order of the input
//! p-value slice, which callers keep in layer-index order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrator::Decision;
use crate::statfn::{self, StatError};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombineError {
    #[error("empty p-value vector")]
    EmptyPVector,
    #[error("p-value {value} at layer {layer} is outside the valid range")]
    InvalidPValue { layer: usize, value: f64 },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error("expected {expected} p-values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("method {0} has no continuous combined score")]
    UnsupportedMethod(CombineMethod),
    #[error(transparent)]
    Stat(#[from] StatError),
}

impl CombineError {
    pub fn kind(&self) -> &'static str {
        match self {
            CombineError::EmptyPVector => "EmptyPVector",
            CombineError::InvalidPValue { .. } => "InvalidPValue",
            CombineError::InvalidAlpha(_) => "InvalidAlpha",
            CombineError::BadWeights(_) => "BadWeights",
            CombineError::ShapeMismatch { .. } => "ShapeMismatch",
            CombineError::UnsupportedMethod(_) => "UnsupportedMethod",
            CombineError::Stat(e) => e.kind(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMethod {
    Bh,
    Adabh,
    By,
    Fisher,
    Cauchy,
    NaiveAnd,
    LastLayer,
}

impl CombineMethod {
    pub const ALL: [CombineMethod; 7] = [
        CombineMethod::Bh,
        CombineMethod::Adabh,
        CombineMethod::By,
        CombineMethod::Fisher,
        CombineMethod::Cauchy,
        CombineMethod::NaiveAnd,
        CombineMethod::LastLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombineMethod::Bh => "bh",
            CombineMethod::Adabh => "adabh",
            CombineMethod::By => "by",
            CombineMethod::Fisher => "fisher",
            CombineMethod::Cauchy => "cauchy",
            CombineMethod::NaiveAnd => "naive_and",
            CombineMethod::LastLayer => "last_layer",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            CombineMethod::Bh => "MLOD-BH",
            CombineMethod::Adabh => "MLOD-adaBH",
            CombineMethod::By => "MLOD-BY",
            CombineMethod::Fisher => "MLOD-Fisher",
            CombineMethod::Cauchy => "MLOD-Cauchy",
            CombineMethod::NaiveAnd => "Naive-AND",
            CombineMethod::LastLayer => "Layer@last",
        }
    }

    pub fn is_step_up(self) -> bool {
        matches!(self, CombineMethod::Bh | CombineMethod::Adabh | CombineMethod::By)
    }

    /// Whether [`combined_score`] is defined for this method.
    pub fn has_score(self) -> bool {
        self != CombineMethod::Adabh
    }
}

impl std::fmt::Display for CombineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CombineMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = norm.strip_prefix("mlod_").unwrap_or(&norm);
        match norm {
            "bh" => Ok(CombineMethod::Bh),
            "adabh" | "ada_bh" => Ok(CombineMethod::Adabh),
            "by" => Ok(CombineMethod::By),
            "fisher" => Ok(CombineMethod::Fisher),
            "cauchy" => Ok(CombineMethod::Cauchy),
            "naive_and" | "naive" => Ok(CombineMethod::NaiveAnd),
            "last_layer" | "layer@last" | "last" => Ok(CombineMethod::LastLayer),
            _ => Err(format!("unknown combination method `{s}`")),
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerConfig {
    pub method: CombineMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Cauchy weights; uniform `1/m` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl CombinerConfig {
    pub fn new(method: CombineMethod, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            weights: None,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha, ..self.clone() }
    }
}

/// How `rejected_layers` was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Localization {
    /// Rejection set of a step-up procedure.
    StepUp,
    /// Layers with `p < alpha / m`; diagnostic only, not part of the test.
    Bonferroni,
    /// Layers that reject at level `alpha` on their own.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub decision: Decision,
    /// Fisher `F`, Cauchy `T`, adjusted minimum p for step-up rules, or the
    /// deciding p-value for the single-layer rules.
    pub statistic: f64,
    /// 1-based layer positions.
    pub rejected_layers: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m0_hat: Option<usize>,
    pub localization: Localization,
}

/// Harmonic number `H(m) = sum_{i=1}^m 1/i`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum()
}

/// A combiner bound to a method, level and layer count, with its null
/// quantile precomputed.
#[derive(Clone, Debug)]
pub struct Combiner {
    config: CombinerConfig,
    m: usize,
    weights: Vec<f64>,
    threshold: f64,
    harmonic: f64,
}

impl Combiner {
    pub fn new(config: CombinerConfig, m: usize) -> Result<Self, CombineError> {
        if m == 0 {
            return Err(CombineError::EmptyPVector);
        }
        let alpha = config.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CombineError::InvalidAlpha(alpha));
        }
        let weights = match config.method {
            CombineMethod::Cauchy => match &config.weights {
                Some(w) => {
                    check_weights(w, m)?;
                    w.clone()
                }
                None => vec![1.0 / m as f64; m],
            },
            _ => Vec::new(),
        };
        let threshold = match config.method {
            CombineMethod::Fisher => statfn::chi2_upper_quantile(alpha, 2 * m as u64)?,
            CombineMethod::Cauchy => statfn::cauchy_upper_quantile(alpha)?,
            _ => f64::NAN,
        };
        Ok(Self {
            config,
            m,
            weights,
            threshold,
            harmonic: harmonic(m),
        })
    }

    pub fn config(&self) -> &CombinerConfig {
        &self.config
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Rejection threshold of Fisher's `F` or Cauchy's `T`; NaN for other methods.
    pub fn statistic_threshold(&self) -> f64 {
        self.threshold
    }

    fn check(&self, p: &[f64]) -> Result<(), CombineError> {
        if p.is_empty() {
            return Err(CombineError::EmptyPVector);
        }
        if p.len() != self.m {
            return Err(CombineError::ShapeMismatch {
                expected: self.m,
                actual: p.len(),
            });
        }
        let strict = matches!(self.config.method, CombineMethod::Fisher | CombineMethod::Cauchy);
        for (i, &v) in p.iter().enumerate() {
            let ok = if strict {
                v > 0.0 && v < 1.0
            } else {
                (0.0..=1.0).contains(&v)
            };
            if !ok {
                return Err(CombineError::InvalidPValue { layer: i + 1, value: v });
            }
        }
        Ok(())
    }

    pub fn detect(&self, p: &[f64]) -> Result<DetectionResult, CombineError> {
        self.check(p)?;
        let alpha = self.config.alpha;
        let m = self.m as f64;
        Ok(match self.config.method {
            CombineMethod::Bh => step_up_result(p, alpha, m, None),
            CombineMethod::By => step_up_result(p, alpha, m * self.harmonic, None),
            CombineMethod::Adabh => adaptive_bh(p, alpha),
            CombineMethod::Fisher => {
                let f = fisher_statistic(p);
                threshold_result(f > self.threshold, f, p, alpha)
            }
            CombineMethod::Cauchy => {
                let t = cauchy_statistic(p, &self.weights);
                threshold_result(t > self.threshold, t, p, alpha)
            }
            CombineMethod::NaiveAnd => {
                let rejected: Vec<usize> = positions(p, |v| v < alpha);
                DetectionResult {
                    decision: decision(!rejected.is_empty()),
                    statistic: p.iter().copied().fold(f64::INFINITY, f64::min),
                    rejected_layers: rejected,
                    m0_hat: None,
                    localization: Localization::PerLayer,
                }
            }
            CombineMethod::LastLayer => {
                let last = p[p.len() - 1];
                let ood = last < alpha;
                DetectionResult {
                    decision: decision(ood),
                    statistic: last,
                    rejected_layers: if ood { vec![p.len()] } else { Vec::new() },
                    m0_hat: None,
                    localization: Localization::PerLayer,
                }
            }
        })
    }

    pub fn decide(&self, p: &[f64]) -> Result<Decision, CombineError> {
        Ok(self.detect(p)?.decision)
    }

    /// Continuous score, lower = more OOD.
    pub fn score(&self, p: &[f64]) -> Result<f64, CombineError> {
        self.check(p)?;
        let m = self.m as f64;
        match self.config.method {
            CombineMethod::Bh => Ok(adjusted_min_p(p, &sorted_order(p), m)),
            CombineMethod::By => Ok(adjusted_min_p(p, &sorted_order(p), m * self.harmonic)),
            CombineMethod::Fisher => Ok(-fisher_statistic(p)),
            CombineMethod::Cauchy => Ok(-cauchy_statistic(p, &self.weights)),
            CombineMethod::NaiveAnd => Ok(p.iter().copied().fold(f64::INFINITY, f64::min)),
            CombineMethod::LastLayer => Ok(p[p.len() - 1]),
            CombineMethod::Adabh => Err(CombineError::UnsupportedMethod(CombineMethod::Adabh)),
        }
    }
}

fn check_weights(w: &[f64], m: usize) -> Result<(), CombineError> {
    if w.len() != m {
        return Err(CombineError::BadWeights(format!("{} weights for {m} layers", w.len())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CombineError::BadWeights(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CombineError::BadWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn decision(ood: bool) -> Decision {
    if ood {
        Decision::Ood
    } else {
        Decision::Id
    }
}

fn positions(p: &[f64], pred: impl Fn(f64) -> bool) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| pred(v))
        .map(|(i, _)| i + 1)
        .collect()
}

fn sorted_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    order
}

/// Largest rank `k` (1-based) with `p_(k) <= alpha k / denom`.
fn step_up_rank(p: &[f64], order: &[usize], alpha: f64, denom: f64) -> Option<usize> {
    order
        .iter()
        .enumerate()
        .rev()
        .find(|&(r, &i)| p[i] <= alpha * (r + 1) as f64 / denom)
        .map(|(r, _)| r + 1)
}

/// `min_k p_(k) denom / k`, clipped to 1: the smallest level that rejects.
fn adjusted_min_p(p: &[f64], order: &[usize], denom: f64) -> f64 {
    order
        .iter()
        .enumerate()
        .map(|(r, &i)| p[i] * denom / (r + 1) as f64)
        .fold(f64::INFINITY, f64::min)
        .min(1.0)
}

fn step_up_result(p: &[f64], alpha: f64, denom: f64, m0_hat: Option<usize>) -> DetectionResult {
    let order = sorted_order(p);
    let rejected = match step_up_rank(p, &order, alpha, denom) {
        Some(k) => {
            let cutoff = p[order[k - 1]];
            positions(p, |v| v <= cutoff)
        }
        None => Vec::new(),
    };
    DetectionResult {
        decision: decision(!rejected.is_empty()),
        statistic: adjusted_min_p(p, &order, denom),
        rejected_layers: rejected,
        m0_hat,
        localization: Localization::StepUp,
    }
}

fn adaptive_bh(p: &[f64], alpha: f64) -> DetectionResult {
    let m = p.len();
    let order = sorted_order(p);
    let sorted: Vec<f64> = order.iter().map(|&i| p[i]).collect();
    let passes_stage_one = sorted
        .iter()
        .enumerate()
        .all(|(r, &v)| v >= alpha * (r + 1) as f64 / m as f64);
    if passes_stage_one {
        return DetectionResult {
            decision: Decision::Id,
            statistic: adjusted_min_p(p, &order, m as f64),
            rejected_layers: Vec::new(),
            m0_hat: None,
            localization: Localization::StepUp,
        };
    }
    let m0 = estimate_null_count(&sorted);
    step_up_result(p, alpha, m0 as f64, Some(m0))
}

/// Slope estimate of the number of true nulls from ascending p-values:
/// `S_i = (1 - p_(i)) / (m + 1 - i)`; at the first `j` with `S_j < S_{j-1}`,
/// `m0 = min(floor(1 / S_j) + 1, m)`. Falls back to `m` when `S` never drops.
pub fn estimate_null_count(sorted: &[f64]) -> usize {
    let m = sorted.len();
    let slope = |i: usize| (1.0 - sorted[i - 1]) / (m + 1 - i) as f64;
    for j in 2..=m {
        let s_j = slope(j);
        if s_j < slope(j - 1) {
            let est = (1.0 / s_j).floor() + 1.0;
            return if est >= m as f64 { m } else { est as usize };
        }
    }
    m
}

fn fisher_statistic(p: &[f64]) -> f64 {
    p.iter().map(|&v| -2.0 * v.ln()).sum()
}

fn cauchy_statistic(p: &[f64], weights: &[f64]) -> f64 {
    p.iter().zip(weights).map(|(&v, &w)| w * ((0.5 - v) * PI).tan()).sum()
}

fn threshold_result(ood: bool, statistic: f64, p: &[f64], alpha: f64) -> DetectionResult {
    let bonferroni = alpha / p.len() as f64;
    DetectionResult {
        decision: decision(ood),
        statistic,
        rejected_layers: positions(p, |v| v < bonferroni),
        m0_hat: None,
        localization: Localization::Bonferroni,
    }
}

fn run(method: CombineMethod, p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    if p.is_empty() {
        return Err(CombineError::EmptyPVector);
    }
    Combiner::new(CombinerConfig::new(method, alpha), p.len())?.detect(p)
}

pub fn combine_bh(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::Bh, p, alpha)
}

pub fn combine_adabh(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::Adabh, p, alpha)
}

pub fn combine_by(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::By, p, alpha)
}

pub fn combine_fisher(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::Fisher, p, alpha)
}

pub fn combine_cauchy(p: &[f64], alpha: f64, weights: Option<&[f64]>) -> Result<DetectionResult, CombineError> {
    if p.is_empty() {
        return Err(CombineError::EmptyPVector);
    }
    let config = CombinerConfig {
        method: CombineMethod::Cauchy,
        alpha,
        weights: weights.map(<[f64]>::to_vec),
    };
    Combiner::new(config, p.len())?.detect(p)
}

pub fn naive_and(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::NaiveAnd, p, alpha)
}

pub fn last_layer(p: &[f64], alpha: f64) -> Result<DetectionResult, CombineError> {
    run(CombineMethod::LastLayer, p, alpha)
}

/// Continuous combined score (lower = more OOD). Undefined for adaptive BH.
pub fn combined_score(p: &[f64], config: &CombinerConfig) -> Result<f64, CombineError> {
    if config.method == CombineMethod::Adabh {
        return Err(CombineError::UnsupportedMethod(CombineMethod::Adabh));
    }
    if p.is_empty() {
        return Err(CombineError::EmptyPVector);
    }
    Combiner::new(config.clone(), p.len())?.score(p)
}
