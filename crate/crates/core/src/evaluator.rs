//! Detection metrics and end-to-end evaluation reports.
//!
//! Scores follow the library-wide orientation (higher = more ID). ROC points
//! are `(fpr, tpr)` with ID as the positive class: `tpr` is the fraction of ID
//! samples kept as ID and `fpr` the fraction of OOD samples wrongly kept.
//!
//! FPR95 for a combiner is measured at the level `alpha` that makes the
//! combiner keep 95% of the ID test split, found by bisection over `alpha`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrator::PValueMatrix;
use crate::combiner::{CombineError, CombineMethod, Combiner, CombinerConfig};
use crate::featurepack::{FeaturePack, CALIBRATION_SPLIT, TEST_ID_SPLIT};
use crate::pipeline::{FittedLayers, PipelineError};
use crate::scorers::{ScorerAssignment, ScorerConfig};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const DEFAULT_GRID_SIZE: usize = 2001;
const SWEEP_ALPHA_MIN: f64 = 1e-6;
const SEARCH_ALPHA_MIN: f64 = 1e-12;
const SEARCH_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("target TPR must lie in (0, 1], got {0}")]
    InvalidTarget(f64),
    #[error("grid size must be at least 2, got {0}")]
    InvalidGridSize(usize),
    #[error("pack has no `{0}` split")]
    MissingSplit(String),
    #[error("pack has no OOD split")]
    NoOodSplit,
    #[error("no combination methods configured")]
    NoMethods,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error("failed to write {}: {reason}", path.display())]
    Write { path: PathBuf, reason: String },
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::EmptyInput(_) => "EmptyInput",
            EvalError::InvalidTarget(_) => "InvalidTarget",
            EvalError::InvalidGridSize(_) => "InvalidGridSize",
            EvalError::MissingSplit(_) => "MissingSplit",
            EvalError::NoOodSplit => "NoOodSplit",
            EvalError::NoMethods => "NoMethods",
            EvalError::Pipeline(e) => e.kind(),
            EvalError::Combine(e) => e.kind(),
            EvalError::Write { .. } => "IoFailure",
        }
    }
}

fn non_empty(v: &[f64], what: &str) -> Result<(), EvalError> {
    if v.is_empty() {
        Err(EvalError::EmptyInput(what.to_string()))
    } else {
        Ok(())
    }
}

fn check_target(target: f64) -> Result<(), EvalError> {
    if target > 0.0 && target <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidTarget(target))
    }
}

/// Mann–Whitney AUROC `P(id > ood) + P(id = ood) / 2`, by rank sum with
/// averaged ranks for ties.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, EvalError> {
    non_empty(id_scores, "ID scores")?;
    non_empty(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let ids = all[i..j].iter().filter(|e| e.1).count();
        id_rank_sum += mean_rank * ids as f64;
        i = j;
    }
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Threshold and rates of a score-threshold operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating point at the largest threshold `lambda` keeping at least
/// `target_tpr` of the ID scores (`score >= lambda` counts as ID).
pub fn operating_point(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<OperatingPoint, EvalError> {
    non_empty(id_scores, "ID scores")?;
    non_empty(ood_scores, "OOD scores")?;
    check_target(target_tpr)?;
    let n = id_scores.len();
    let mut k = ((target_tpr * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= target_tpr {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < target_tpr {
        k += 1;
    }
    let mut sorted = id_scores.to_vec();
    let (_, &mut lambda, _) = sorted.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let kept = |v: &[f64]| v.iter().filter(|&&s| s >= lambda).count() as f64 / v.len() as f64;
    Ok(OperatingPoint {
        threshold: lambda,
        tpr: kept(id_scores),
        fpr: kept(ood_scores),
    })
}

/// False positive rate at the operating point of [`operating_point`].
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<f64, EvalError> {
    Ok(operating_point(id_scores, ood_scores, target_tpr)?.fpr)
}

/// Fraction of p-vectors a combiner keeps as ID.
pub fn id_rate(combiner: &Combiner, p: &PValueMatrix) -> Result<f64, EvalError> {
    let kept = p
        .rows()
        .map(|row| combiner.decide(row).map(|d| !d.is_ood()))
        .try_fold(0usize, |acc, r| r.map(|id| acc + id as usize))?;
    Ok(kept as f64 / p.n_samples() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaCalibration {
    pub alpha: f64,
    pub tpr: f64,
}

/// Largest `alpha` whose ID keep-rate on `id_pvalues` is at least `target_tpr`.
///
/// Bisection in `ln(alpha)` over `[1e-12, 1 - 1e-12]`; relies on decisions
/// being monotone in `alpha`. If even the smallest level misses the target,
/// that level is returned with its achieved rate.
pub fn calibrate_alpha_for_tpr(
    config: &CombinerConfig,
    id_pvalues: &PValueMatrix,
    target_tpr: f64,
) -> Result<AlphaCalibration, EvalError> {
    if id_pvalues.n_samples() == 0 {
        return Err(EvalError::EmptyInput("ID p-values".into()));
    }
    check_target(target_tpr)?;
    let m = id_pvalues.m();
    let rate =
        |alpha: f64| -> Result<f64, EvalError> { id_rate(&Combiner::new(config.with_alpha(alpha), m)?, id_pvalues) };
    let top = 1.0 - SEARCH_ALPHA_MIN;
    let top_rate = rate(top)?;
    if top_rate >= target_tpr {
        return Ok(AlphaCalibration {
            alpha: top,
            tpr: top_rate,
        });
    }
    let bottom_rate = rate(SEARCH_ALPHA_MIN)?;
    if bottom_rate < target_tpr {
        return Ok(AlphaCalibration {
            alpha: SEARCH_ALPHA_MIN,
            tpr: bottom_rate,
        });
    }
    let (mut lo, mut hi) = (SEARCH_ALPHA_MIN.ln(), top.ln());
    let mut lo_rate = bottom_rate;
    for _ in 0..SEARCH_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = rate(mid.exp())?;
        if r >= target_tpr {
            lo = mid;
            lo_rate = r;
        } else {
            hi = mid;
        }
    }
    Ok(AlphaCalibration {
        alpha: lo.exp(),
        tpr: lo_rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auroc: f64,
    /// `(fpr, tpr)` points sorted ascending, including `(0, 0)` and `(1, 1)`.
    pub curve: Vec<(f64, f64)>,
}

/// The `alpha` grid of [`roc_by_alpha_sweep`]: `grid_size - 2` log-spaced
/// levels in `[1e-6, 1 - 1e-6]`; the endpoints account for the other two.
pub fn sweep_alphas(grid_size: usize) -> Vec<f64> {
    let inner = grid_size.saturating_sub(2);
    let (a, b) = (SWEEP_ALPHA_MIN.ln(), (1.0 - SWEEP_ALPHA_MIN).ln());
    (0..inner)
        .map(|i| {
            if inner == 1 {
                SWEEP_ALPHA_MIN
            } else {
                (a + (b - a) * i as f64 / (inner - 1) as f64).exp()
            }
        })
        .collect()
}

/// ROC curve traced by the combiner's decisions over a grid of levels.
pub fn roc_by_alpha_sweep(
    config: &CombinerConfig,
    id_pvalues: &PValueMatrix,
    ood_pvalues: &PValueMatrix,
    grid_size: usize,
) -> Result<RocCurve, EvalError> {
    if grid_size < 2 {
        return Err(EvalError::InvalidGridSize(grid_size));
    }
    if id_pvalues.n_samples() == 0 || ood_pvalues.n_samples() == 0 {
        return Err(EvalError::EmptyInput("p-values".into()));
    }
    let m = id_pvalues.m();
    let mut curve = sweep_alphas(grid_size)
        .into_par_iter()
        .map(|alpha| {
            let c = Combiner::new(config.with_alpha(alpha), m)?;
            Ok((id_rate(&c, ood_pvalues)?, id_rate(&c, id_pvalues)?))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    curve.push((0.0, 0.0));
    curve.push((1.0, 1.0));
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auroc = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(RocCurve { auroc, curve })
}

/// Combined scores of every p-vector (lower = more OOD).
pub fn combined_scores(config: &CombinerConfig, p: &PValueMatrix) -> Result<Vec<f64>, EvalError> {
    let c = Combiner::new(config.clone(), p.m())?;
    Ok(p.rows().map(|row| c.score(row)).collect::<Result<_, _>>()?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub fpr_at_alpha: f64,
    pub achieved_tpr: f64,
}

impl Metrics {
    /// Field-wise arithmetic mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut sum = Metrics::default();
        let mut n = 0usize;
        for m in items {
            sum.fpr95 += m.fpr95;
            sum.auroc += m.auroc;
            sum.fpr_at_alpha += m.fpr_at_alpha;
            sum.achieved_tpr += m.achieved_tpr;
            n += 1;
        }
        let n = n.max(1) as f64;
        Metrics {
            fpr95: sum.fpr95 / n,
            auroc: sum.auroc / n,
            fpr_at_alpha: sum.fpr_at_alpha / n,
            achieved_tpr: sum.achieved_tpr / n,
        }
    }
}

fn default_target_tpr() -> f64 {
    DEFAULT_TARGET_TPR
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub scorers: ScorerAssignment,
    pub methods: Vec<CombinerConfig>,
    #[serde(default = "default_target_tpr")]
    pub target_tpr: f64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Also report every layer on its own, thresholding its raw score.
    #[serde(default)]
    pub per_layer_baseline: bool,
}

impl EvalConfig {
    pub fn new(scorers: ScorerAssignment, methods: Vec<CombinerConfig>) -> Self {
        Self {
            scorers,
            methods,
            target_tpr: DEFAULT_TARGET_TPR,
            grid_size: DEFAULT_GRID_SIZE,
            per_layer_baseline: false,
        }
    }

    /// Every combination method at one level.
    pub fn all_methods(scorers: ScorerAssignment, alpha: f64) -> Self {
        Self::new(
            scorers,
            CombineMethod::ALL
                .iter()
                .map(|&m| CombinerConfig::new(m, alpha))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AurocSource {
    CombinedScore,
    AlphaSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: CombineMethod,
    pub label: String,
    pub config: CombinerConfig,
    /// Level at which the ID test split keeps the target TPR.
    pub calibrated_alpha: f64,
    pub auroc_source: AurocSource,
    pub datasets: BTreeMap<String, Metrics>,
    pub average: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub index: usize,
    pub scorer: ScorerConfig,
    pub datasets: BTreeMap<String, Metrics>,
    pub average: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub methods: Vec<MethodReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_baseline: Option<Vec<LayerReport>>,
}

fn method_report(
    config: &CombinerConfig,
    id: &PValueMatrix,
    ood: &BTreeMap<String, PValueMatrix>,
    target_tpr: f64,
    grid_size: usize,
) -> Result<MethodReport, EvalError> {
    let m = id.m();
    let at_alpha = Combiner::new(config.clone(), m)?;
    let calibrated = calibrate_alpha_for_tpr(config, id, target_tpr)?;
    let at_target = Combiner::new(config.with_alpha(calibrated.alpha), m)?;
    let id_scores = if config.method.has_score() {
        Some(combined_scores(config, id)?)
    } else {
        None
    };
    let mut datasets = BTreeMap::new();
    for (name, p) in ood {
        let auroc = match &id_scores {
            Some(id_scores) => auroc(id_scores, &combined_scores(config, p)?)?,
            None => roc_by_alpha_sweep(config, id, p, grid_size)?.auroc,
        };
        let metrics = Metrics {
            fpr95: id_rate(&at_target, p)?,
            auroc,
            fpr_at_alpha: id_rate(&at_alpha, p)?,
            achieved_tpr: calibrated.tpr,
        };
        datasets.insert(name.clone(), metrics);
    }
    Ok(MethodReport {
        method: config.method,
        label: config.method.label().to_string(),
        config: config.clone(),
        calibrated_alpha: calibrated.alpha,
        auroc_source: if id_scores.is_some() {
            AurocSource::CombinedScore
        } else {
            AurocSource::AlphaSweep
        },
        average: Metrics::mean(datasets.values()),
        datasets,
    })
}

fn layer_reports(
    fitted: &FittedLayers,
    pack: &FeaturePack,
    ood_names: &[String],
    target_tpr: f64,
    alpha: f64,
) -> Result<Vec<LayerReport>, EvalError> {
    let id_scores = fitted.scores(pack, TEST_ID_SPLIT)?;
    let ood_scores = ood_names
        .iter()
        .map(|n| fitted.scores(pack, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::with_capacity(fitted.m());
    for (j, scorer) in fitted.scorers().iter().enumerate() {
        let table = &fitted.tables()[j];
        let mut datasets = BTreeMap::new();
        for (name, scores) in ood_names.iter().zip(&ood_scores) {
            let (id, ood) = (&id_scores[j].values, &scores[j].values);
            let op = operating_point(id, ood, target_tpr)?;
            let kept = ood.iter().filter(|&&s| table.p_value(s) >= alpha).count();
            datasets.insert(
                name.clone(),
                Metrics {
                    fpr95: op.fpr,
                    auroc: auroc(id, ood)?,
                    fpr_at_alpha: kept as f64 / ood.len() as f64,
                    achieved_tpr: op.tpr,
                },
            );
        }
        reports.push(LayerReport {
            layer: scorer.layer().name.clone(),
            index: scorer.layer().index,
            scorer: *scorer.config(),
            average: Metrics::mean(datasets.values()),
            datasets,
        });
    }
    Ok(reports)
}

/// Runs score, calibrate, p-value and combine for every method and OOD split.
pub fn evaluate(pack: &FeaturePack, config: &EvalConfig) -> Result<EvalReport, EvalError> {
    if config.methods.is_empty() {
        return Err(EvalError::NoMethods);
    }
    check_target(config.target_tpr)?;
    if config.grid_size < 2 {
        return Err(EvalError::InvalidGridSize(config.grid_size));
    }
    let manifest = pack.manifest();
    for split in [CALIBRATION_SPLIT, TEST_ID_SPLIT] {
        if !manifest.has_split(split) {
            return Err(EvalError::MissingSplit(split.to_string()));
        }
    }
    let ood_names: Vec<String> = manifest.ood_splits().into_iter().map(String::from).collect();
    if ood_names.is_empty() {
        return Err(EvalError::NoOodSplit);
    }

    let fitted = FittedLayers::fit(pack, &config.scorers)?;
    let id = fitted.p_values(pack, TEST_ID_SPLIT)?;
    let mut ood = BTreeMap::new();
    for name in &ood_names {
        ood.insert(name.clone(), fitted.p_values(pack, name)?);
    }
    info!(
        "evaluating {} methods on {} OOD splits",
        config.methods.len(),
        ood.len()
    );

    let methods = config
        .methods
        .par_iter()
        .map(|c| method_report(c, &id, &ood, config.target_tpr, config.grid_size))
        .collect::<Result<Vec<_>, _>>()?;
    let per_layer_baseline = if config.per_layer_baseline {
        let alpha = config.methods[0].alpha;
        Some(layer_reports(&fitted, pack, &ood_names, config.target_tpr, alpha)?)
    } else {
        None
    };
    Ok(EvalReport {
        config: serde_json::to_value(config).expect("config serializes"),
        methods,
        per_layer_baseline,
    })
}

impl EvalReport {
    pub fn method(&self, method: CombineMethod) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == method)
    }

    pub fn dataset_names(&self) -> Vec<String> {
        self.methods
            .first()
            .map(|r| r.datasets.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| EvalError::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn rows(&self) -> Vec<(String, &BTreeMap<String, Metrics>, &Metrics)> {
        let mut rows: Vec<_> = self
            .methods
            .iter()
            .map(|r| (r.label.clone(), &r.datasets, &r.average))
            .collect();
        for l in self.per_layer_baseline.iter().flatten() {
            rows.push((format!("Layer@{}", l.layer), &l.datasets, &l.average));
        }
        rows
    }

    /// Methods by datasets, FPR95 and AUROC in percent, with an average column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let fail = |e: &dyn std::fmt::Display| EvalError::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
        let names = self.dataset_names();
        let mut header = vec!["method".to_string()];
        for n in names.iter().map(String::as_str).chain(["Average"]) {
            header.push(format!("{n} FPR95"));
            header.push(format!("{n} AUROC"));
        }
        w.write_record(&header).map_err(|e| fail(&e))?;
        for (label, datasets, average) in self.rows() {
            let mut record = vec![label];
            for m in names.iter().map(|n| &datasets[n]).chain([average]) {
                record.push(format!("{:.2}", 100.0 * m.fpr95));
                record.push(format!("{:.2}", 100.0 * m.auroc));
            }
            w.write_record(&record).map_err(|e| fail(&e))?;
        }
        w.flush().map_err(|e| fail(&e))
    }

    /// Plain-text table of FPR95 / AUROC (percent) per method and dataset.
    pub fn summary_table(&self) -> String {
        let names = self.dataset_names();
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "method");
        for n in names.iter().map(String::as_str).chain(["Average"]) {
            let _ = write!(out, "  {:>17}", n);
        }
        out.push('\n');
        let _ = write!(out, "{:width$}", "");
        for _ in 0..=names.len() {
            let _ = write!(out, "  {:>8} {:>8}", "FPR95", "AUROC");
        }
        out.push('\n');
        for (label, datasets, average) in rows {
            let _ = write!(out, "{label:width$}");
            for m in names.iter().map(|n| &datasets[n]).chain([average]) {
                let _ = write!(out, "  {:>8.2} {:>8.2}", 100.0 * m.fpr95, 100.0 * m.auroc);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurepack::{LayerKind, LayerSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pmatrix(m: usize, rows: Vec<Vec<f64>>) -> PValueMatrix {
        let layers = (1..=m)
            .map(|i| LayerSpec::new(format!("l{i}"), LayerKind::Features, 1, i))
            .collect();
        PValueMatrix::from_rows(layers, rows.concat()).unwrap()
    }

    fn uniform_pmatrix(rng: &mut ChaCha8Rng, n: usize, m: usize, shrink: f64) -> PValueMatrix {
        let rows = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(1e-9..1.0) * shrink).collect())
            .collect();
        pmatrix(m, rows)
    }

    /// Pairwise count, the definition of the Mann–Whitney statistic.
    fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    /// Tries every distinct score (and +inf) as a threshold.
    fn fpr_brute(id: &[f64], ood: &[f64], target: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for &lambda in id.iter().chain(ood).chain([&f64::INFINITY]) {
            let tpr = id.iter().filter(|&&s| s >= lambda).count() as f64 / id.len() as f64;
            if tpr >= target && lambda > best {
                best = lambda;
            }
        }
        ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(EvalError::EmptyInput(_))));
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (0..100).map(|i| 10.0 + i as f64).collect();
        let ood: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[3.0; 10], &[3.0; 10], 0.95).unwrap(), 1.0);
        let op = operating_point(&id, &ood, 0.95).unwrap();
        assert_eq!(op.threshold, 15.0);
        assert_eq!(op.tpr, 0.95);
        assert!(matches!(fpr_at_tpr(&id, &ood, 0.0), Err(EvalError::InvalidTarget(_))));
    }

    #[test]
    fn fpr_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n_id = rng.gen_range(1..120);
            let n_ood = rng.gen_range(1..120);
            // coarse values force ties
            let id: Vec<f64> = (0..n_id).map(|_| (rng.gen_range(0.0..20.0f64)).round()).collect();
            let ood: Vec<f64> = (0..n_ood).map(|_| (rng.gen_range(-5.0..15.0f64)).round()).collect();
            let target = rng.gen_range(0.01..=1.0);
            assert_eq!(fpr_at_tpr(&id, &ood, target).unwrap(), fpr_brute(&id, &ood, target));
        }
    }

    #[test]
    fn alpha_calibration_on_uniform_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let id = uniform_pmatrix(&mut rng, n, 3, 1.0);
        let cfg = CombinerConfig::new(CombineMethod::LastLayer, 0.05);
        let cal = calibrate_alpha_for_tpr(&cfg, &id, 0.95).unwrap();
        assert!(
            (cal.alpha - 0.05).abs() < 2.0 / (n as f64).sqrt(),
            "alpha {}",
            cal.alpha
        );
        assert!(cal.tpr >= 0.95);
        let again = calibrate_alpha_for_tpr(&cfg, &id, 0.95).unwrap();
        assert_eq!(cal.alpha.to_bits(), again.alpha.to_bits());

        let all = calibrate_alpha_for_tpr(&cfg, &id, 1.0).unwrap();
        assert_eq!(all.tpr, 1.0);
        let min_p = id.column(2).into_iter().fold(1.0, f64::min);
        assert!(all.alpha <= min_p);
    }

    #[test]
    fn alpha_calibration_is_largest_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let id = uniform_pmatrix(&mut rng, 500, 4, 1.0);
        for method in CombineMethod::ALL {
            let cfg = CombinerConfig::new(method, 0.05);
            let cal = calibrate_alpha_for_tpr(&cfg, &id, 0.9).unwrap();
            assert!(cal.tpr >= 0.9, "{method}");
            let above = Combiner::new(cfg.with_alpha(cal.alpha * (1.0 + 1e-9)), 4).unwrap();
            assert!(id_rate(&above, &id).unwrap() < 0.9, "{method}");
        }
    }

    #[test]
    fn sweep_endpoints_only_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = uniform_pmatrix(&mut rng, 50, 2, 1.0);
        let ood = uniform_pmatrix(&mut rng, 50, 2, 0.1);
        let cfg = CombinerConfig::new(CombineMethod::Bh, 0.05);
        let roc = roc_by_alpha_sweep(&cfg, &id, &ood, 2).unwrap();
        assert_eq!(roc.auroc, 0.5);
        assert_eq!(roc.curve, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            roc_by_alpha_sweep(&cfg, &id, &ood, 1),
            Err(EvalError::InvalidGridSize(1))
        ));
        assert_eq!(sweep_alphas(2001).len(), 1999);
        assert_eq!(sweep_alphas(3), vec![1e-6]);
    }

    #[test]
    fn sweep_auc_tracks_score_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for run in 0..4 {
            let m = 1 + run;
            let id = uniform_pmatrix(&mut rng, 400, m, 1.0);
            let ood = uniform_pmatrix(&mut rng, 400, m, 0.3);
            for method in [
                CombineMethod::Bh,
                CombineMethod::By,
                CombineMethod::Fisher,
                CombineMethod::Cauchy,
            ] {
                let cfg = CombinerConfig::new(method, 0.05);
                let roc = roc_by_alpha_sweep(&cfg, &id, &ood, DEFAULT_GRID_SIZE).unwrap();
                let direct = auroc(
                    &combined_scores(&cfg, &id).unwrap(),
                    &combined_scores(&cfg, &ood).unwrap(),
                )
                .unwrap();
                assert!(
                    (roc.auroc - direct).abs() <= 0.005,
                    "{method} m={m}: {} vs {direct}",
                    roc.auroc
                );
                assert!(roc.curve.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
            }
        }
    }

    #[test]
    fn metrics_mean_is_arithmetic() {
        let a = Metrics {
            fpr95: 0.2,
            auroc: 0.9,
            fpr_at_alpha: 0.1,
            achieved_tpr: 0.95,
        };
        let b = Metrics {
            fpr95: 0.4,
            auroc: 0.7,
            fpr_at_alpha: 0.3,
            achieved_tpr: 0.97,
        };
        let m = Metrics::mean([&a, &b]);
        assert!((m.fpr95 - 0.3).abs() < 1e-15 && (m.auroc - 0.8).abs() < 1e-15);
        assert!((m.fpr_at_alpha - 0.2).abs() < 1e-15 && (m.achieved_tpr - 0.96).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(
            id in prop::collection::vec(-3i32..3, 1..40),
            ood in prop::collection::vec(-3i32..3, 1..40),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            prop_assert!((auroc(&id, &ood).unwrap() - auroc_pairs(&id, &ood)).abs() < 1e-12);
        }

        #[test]
        fn auroc_invariant_under_increasing_maps(
            id in prop::collection::vec(-50.0f64..50.0, 1..60),
            ood in prop::collection::vec(-50.0f64..50.0, 1..60),
        ) {
            let base = auroc(&id, &ood).unwrap();
            let f = |v: &[f64]| v.iter().map(|x| (x / 10.0).atan() * 7.0 + 1.0).collect::<Vec<_>>();
            let g = |v: &[f64]| v.iter().map(|x| x.powi(3)).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&f(&id), &f(&ood)).unwrap(), base);
            prop_assert_eq!(auroc(&g(&id), &g(&ood)).unwrap(), base);
            prop_assert!((auroc(&ood, &id).unwrap() - (1.0 - base)).abs() < 1e-12);
        }

        #[test]
        fn achieved_tpr_reaches_target(
            id in prop::collection::vec(-10.0f64..10.0, 1..80),
            ood in prop::collection::vec(-10.0f64..10.0, 1..80),
            target in 0.01f64..=1.0,
        ) {
            let op = operating_point(&id, &ood, target).unwrap();
            prop_assert!(op.tpr >= target - 1.0 / id.len() as f64);
            prop_assert!(op.tpr >= target);
            prop_assert!((0.0..=1.0).contains(&op.fpr));
        }
    }
}
