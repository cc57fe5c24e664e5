//! Fitted per-layer state: one scorer and one calibration table per layer.
//!
//! k-NN layers index the `reference` split when the pack has one. Otherwise
//! they index the calibration split and calibration scores are computed
//! leave-one-out, so no calibration point counts itself as a neighbour.

use log::{debug, info};
use thiserror::Error;

use crate::calibrator::{CalibrationError, CalibrationTable, PValueMatrix};
use crate::featurepack::{FeaturePack, LayerSpec, PackError, CALIBRATION_SPLIT, REFERENCE_SPLIT};
use crate::scorers::{LayerScorer, ScoreError, ScoreVector, ScorerAssignment};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Pack(e) => e.kind(),
            PipelineError::Score(e) => e.kind(),
            PipelineError::Calibration(e) => e.kind(),
        }
    }
}

/// Scorers and calibration tables for every layer of a pack, in index order.
#[derive(Clone, Debug)]
pub struct FittedLayers {
    scorers: Vec<LayerScorer>,
    tables: Vec<CalibrationTable>,
}

impl FittedLayers {
    pub fn fit(pack: &FeaturePack, assignment: &ScorerAssignment) -> Result<Self, PipelineError> {
        let manifest = pack.manifest();
        let has_reference = manifest.has_split(REFERENCE_SPLIT);
        let mut scorers = Vec::with_capacity(manifest.num_layers());
        let mut tables = Vec::with_capacity(manifest.num_layers());
        for layer in manifest.layers_by_index() {
            let config = assignment.for_layer(layer);
            let calibration = pack.matrix(layer.index, CALIBRATION_SPLIT)?;
            let reference = if has_reference {
                pack.matrix(layer.index, REFERENCE_SPLIT)?
            } else {
                calibration
            };
            let scorer = LayerScorer::new(layer, config, Some(reference))?;
            let cal_scores = match (has_reference, scorer.index().is_some()) {
                (false, true) => scorer.score_reference_loo()?.expect("k-NN scorer has an index"),
                _ => scorer.score(calibration)?,
            };
            debug!(
                "layer {} ({}): {} calibration scores",
                layer.index,
                config.tag(),
                cal_scores.len()
            );
            tables.push(CalibrationTable::fit(&cal_scores.values)?);
            scorers.push(scorer);
        }
        info!("fitted {} layers", scorers.len());
        Ok(Self { scorers, tables })
    }

    /// Assembles fitted state from parts, e.g. tables loaded from disk.
    pub fn from_parts(scorers: Vec<LayerScorer>, tables: Vec<CalibrationTable>) -> Result<Self, PipelineError> {
        if scorers.is_empty() || scorers.len() != tables.len() {
            return Err(CalibrationError::ShapeMismatch(format!(
                "{} scorers for {} tables",
                scorers.len(),
                tables.len()
            ))
            .into());
        }
        Ok(Self { scorers, tables })
    }

    pub fn m(&self) -> usize {
        self.scorers.len()
    }

    pub fn scorers(&self) -> &[LayerScorer] {
        &self.scorers
    }

    pub fn tables(&self) -> &[CalibrationTable] {
        &self.tables
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.scorers.iter().map(|s| s.layer().clone()).collect()
    }

    /// Raw scores of every layer on one split.
    pub fn scores(&self, pack: &FeaturePack, split: &str) -> Result<Vec<ScoreVector>, PipelineError> {
        self.scorers
            .iter()
            .map(|s| Ok(s.score(pack.matrix(s.layer().index, split)?)?))
            .collect()
    }

    pub fn p_values(&self, pack: &FeaturePack, split: &str) -> Result<PValueMatrix, PipelineError> {
        let scores = self.scores(pack, split)?;
        Ok(crate::calibrator::p_matrix(&self.tables, &scores)?)
    }

    /// Scores and p-values of a single sample given one row per layer.
    pub fn score_sample(&self, rows: &[&[f32]]) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        if rows.len() != self.m() {
            return Err(CalibrationError::ShapeMismatch(format!("{} rows for {} layers", rows.len(), self.m())).into());
        }
        let scores = self
            .scorers
            .iter()
            .zip(rows)
            .map(|(s, row)| s.score_row(row))
            .collect::<Result<Vec<_>, _>>()?;
        let p = scores.iter().zip(&self.tables).map(|(&s, t)| t.p_value(s)).collect();
        Ok((scores, p))
    }
}
