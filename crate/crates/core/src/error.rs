//! Crate-wide error wrapping every module's error type.

use thiserror::Error;

use crate::calibrator::CalibrationError;
use crate::combiner::CombineError;
use crate::evaluator::EvalError;
use crate::featurepack::PackError;
use crate::pipeline::PipelineError;
use crate::scorers::ScoreError;
use crate::statfn::StatError;
use crate::synthgen::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl From<PipelineError> for Error {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Pack(e) => Error::Pack(e),
            PipelineError::Score(e) => Error::Score(e),
            PipelineError::Calibration(e) => Error::Calibration(e),
        }
    }
}

impl Error {
    /// Module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Pack(_) => "featurepack",
            Error::Score(_) => "scorers",
            Error::Calibration(_) => "calibrator",
            Error::Combine(_) => "combiner",
            Error::Stat(_) => "statfn",
            Error::Eval(EvalError::Combine(_)) => "combiner",
            Error::Eval(EvalError::Pipeline(PipelineError::Pack(_))) => "featurepack",
            Error::Eval(EvalError::Pipeline(PipelineError::Score(_))) => "scorers",
            Error::Eval(EvalError::Pipeline(PipelineError::Calibration(_))) => "calibrator",
            Error::Eval(_) => "evaluator",
            Error::Synth(SynthError::Pack(_)) => "featurepack",
            Error::Synth(_) => "synthgen",
        }
    }

    /// Variant name, e.g. `SizeMismatch`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Pack(e) => e.kind(),
            Error::Score(e) => e.kind(),
            Error::Calibration(e) => e.kind(),
            Error::Combine(e) => e.kind(),
            Error::Stat(e) => e.kind(),
            Error::Eval(e) => e.kind(),
            Error::Synth(e) => e.kind(),
        }
    }
}
