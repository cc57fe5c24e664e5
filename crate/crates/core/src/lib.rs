//! Layer-wise out-of-distribution detection with conformal p-values.
//!
//! Each layer of a network gets its own score, the score is turned into a
//! p-value against an in-distribution calibration set, and the per-layer
//! p-values are fused by a multiple-testing rule into one decision.
//!
//! Scores are oriented so that higher means more in-distribution.

pub mod calibrator;
pub mod combiner;
pub mod evaluator;
pub mod featurepack;
pub mod knn;
pub mod pipeline;
pub mod scorers;
pub mod statfn;
pub mod synthgen;

mod error;

pub use calibrator::{CalibrationTable, Decision, PValueMatrix};
pub use combiner::{CombineMethod, Combiner, CombinerConfig, DetectionResult};
pub use error::Error;
pub use evaluator::{evaluate, EvalConfig, EvalReport, Metrics};
pub use featurepack::{FeatureMatrix, FeaturePack, LayerKind, LayerSpec, PackManifest};
pub use pipeline::FittedLayers;
pub use scorers::{ScoreMethod, ScorerAssignment, ScorerConfig};
pub use synthgen::{generate, Scenario, SynthSpec};
