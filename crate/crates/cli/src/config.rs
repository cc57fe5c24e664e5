//! Run configuration file and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use mlod::combiner::{CombineMethod, CombinerConfig, DEFAULT_ALPHA};
use mlod::evaluator::{EvalConfig, DEFAULT_GRID_SIZE, DEFAULT_TARGET_TPR};
use mlod::scorers::{ScoreMethod, ScorerAssignment};
use mlod::PackManifest;
use serde::Deserialize;

use crate::CliError;

/// A method entry: a bare name or a full combiner config whose alpha
/// falls back to the run-level alpha.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum MethodEntry {
    Name(String),
    Full(FullMethod),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FullMethod {
    method: CombineMethod,
    alpha: Option<f64>,
    weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    pack: Option<PathBuf>,
    #[serde(default)]
    scorers: ScorerAssignment,
    methods: Option<Vec<MethodEntry>>,
    alpha: Option<f64>,
    target_tpr: Option<f64>,
    grid_size: Option<usize>,
    #[serde(default)]
    per_layer_baseline: bool,
    output: Option<PathBuf>,
    csv: Option<PathBuf>,
    seed: Option<u64>,
}

/// Resolved run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub pack: PathBuf,
    pub scorers: ScorerAssignment,
    pub methods: Vec<CombinerConfig>,
    pub alpha: f64,
    pub target_tpr: f64,
    pub grid_size: usize,
    pub per_layer_baseline: bool,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub seed: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub pack: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub methods: Vec<CombineMethod>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides`. Relative paths in the
    /// file are taken relative to the file's directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let raw = match path {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
                let mut raw: RawRunConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                let base = path.parent().unwrap_or(Path::new(""));
                raw.pack = raw.pack.map(|p| resolve(base, p));
                raw.output = raw.output.map(|p| resolve(base, p));
                raw.csv = raw.csv.map(|p| resolve(base, p));
                raw
            }
            None => RawRunConfig::default(),
        };
        Self::from_raw(raw, overrides)
    }

    fn from_raw(raw: RawRunConfig, o: &Overrides) -> Result<Self, CliError> {
        let pack = o
            .pack
            .clone()
            .or(raw.pack)
            .ok_or_else(|| CliError::config("no pack given: set `pack` in the config or pass --pack"))?;
        let alpha = o.alpha.or(raw.alpha).unwrap_or(DEFAULT_ALPHA);
        let methods = if !o.methods.is_empty() {
            o.methods.iter().map(|&m| CombinerConfig::new(m, alpha)).collect()
        } else {
            match raw.methods {
                None => CombineMethod::ALL
                    .iter()
                    .map(|&m| CombinerConfig::new(m, alpha))
                    .collect(),
                Some(entries) => entries
                    .into_iter()
                    .map(|e| match e {
                        MethodEntry::Name(name) => name
                            .parse()
                            .map(|m| CombinerConfig::new(m, alpha))
                            .map_err(CliError::config),
                        MethodEntry::Full(f) => Ok(CombinerConfig {
                            method: f.method,
                            alpha: o.alpha.or(f.alpha).unwrap_or(alpha),
                            weights: f.weights,
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            }
        };
        if methods.is_empty() {
            return Err(CliError::config("at least one method is required"));
        }
        let mut scorers = raw.scorers;
        if let Some(k) = o.k {
            scorers.features.k = k;
            scorers.logits.k = k;
            scorers.layers.values_mut().for_each(|c| c.k = k);
        }
        if let Some(t) = o.temperature {
            scorers.logits.temperature = t;
            for c in std::iter::once(&mut scorers.features).chain(scorers.layers.values_mut()) {
                if matches!(c.method, ScoreMethod::Energy | ScoreMethod::Odin) {
                    c.temperature = t;
                }
            }
        }
        Ok(Self {
            pack,
            scorers,
            methods,
            alpha,
            target_tpr: raw.target_tpr.unwrap_or(DEFAULT_TARGET_TPR),
            grid_size: raw.grid_size.unwrap_or(DEFAULT_GRID_SIZE),
            per_layer_baseline: raw.per_layer_baseline,
            output: o.output.clone().or(raw.output),
            csv: o.csv.clone().or(raw.csv),
            seed: o.seed.or(raw.seed).unwrap_or(0),
        })
    }

    /// Checks that per-layer scorer overrides name layers of the pack.
    pub fn check_layers(&self, manifest: &PackManifest) -> Result<(), CliError> {
        for name in self.scorers.layers.keys() {
            if manifest.layer_by_name(name).is_none() {
                return Err(CliError::config(format!("scorer override for unknown layer `{name}`")));
            }
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            scorers: self.scorers.clone(),
            methods: self.methods.clone(),
            target_tpr: self.target_tpr,
            grid_size: self.grid_size,
            per_layer_baseline: self.per_layer_baseline,
        }
    }
}
