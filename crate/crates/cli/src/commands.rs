//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mlod::calibrator::table_file_name;
use mlod::featurepack::{PackError, CALIBRATION_SPLIT, REFERENCE_SPLIT};
use mlod::scorers::{LayerScorer, ScorerConfig};
use mlod::synthgen::{self, SynthSpec};
use mlod::{evaluate, CalibrationTable, Combiner, FeatureMatrix, FeaturePack, FittedLayers, LayerKind, PackManifest};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Overrides, RunConfig};
use crate::CliError;

const DEFAULT_REPORT: &str = "report.json";
const TABLES_INDEX: &str = "calibration.json";

fn io_failure(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(
        PackError::IoFailure {
            path: path.to_path_buf(),
            source: e,
        }
        .into(),
    )
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Features => "features",
        LayerKind::Logits => "logits",
    }
}

fn manifest_summary(manifest: &PackManifest) -> String {
    let mut s = format!("{} layers, {} classes\n", manifest.num_layers(), manifest.num_classes);
    for l in manifest.layers_by_index() {
        s += &format!(
            "  {:>2}  {:<16} {:<8} dim {}\n",
            l.index,
            l.name,
            kind_name(l.kind),
            l.dim
        );
    }
    for (split, n) in &manifest.splits {
        s += &format!("  split {split}: {n} samples\n");
    }
    s
}

pub fn synth(
    scenario: Option<&str>,
    spec_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut spec = match (scenario, spec_path) {
        (Some(name), _) => synthgen::scenario(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::config("give --scenario or --spec")),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let pack = synthgen::generate(&spec)?;
    pack.write(out)?;
    if !quiet {
        print!("wrote {}\n{}", out.display(), manifest_summary(pack.manifest()));
    }
    Ok(())
}

fn load_pack(config: &RunConfig) -> Result<FeaturePack, CliError> {
    let pack = FeaturePack::load(&config.pack)?;
    config.check_layers(pack.manifest())?;
    Ok(pack)
}

pub fn eval(config_path: Option<&Path>, overrides: &Overrides, quiet: bool) -> Result<(), CliError> {
    let config = RunConfig::load(config_path, overrides)?;
    let pack = load_pack(&config)?;
    let mut report = evaluate(&pack, &config.eval_config())?;
    if let Value::Object(map) = &mut report.config {
        map.insert("pack".into(), json!(config.pack));
        map.insert("alpha".into(), json!(config.alpha));
        map.insert("seed".into(), json!(config.seed));
    }
    let output = config.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT));
    report.write_json(&output)?;
    info!("report written to {}", output.display());
    if let Some(csv) = &config.csv {
        report.write_csv(csv)?;
    }
    if !quiet {
        print!("{}", report.summary_table());
    }
    Ok(())
}

/// Scorer configuration each persisted table was fit with.
#[derive(Debug, Serialize, Deserialize)]
struct TableIndex {
    layers: Vec<TableEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    index: usize,
    name: String,
    scorer: ScorerConfig,
    file: String,
    n: usize,
}

pub fn calibrate(config_path: Option<&Path>, overrides: &Overrides, quiet: bool) -> Result<(), CliError> {
    let config = RunConfig::load(config_path, overrides)?;
    let out = config
        .output
        .clone()
        .ok_or_else(|| CliError::config("calibrate needs an output directory (--out)"))?;
    let pack = load_pack(&config)?;
    let fitted = FittedLayers::fit(&pack, &config.scorers)?;
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let mut layers = Vec::new();
    for (scorer, table) in fitted.scorers().iter().zip(fitted.tables()) {
        let layer = scorer.layer();
        let file = table_file_name(layer.index, scorer.config().tag());
        table.save(out.join(&file))?;
        if !quiet {
            println!(
                "{:>2}  {:<16} {:<6} n={:<7} {}",
                layer.index,
                layer.name,
                scorer.config().tag(),
                table.len(),
                file
            );
        }
        layers.push(TableEntry {
            index: layer.index,
            name: layer.name.clone(),
            scorer: *scorer.config(),
            file,
            n: table.len(),
        });
    }
    let index_path = out.join(TABLES_INDEX);
    let text = serde_json::to_string_pretty(&TableIndex { layers }).expect("index serializes") + "\n";
    fs::write(&index_path, text).map_err(|e| io_failure(&index_path, e))
}

fn load_fitted(pack: &FeaturePack, config: &RunConfig, dir: &Path) -> Result<FittedLayers, CliError> {
    let index_path = dir.join(TABLES_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| io_failure(&index_path, e))?;
    let index: TableIndex =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", index_path.display())))?;
    let manifest = pack.manifest();
    let reference_split = if manifest.has_split(REFERENCE_SPLIT) {
        REFERENCE_SPLIT
    } else {
        CALIBRATION_SPLIT
    };
    let layers = manifest.layers_by_index();
    if index.layers.len() != layers.len() {
        return Err(CliError::config(format!(
            "{} has {} tables for a pack with {} layers",
            index_path.display(),
            index.layers.len(),
            layers.len()
        )));
    }
    let mut scorers = Vec::new();
    let mut tables = Vec::new();
    for (layer, entry) in layers.into_iter().zip(&index.layers) {
        let scorer = config.scorers.for_layer(layer);
        if entry.index != layer.index || entry.name != layer.name || entry.scorer != scorer {
            return Err(CliError::config(format!(
                "table for layer {} was fit with a different layer or scorer; rerun calibrate",
                layer.index
            )));
        }
        scorers.push(LayerScorer::new(
            layer,
            scorer,
            Some(pack.matrix(layer.index, reference_split)?),
        )?);
        tables.push(CalibrationTable::load(dir.join(&entry.file))?);
    }
    Ok(FittedLayers::from_parts(scorers, tables)?)
}

/// What `detect` scores.
pub enum Target {
    Row { split: String, index: usize },
    Files(Vec<PathBuf>),
}

fn read_vectors(pack: &FeaturePack, files: &[PathBuf]) -> Result<Vec<FeatureMatrix>, CliError> {
    let layers = pack.manifest().layers_by_index();
    if files.len() != layers.len() {
        return Err(
            PackError::ShapeMismatch(format!("{} vector files for {} layers", files.len(), layers.len())).into(),
        );
    }
    layers
        .into_iter()
        .zip(files)
        .map(|(layer, path)| {
            let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
            if bytes.len() != layer.dim * 4 {
                return Err(PackError::ShapeMismatch(format!(
                    "{} has {} bytes, layer {} needs {}",
                    path.display(),
                    bytes.len(),
                    layer.index,
                    layer.dim * 4
                ))
                .into());
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(FeatureMatrix::new(layer.clone(), "sample", data)?)
        })
        .collect()
}

pub fn detect(
    config_path: Option<&Path>,
    overrides: &Overrides,
    target: Target,
    tables: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path, overrides)?;
    let pack = load_pack(&config)?;
    let (rows, sample): (Vec<Vec<f32>>, Value) = match &target {
        Target::Row { split, index } => {
            let rows = pack
                .manifest()
                .layers_by_index()
                .into_iter()
                .map(|l| {
                    let m = pack.matrix(l.index, split)?;
                    if *index >= m.rows() {
                        return Err(CliError::config(format!(
                            "sample {index} out of range: split `{split}` has {} rows",
                            m.rows()
                        )));
                    }
                    Ok(m.row(*index).to_vec())
                })
                .collect::<Result<Vec<_>, _>>()?;
            (rows, json!({ "split": split, "index": index }))
        }
        Target::Files(files) => {
            let rows = read_vectors(&pack, files)?.iter().map(|m| m.row(0).to_vec()).collect();
            (rows, json!({ "files": files }))
        }
    };
    let fitted = match tables {
        Some(dir) => load_fitted(&pack, &config, dir)?,
        None => FittedLayers::fit(&pack, &config.scorers)?,
    };
    let row_refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let (scores, p) = fitted.score_sample(&row_refs)?;
    let layers: Vec<Value> = fitted
        .scorers()
        .iter()
        .zip(scores.iter().zip(&p))
        .map(|(s, (score, p))| {
            json!({
                "index": s.layer().index,
                "name": s.layer().name,
                "scorer": s.config().tag(),
                "score": score,
                "p_value": p,
            })
        })
        .collect();
    let mut methods = Vec::new();
    for method_config in &config.methods {
        let result = Combiner::new(method_config.clone(), fitted.m())?.detect(&p)?;
        let mut entry = json!({
            "method": method_config.method.name(),
            "label": method_config.method.label(),
            "alpha": method_config.alpha,
        });
        if let (Value::Object(entry), Value::Object(result)) =
            (&mut entry, serde_json::to_value(&result).expect("result serializes"))
        {
            entry.extend(result);
        }
        methods.push(entry);
    }
    let out = json!({ "sample": sample, "layers": layers, "methods": methods });
    println!("{}", serde_json::to_string_pretty(&out).expect("json serializes"));
    Ok(())
}
