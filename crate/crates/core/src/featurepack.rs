//! On-disk feature packs.
//!
//! A pack is a directory holding a `manifest.json` and one headerless binary
//! file per (layer, split) pair, named `layer_<index>_<split>.bin`. Every
//! binary file is a row-major matrix of little-endian `f32` values with shape
//! `(count, dim)`, where `count` comes from the split table and `dim` from the
//! layer table of the manifest.
//!
//! ```text
//! pack/
//!   manifest.json
//!   layer_1_calibration.bin
//!   layer_1_test_id.bin
//!   layer_1_svhn.bin
//!   ...
//! ```
//!
//! Splits other than `calibration`, `test_id` and the optional `reference`
//! split are treated as OOD datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_F32LE: &str = "f32le";
pub const FORMAT_VERSION: u32 = 1;

/// Held-out ID split used to build the empirical score distributions.
pub const CALIBRATION_SPLIT: &str = "calibration";
/// ID split used for metric operating points.
pub const TEST_ID_SPLIT: &str = "test_id";
/// Optional ID split used as the k-NN reference set instead of the calibration split.
pub const REFERENCE_SPLIT: &str = "reference";

#[derive(Debug, Error)]
pub enum PackError {
    #[error("missing matrix file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("size mismatch for layer {layer}, split {split}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        layer: usize,
        split: String,
        expected: u64,
        actual: u64,
    },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("NaN in layer {layer}, split {split} at row {row}, column {col}")]
    NaNInData {
        layer: usize,
        split: String,
        row: usize,
        col: usize,
    },
    #[error("infinite value in layer {layer}, split {split} at row {row}, column {col}")]
    InfInData {
        layer: usize,
        split: String,
        row: usize,
        col: usize,
    },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("unknown layer index {0}")]
    UnknownLayer(usize),
    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("I/O failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PackError {
    pub fn kind(&self) -> &'static str {
        match self {
            PackError::MissingFile(_) => "MissingFile",
            PackError::SizeMismatch { .. } => "SizeMismatch",
            PackError::SchemaError(_) => "SchemaError",
            PackError::NaNInData { .. } => "NaNInData",
            PackError::InfInData { .. } => "InfInData",
            PackError::UnknownSplit(_) => "UnknownSplit",
            PackError::UnknownLayer(_) => "UnknownLayer",
            PackError::IncompleteGrid(_) => "IncompleteGrid",
            PackError::ShapeMismatch(_) => "ShapeMismatch",
            PackError::IoFailure { .. } => "IoFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PackError + '_ {
    move |source| PackError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Features,
    Logits,
}

/// One tapped layer: its output space and position in the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub dim: usize,
    /// 1-based depth position; index 1 is the shallowest layer.
    pub index: usize,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, dim: usize, index: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            dim,
            index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub version: u32,
    pub num_classes: usize,
    pub dtype: String,
    pub layers: Vec<LayerSpec>,
    pub splits: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels_present: BTreeMap<String, bool>,
}

impl PackManifest {
    pub fn new(num_classes: usize, layers: Vec<LayerSpec>, splits: BTreeMap<String, usize>) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_classes,
            dtype: DTYPE_F32LE.to_string(),
            layers,
            splits,
            labels_present: BTreeMap::new(),
        }
    }

    /// Checks the manifest's internal consistency. Does not touch the filesystem.
    pub fn validate(&self) -> Result<(), PackError> {
        let schema = |msg: String| Err(PackError::SchemaError(msg));
        if self.version != FORMAT_VERSION {
            return schema(format!("unsupported version {}", self.version));
        }
        if self.dtype != DTYPE_F32LE {
            return schema(format!("unsupported dtype `{}`", self.dtype));
        }
        if self.layers.is_empty() {
            return schema("pack declares no layers".into());
        }
        let mut names = BTreeSet::new();
        let mut indices = BTreeSet::new();
        for layer in &self.layers {
            if layer.name.is_empty() {
                return schema("empty layer name".into());
            }
            if !names.insert(layer.name.as_str()) {
                return schema(format!("duplicate layer name `{}`", layer.name));
            }
            if !indices.insert(layer.index) {
                return schema(format!("duplicate layer index {}", layer.index));
            }
            if layer.dim == 0 {
                return schema(format!("layer `{}` has dim 0", layer.name));
            }
            if layer.kind == LayerKind::Logits && layer.dim != self.num_classes {
                return schema(format!(
                    "logits layer `{}` has dim {} but num_classes is {}",
                    layer.name, layer.dim, self.num_classes
                ));
            }
        }
        let m = self.layers.len();
        if indices.iter().copied().ne(1..=m) {
            return schema(format!("layer indices {:?} are not contiguous 1..{m}", indices));
        }
        if self.splits.is_empty() {
            return schema("pack declares no splits".into());
        }
        for split in self.splits.keys() {
            validate_split_name(split)?;
        }
        for split in self.labels_present.keys() {
            if !self.splits.contains_key(split) {
                return schema(format!("labels_present names unknown split `{split}`"));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layers sorted by index.
    pub fn layers_by_index(&self) -> Vec<&LayerSpec> {
        let mut layers: Vec<_> = self.layers.iter().collect();
        layers.sort_by_key(|l| l.index);
        layers
    }

    pub fn layer(&self, index: usize) -> Result<&LayerSpec, PackError> {
        self.layers
            .iter()
            .find(|l| l.index == index)
            .ok_or(PackError::UnknownLayer(index))
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn split_count(&self, split: &str) -> Result<usize, PackError> {
        self.splits
            .get(split)
            .copied()
            .ok_or_else(|| PackError::UnknownSplit(split.to_string()))
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    /// Splits that hold OOD datasets, in name order.
    pub fn ood_splits(&self) -> Vec<&str> {
        self.splits
            .keys()
            .map(String::as_str)
            .filter(|s| ![CALIBRATION_SPLIT, TEST_ID_SPLIT, REFERENCE_SPLIT].contains(s))
            .collect()
    }

    fn expected_bytes(&self, layer: &LayerSpec, split: &str) -> Result<u64, PackError> {
        let count = self.split_count(split)? as u64;
        Ok(count * layer.dim as u64 * 4)
    }
}

fn validate_split_name(split: &str) -> Result<(), PackError> {
    let ok = !split.is_empty()
        && split
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !split.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(PackError::SchemaError(format!("invalid split name `{split}`")))
    }
}

pub fn matrix_file_name(layer_index: usize, split: &str) -> String {
    format!("layer_{layer_index}_{split}.bin")
}

/// A dense row-major `(rows, dim)` matrix for one (layer, split) pair.
///
/// Values are finite; construction rejects NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    layer: LayerSpec,
    split: String,
    rows: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(layer: LayerSpec, split: impl Into<String>, data: Vec<f32>) -> Result<Self, PackError> {
        let split = split.into();
        if layer.dim == 0 {
            return Err(PackError::SchemaError(format!("layer `{}` has dim 0", layer.name)));
        }
        if !data.len().is_multiple_of(layer.dim) {
            return Err(PackError::ShapeMismatch(format!(
                "{} values is not a multiple of dim {} (layer {}, split {split})",
                data.len(),
                layer.dim,
                layer.index
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos / layer.dim, pos % layer.dim);
            let (index, split) = (layer.index, split.clone());
            return Err(if data[pos].is_nan() {
                PackError::NaNInData {
                    layer: index,
                    split,
                    row,
                    col,
                }
            } else {
                PackError::InfInData {
                    layer: index,
                    split,
                    row,
                    col,
                }
            });
        }
        let rows = data.len() / layer.dim;
        Ok(Self {
            layer,
            split,
            rows,
            data,
        })
    }

    pub fn from_rows(layer: LayerSpec, split: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self, PackError> {
        let dim = layer.dim;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(PackError::ShapeMismatch(format!(
                "row of length {} for layer of dim {dim}",
                bad.len()
            )));
        }
        Self::new(layer, split, rows.concat())
    }

    pub fn layer(&self) -> &LayerSpec {
        &self.layer
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.layer.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.layer.dim;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.layer.dim)
    }

    /// Copy with the rows reordered (or subset) by `order`.
    pub fn select_rows(&self, order: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(order.len() * self.dim());
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            layer: self.layer.clone(),
            split: self.split.clone(),
            rows: order.len(),
            data,
        }
    }
}

/// Reads and validates `manifest.json` in `dir`, and checks that every
/// declared matrix file exists with the exact expected byte length.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<PackManifest, PackError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(PackError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: PackManifest =
        serde_json::from_str(&text).map_err(|e| PackError::SchemaError(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    for layer in manifest.layers_by_index() {
        for split in manifest.splits.keys() {
            let file = dir.join(matrix_file_name(layer.index, split));
            let meta = match fs::metadata(&file) {
                Ok(meta) if meta.is_file() => meta,
                Ok(_) => return Err(PackError::MissingFile(file)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(PackError::MissingFile(file)),
                Err(e) => return Err(io_err(&file)(e)),
            };
            let expected = manifest.expected_bytes(layer, split)?;
            if meta.len() != expected {
                return Err(PackError::SizeMismatch {
                    layer: layer.index,
                    split: split.clone(),
                    expected,
                    actual: meta.len(),
                });
            }
        }
    }
    Ok(manifest)
}

/// Loads the `(layer, split)` matrix of a pack whose manifest was read from `dir`.
pub fn load_split(
    dir: impl AsRef<Path>,
    manifest: &PackManifest,
    layer: &LayerSpec,
    split: &str,
) -> Result<FeatureMatrix, PackError> {
    let declared = manifest.layer(layer.index)?;
    if declared != layer {
        return Err(PackError::SchemaError(format!(
            "layer {} does not match the manifest entry",
            layer.index
        )));
    }
    let expected = manifest.expected_bytes(layer, split)?;
    let file = dir.as_ref().join(matrix_file_name(layer.index, split));
    let bytes = match fs::read(&file) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(PackError::MissingFile(file)),
        Err(e) => return Err(io_err(&file)(e)),
    };
    if bytes.len() as u64 != expected {
        return Err(PackError::SizeMismatch {
            layer: layer.index,
            split: split.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMatrix::new(layer.clone(), split, data)
}

/// Writes `manifest.json` and one binary file per (layer, split) into `dir`.
///
/// `matrices` must cover the manifest's layer × split grid exactly once.
pub fn write_pack(matrices: &[FeatureMatrix], manifest: &PackManifest, dir: impl AsRef<Path>) -> Result<(), PackError> {
    let dir = dir.as_ref();
    manifest.validate()?;
    let grid = index_grid(matrices, manifest)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for ((layer, split), matrix) in &grid {
        let path = dir.join(matrix_file_name(*layer, split));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        for v in matrix.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

fn index_grid<'a>(
    matrices: &'a [FeatureMatrix],
    manifest: &PackManifest,
) -> Result<BTreeMap<(usize, String), &'a FeatureMatrix>, PackError> {
    let mut grid = BTreeMap::new();
    for matrix in matrices {
        let layer = manifest
            .layer(matrix.layer.index)
            .map_err(|_| PackError::IncompleteGrid(format!("matrix for undeclared layer {}", matrix.layer.index)))?;
        if *layer != matrix.layer {
            return Err(PackError::ShapeMismatch(format!(
                "matrix layer spec for index {} differs from the manifest",
                layer.index
            )));
        }
        let count = manifest
            .split_count(&matrix.split)
            .map_err(|_| PackError::IncompleteGrid(format!("matrix for undeclared split `{}`", matrix.split)))?;
        if matrix.rows != count {
            return Err(PackError::ShapeMismatch(format!(
                "layer {}, split {}: {} rows but manifest declares {count}",
                layer.index, matrix.split, matrix.rows
            )));
        }
        if grid.insert((layer.index, matrix.split.clone()), matrix).is_some() {
            return Err(PackError::IncompleteGrid(format!(
                "duplicate matrix for layer {}, split {}",
                layer.index, matrix.split
            )));
        }
    }
    for layer in &manifest.layers {
        for split in manifest.splits.keys() {
            if !grid.contains_key(&(layer.index, split.clone())) {
                return Err(PackError::IncompleteGrid(format!(
                    "no matrix for layer {}, split {split}",
                    layer.index
                )));
            }
        }
    }
    Ok(grid)
}

/// An in-memory pack: manifest plus the full matrix grid.
#[derive(Clone, Debug)]
pub struct FeaturePack {
    manifest: PackManifest,
    matrices: BTreeMap<(usize, String), FeatureMatrix>,
}

impl FeaturePack {
    pub fn new(manifest: PackManifest, matrices: Vec<FeatureMatrix>) -> Result<Self, PackError> {
        manifest.validate()?;
        index_grid(&matrices, &manifest)?;
        let matrices = matrices
            .into_iter()
            .map(|m| ((m.layer.index, m.split.clone()), m))
            .collect();
        Ok(Self { manifest, matrices })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PackError> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut matrices = BTreeMap::new();
        for layer in &manifest.layers {
            for split in manifest.splits.keys() {
                let m = load_split(dir, &manifest, layer, split)?;
                matrices.insert((layer.index, split.clone()), m);
            }
        }
        Ok(Self { manifest, matrices })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), PackError> {
        let matrices: Vec<FeatureMatrix> = self.matrices.values().cloned().collect();
        write_pack(&matrices, &self.manifest, dir)
    }

    pub fn manifest(&self) -> &PackManifest {
        &self.manifest
    }

    pub fn matrix(&self, layer_index: usize, split: &str) -> Result<&FeatureMatrix, PackError> {
        self.manifest.layer(layer_index)?;
        self.manifest.split_count(split)?;
        self.matrices
            .get(&(layer_index, split.to_string()))
            .ok_or_else(|| PackError::IncompleteGrid(format!("no matrix for layer {layer_index}, split {split}")))
    }

    pub fn matrices(&self) -> impl Iterator<Item = &FeatureMatrix> {
        self.matrices.values()
    }
}
